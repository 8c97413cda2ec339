# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Digests of feature files, as recorded in dataset manifests."""

from __future__ import annotations

import hashlib
import typing as t

from antsibull_fileutils.hashing import verify_hash as _verify_hash

from .. import app_context

if t.TYPE_CHECKING:
    from _typeshed import StrOrBytesPath

#: Only algorithm manifests use.
MANIFEST_HASH = "sha256"


def sha256_digest(content: bytes) -> str:
    """Hex digest of feature file content that is still in memory."""
    return hashlib.new(MANIFEST_HASH, content).hexdigest()


async def verify_hash(filename: StrOrBytesPath, hash_digest: str) -> bool:
    """
    Read ``filename`` in ``lib_ctx.chunksize`` pieces and compare its digest with the one from
    the manifest.
    """
    return await _verify_hash(
        filename,
        hash_digest,
        algorithm=MANIFEST_HASH,
        chunksize=app_context.lib_ctx.get().chunksize,
    )
