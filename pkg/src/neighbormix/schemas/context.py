# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Schemas for app and lib contexts."""

from __future__ import annotations

import pydantic as p

from .config import DEFAULT_LOGGING_CONFIG, LoggingModel


class BaseModel(p.BaseModel):
    """
    Configuration for all Context object classes.

    :cvar model_config: Contexts are frozen, reject unknown fields and validate their defaults.
    """

    model_config = p.ConfigDict(frozen=True, extra="forbid", validate_default=True)


class AppContext(BaseModel):
    """
    Structure and defaults of the app_ctx.

    :ivar logging_cfg: Configuration of the application logging.
    """

    logging_cfg: LoggingModel = LoggingModel.model_validate(DEFAULT_LOGGING_CONFIG)


class LibContext(BaseModel):
    """
    Structure and defaults of the lib_ctx.

    :ivar chunksize: number of bytes to read or write at one time for file IO
    :ivar thread_max: Maximum number of helper threads for per-video parallel sections.  Results
        never depend on this value.
    :ivar file_check_content: Maximum number of bytes of a file to read before writing it to
        compare contents. If contents are as expected, file is not overwritten. Set to 0 to
        disable.
    """

    chunksize: int = p.Field(4096, ge=1)
    thread_max: int = p.Field(8, ge=1)
    file_check_content: int = p.Field(262144, ge=0)
