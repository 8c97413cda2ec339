# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Bounded per-video parallelism."""

from __future__ import annotations

import asyncio
import typing as t
from collections.abc import Callable, Sequence

from . import app_context
from .logging import log

mlog = log.fields(mod=__name__)

ItemT = t.TypeVar("ItemT")
ResultT = t.TypeVar("ResultT")


async def map_bounded(
    func: Callable[[ItemT], ResultT],
    items: Sequence[ItemT],
    limit: int | None = None,
) -> list[ResultT]:
    """
    Apply ``func`` to every item in helper threads, at most ``limit`` at a time.

    Results come back in the order of ``items`` no matter in which order the threads finish, so
    any reduction over them is independent of ``limit``.

    :arg func: Synchronous callable.  It must not mutate state shared between items.
    :arg items: The work items.
    :kwarg limit: Maximum number of concurrent threads.  Defaults to ``lib_ctx.thread_max``.
        With ``1`` every call runs inline in the event loop thread.
    """
    flog = mlog.fields(func="map_bounded")
    if limit is None:
        limit = app_context.lib_ctx.get().thread_max
    flog.fields(items=len(items), limit=limit).debug("Enter")

    if limit <= 1:
        return [func(item) for item in items]

    # asyncio.to_thread runs func in a copy of the current context, so lib_ctx and the active
    # gradient tape of the caller stay separate from those of other items.
    sem = asyncio.Semaphore(limit)

    async def _bounded(item: ItemT) -> ResultT:
        async with sem:
            return await asyncio.to_thread(func, item)

    results = await asyncio.gather(*(_bounded(item) for item in items))
    flog.debug("Leave")
    return list(results)
