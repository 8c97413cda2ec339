# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Setup an application context to save global data which is set on program start.

Some settings are fixed when the program starts and never change afterwards: how many helper
threads per-video work may use, how large file chunks are, how logging is routed.  Keeping them in
:mod:`contextvars` rather than module globals lets tests and library users swap them for a block
of code without monkeypatching.

Setup
=====

Importing :mod:`neighbormix.app_context` sets up default contexts.  The ``neighbormix`` command
builds new ones from its arguments and configuration with :func:`create_contexts` and runs every
subcommand inside :func:`app_and_lib_context`:

.. code-block:: python

    from neighbormix import app_context
    from neighbormix.config import load_config
    from neighbormix.parallel import map_bounded

    def score_all(videos):
        # Uses lib_ctx.thread_max helper threads.
        return asyncio.run(map_bounded(score_video, videos))

    def run(args):
        cfg = load_config(args.config_file)
        context_data = app_context.create_contexts(args=args, cfg=cfg)
        with app_context.app_and_lib_context(context_data):
            score_all(videos)

Experiment settings are not part of either context.  They are returned unused by
:func:`create_contexts` and validated by :class:`neighbormix.schemas.experiment.ExperimentConfig`,
so that they are passed explicitly to the training and inference functions.
"""

from __future__ import annotations

import argparse
import contextvars
import typing as t
from collections.abc import Iterable, Mapping
from contextlib import contextmanager

from .schemas.context import AppContext, LibContext

#: lib_ctx holds incidental values which library code may consult globally: chunk sizes for file
#: IO and the cap on helper threads.  None of them changes a computed result.  All values have a
#: default so library code works when no application set anything.
lib_ctx: contextvars.ContextVar[LibContext] = contextvars.ContextVar("lib_ctx")

#: app_ctx holds values which only application code consults, currently the logging setup.
app_ctx: contextvars.ContextVar[AppContext] = contextvars.ContextVar("app_ctx")


class ContextReturn(t.NamedTuple):
    """
    What :func:`create_contexts` built, plus everything it left alone.

    :ivar app_ctx: Settings only the ``neighbormix`` command consults.
    :ivar lib_ctx: Settings any neighbormix function may consult.
    :ivar args: Command line arguments that did not go into a context.
    :ivar cfg: Config keys that did not go into a context, which are the experiment settings.
    """

    app_ctx: AppContext
    lib_ctx: LibContext
    args: argparse.Namespace
    cfg: dict


def _pick(
    names: Iterable[str], args: argparse.Namespace | None, cfg: Mapping[str, t.Any]
) -> dict[str, t.Any]:
    picked = {name: cfg[name] for name in names if name in cfg}
    if args is not None:
        # command line beats config
        picked.update({name: getattr(args, name) for name in names if hasattr(args, name)})
    return picked


def create_contexts(
    args: argparse.Namespace | None = None, cfg: Mapping | None = None
) -> ContextReturn:
    """
    Split command line arguments and configuration into the two contexts and the rest.

    :kwarg args: Parsed command line.  Options which feed a context field must use
        ``default=argparse.SUPPRESS``; an argparse default cannot be told apart from a value the
        user typed and would always beat the config file.
    :kwarg cfg: Flat configuration as returned by :func:`neighbormix.config.load_config`.
    :raises pydantic.ValidationError: if a context value is invalid.
    """
    cfg = dict(cfg or {})
    lib_names = tuple(LibContext.model_fields)
    app_names = tuple(AppContext.model_fields)
    consumed = set(lib_names) | set(app_names)

    rest_args = {}
    if args is not None:
        rest_args = {key: value for key, value in vars(args).items() if key not in consumed}

    return ContextReturn(
        app_ctx=AppContext(**_pick(app_names, args, cfg)),
        lib_ctx=LibContext(**_pick(lib_names, args, cfg)),
        args=argparse.Namespace(**rest_args),
        cfg={key: value for key, value in cfg.items() if key not in consumed},
    )


_Ctx = t.TypeVar("_Ctx", LibContext, AppContext)


@contextmanager
def _swapped(
    var: contextvars.ContextVar[_Ctx], new_context: _Ctx | None, fallback: type[_Ctx]
) -> t.Generator[_Ctx, None, None]:
    if new_context is None:
        new_context = var.get(fallback()).model_copy()
    token = var.set(new_context)
    try:
        yield new_context
    finally:
        var.reset(token)


def lib_context(new_context: LibContext | None = None) -> t.ContextManager[LibContext]:
    """
    Run a block with a different lib context, for example a single helper thread::

        with lib_context(LibContext(thread_max=1)):
            result = asyncio.run(train(dataset, cfg, weights, model_cfg))

    Without an argument the block gets a copy of the current context.
    """
    return _swapped(lib_ctx, new_context, LibContext)


def app_context(new_context: AppContext | None = None) -> t.ContextManager[AppContext]:
    """Like :func:`lib_context` for the app context."""
    return _swapped(app_ctx, new_context, AppContext)


@contextmanager
def app_and_lib_context(
    context_data: ContextReturn,
) -> t.Generator[tuple[AppContext, LibContext], None, None]:
    """Enter both contexts of ``context_data``; yields ``(app_ctx, lib_ctx)``."""
    with lib_context(context_data.lib_ctx) as new_lib_ctx:
        with app_context(context_data.app_ctx) as new_app_ctx:
            yield (new_app_ctx, new_lib_ctx)


# defaults for library use
lib_ctx.set(LibContext())
app_ctx.set(AppContext())
