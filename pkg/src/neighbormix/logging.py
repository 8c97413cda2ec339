# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
The neighbormix logging framework.

The numerical modules (:mod:`neighbormix.autodiff`, :mod:`neighbormix.losses`, ...) are usable as
a library, so importing them must not print anything.  Merely importing this module therefore
configures the log in library mode, where output is disabled.  The ``neighbormix`` command calls
:func:`initialize_app_logging` before doing any work, which turns output on, and later hands the
user's ``logging_cfg`` to :twiggy:func:`twiggy.dict_config`.


Usage within a module
=====================

The log is named ``neighbormix``.  At the top of each module create a logger which carries the
module name in the ``mod`` field, and inside functions refine it with the ``func`` field:

.. code-block:: python

    from .logging import log

    mlog = log.fields(mod=__name__)

    def train(dataset, cfg):
        flog = mlog.fields(func='train')
        flog.debug('Enter')
        ...
        flog.fields(epoch=epoch, total=mean_total).info('epoch finished')
        flog.debug('Leave')

Values that make sense as ``key=value`` belong in ``fields()`` so the output stays machine
parsable, for example::

    INFO:neighbormix:epoch=3:func=train:mod=neighbormix.train:total=0.8123|epoch finished


Logging levels
==============

:CRITICAL: The run cannot continue and the user must act.  Example: an output directory cannot be
    written.
:ERROR: A run was aborted, for instance because a loss term became non-finite.
:WARNING: Something unexpected that the program worked around.  Examples: a degenerate row in
    :func:`neighbormix.autodiff.l2_normalize_rows`, an unknown field in a dataset manifest, a
    proposal interval clipped to the video extent.
:NOTICE: Pipeline milestones: dataset generated, training finished, evaluation written.
:INFO: Per-epoch loss means, evaluation snapshots, files read and written.
:DEBUG: Function entry and exit, shapes of intermediate tensors.


Application setup
=================

.. code-block:: python

    import twiggy

    from ..logging import initialize_app_logging, log

    initialize_app_logging()

    from ..config import load_config

    def run(args):
        cfg = load_config(args.config_file)
        context_data = app_context.create_contexts(args=args, cfg=cfg)
        with app_context.app_and_lib_context(context_data) as (app_ctx, dummy_):
            twiggy.dict_config(app_ctx.logging_cfg.model_dump())

Until ``dict_config`` is called, messages of level ``WARNING`` and above go to stderr.  Set the
:envvar:`NEIGHBORMIX_EARLY_DEBUG` environment variable to see ``DEBUG`` messages from the very
start.
"""

from __future__ import annotations

import os

import twiggy  # type: ignore[import]
import twiggy.levels  # type: ignore[import]

#: The standard log to use everywhere.  Modules set their own name in the ``mod`` field.
log = twiggy.log.name("neighbormix").trace()

# Library mode: silent until an application asks for output.
log.min_level = twiggy.levels.DISABLED

mlog = log.fields(mod=__name__)
mlog.debug("logging loaded")


def initialize_app_logging() -> None:
    """
    Change log settings to make sense for an application.

    Merely importing :mod:`neighbormix.logging` sets up the logger for use as part of a library.
    Calling this function initializes the logger for use in the ``neighbormix`` command.
    """
    # Let every message through the log itself; the emitters decide what is shown.
    log.min_level = twiggy.levels.DEBUG

    _level = twiggy.levels.WARNING
    if os.environ.get("NEIGHBORMIX_EARLY_DEBUG", False):
        _level = twiggy.levels.DEBUG
    twiggy.quick_setup(min_level=_level)


__all__ = ("log", "initialize_app_logging")
