# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

import argparse

import pydantic as p
import pytest

import neighbormix.app_context as ap
from neighbormix.schemas.config import LoggingModel

#
# Context creation tests
#


def test_default():
    """Context has default values if no context manager is used"""
    lib_ctx = ap.lib_ctx.get()
    assert lib_ctx.chunksize == 4096
    assert lib_ctx.thread_max == 8
    assert lib_ctx.file_check_content == 262144

    app_ctx = ap.app_ctx.get()
    assert isinstance(app_ctx.logging_cfg, LoggingModel)


def test_create_contexts_with_cfg():
    """Test that the create_contexts function sets values from a config dict"""
    cfg = {"chunksize": 1, "epochs": 3}
    app_ctx, lib_ctx, args, cfg = ap.create_contexts(cfg=cfg)

    assert args == argparse.Namespace()
    assert cfg == {"epochs": 3}

    assert lib_ctx.chunksize == 1
    assert lib_ctx.thread_max == 8
    assert isinstance(app_ctx.logging_cfg, LoggingModel)


def test_create_contexts_with_args():
    """Test that the create_context function sets values from cli args"""
    args = argparse.Namespace(thread_max=2, seed=4)
    app_ctx, lib_ctx, args, cfg = ap.create_contexts(args=args)

    assert args == argparse.Namespace(seed=4)
    assert cfg == {}

    assert lib_ctx.chunksize == 4096
    assert lib_ctx.thread_max == 2
    assert isinstance(app_ctx.logging_cfg, LoggingModel)


def test_create_contexts_with_args_and_cfg():
    """Test that args override cfg"""
    cfg = {
        "chunksize": 1,
        "thread_max": 2,
        "lambda2": 5,
    }
    args = argparse.Namespace(chunksize=3, command="train")
    app_ctx, lib_ctx, args, cfg = ap.create_contexts(args=args, cfg=cfg)

    assert args == argparse.Namespace(command="train")
    assert cfg == {"lambda2": 5}

    assert lib_ctx.chunksize == 3
    assert lib_ctx.thread_max == 2


@pytest.mark.parametrize("thread_max", [0, -1])
def test_create_contexts_rejects_bad_thread_max(thread_max):
    with pytest.raises(p.ValidationError, match="thread_max"):
        ap.create_contexts(cfg={"thread_max": thread_max})


#
# Context manager tests
#


def test_context_overrides():
    data = ap.create_contexts(cfg={"chunksize": 5, "thread_max": 1})

    with ap.lib_context(data.lib_ctx) as lib_ctx:
        # Test that the returned lib_ctx has the new values
        assert lib_ctx.chunksize == 5

        # Likewise for the one that we can retrieve
        lib_ctx = ap.lib_ctx.get()
        assert lib_ctx.chunksize == 5
        assert lib_ctx.thread_max == 1

    # Check that once we return from the context managers, the old values have been restored
    lib_ctx = ap.lib_ctx.get()
    assert lib_ctx.chunksize == 4096
    assert lib_ctx.thread_max == 8


def test_manager_creates_new_context():
    orig_app_ctx = ap.app_ctx.get()
    with ap.app_context() as app_ctx:
        new_app_ctx = ap.app_ctx.get()
        # Test that the app_ctx that was returned is the same as the one that is now set
        assert app_ctx is new_app_ctx

        # Test that the new app_ctx is different than the old one
        assert new_app_ctx is not orig_app_ctx

        # Test that the app_ctx that was returned has the same values as the old context
        assert new_app_ctx == orig_app_ctx

    orig_lib_ctx = ap.lib_ctx.get()
    with ap.lib_context() as lib_ctx:
        new_lib_ctx = ap.lib_ctx.get()
        assert lib_ctx is new_lib_ctx
        assert new_lib_ctx is not orig_lib_ctx
        assert new_lib_ctx == orig_lib_ctx

    # Check that once we return from the context managers, the old contexts have been returned
    assert orig_app_ctx is ap.app_ctx.get()
    assert orig_lib_ctx is ap.lib_ctx.get()


def test_app_and_lib_context():
    data = ap.create_contexts(cfg={"chunksize": 5, "thread_max": 3})

    with ap.app_and_lib_context(data) as (app_ctx, lib_ctx):
        assert isinstance(app_ctx.logging_cfg, LoggingModel)
        assert lib_ctx.chunksize == 5

        lib_ctx = ap.lib_ctx.get()
        assert lib_ctx.thread_max == 3

    # Check that once we return from the context manager, the old values have been restored
    lib_ctx = ap.lib_ctx.get()
    assert lib_ctx.chunksize == 4096
    assert lib_ctx.thread_max == 8
