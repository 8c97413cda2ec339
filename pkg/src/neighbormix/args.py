# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Argument parsing helpers."""

from __future__ import annotations

import argparse
import os
import os.path
from importlib import metadata

#: Environment variable which provides the default seed.
SEED_ENV_VAR = "C3BN_SEED"


class InvalidArgumentError(Exception):
    """A problem parsing or validating a command line argument."""


def get_toplevel_parser(
    package: str,
    *,
    package_version: str | None = None,
    program_name: str | None = None,
    **kwargs,
) -> argparse.ArgumentParser:
    """
    Create a toplevel argument parser with options common across all subcommands.

    :arg package: The Python package containing this CLI program.
    :arg package_version: If provided, use this instead of the version for ``package``
        provided by ``importlib.metadata.version()``.
    :arg program_name: If provided, show a more concrete description for this program.
    :args kwargs: This function takes any keyword arguments and passes them directly on to
        the :class:`argparse.ArgumentParser` constructor.
    :returns: :class:`argparse.ArgumentParser` with common script arguments added.
    """
    if package_version is None:
        try:
            package_version = metadata.version(package)
        except metadata.PackageNotFoundError:
            # Running from a source checkout
            package_version = "source"

    toplevel_parser = argparse.ArgumentParser(**kwargs)
    toplevel_parser.add_argument(
        "--version",
        action="version",
        version=package_version,
        help=(
            f"Print the {program_name} version"
            if program_name
            else "Print the program's version"
        ),
    )
    return toplevel_parser


def add_common_options(parser: argparse.ArgumentParser) -> None:
    """
    Add the options every subcommand accepts.

    ``--threads`` maps onto ``lib_ctx.thread_max`` and therefore has no argparse default (see
    :func:`neighbormix.app_context.create_contexts`).
    """
    parser.add_argument(
        "--config-file",
        default=[],
        action="append",
        help="Specify one or more config files to use to configure the"
        " program. If more than one are specified, keys from later"
        " config files override keys from earlier ones.",
    )
    parser.add_argument(
        "--threads",
        dest="thread_max",
        type=int,
        default=argparse.SUPPRESS,
        help="Maximum number of helper threads for per-video work. Results do not depend on it.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"Seed for every random choice. Defaults to ${SEED_ENV_VAR}, then to 0.",
    )


def default_seed() -> int:
    """
    Seed to use when ``--seed`` was not given and the config does not set one.

    :raises InvalidArgumentError: if :envvar:`C3BN_SEED` is set but not a non-negative integer.
    """
    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value == "":
        return 0
    try:
        seed = int(value)
    except ValueError as exc:
        raise InvalidArgumentError(
            f"{SEED_ENV_VAR} must be a non-negative integer, got {value!r}"
        ) from exc
    if seed < 0:
        raise InvalidArgumentError(f"{SEED_ENV_VAR} must not be negative, got {seed}")
    return seed


def parse_lambdas(value: str) -> tuple[float, float, float]:
    """Parse ``--lambdas 1,10,0.1``."""
    pieces = [piece.strip() for piece in value.split(",")]
    if len(pieces) != 3:
        raise argparse.ArgumentTypeError(
            f"expected three comma separated weights, got {value!r}"
        )
    try:
        weights = tuple(float(piece) for piece in pieces)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid weights {value!r}: {exc}") from exc
    if any(weight < 0 for weight in weights):
        raise argparse.ArgumentTypeError(f"weights must not be negative: {value!r}")
    return weights  # type: ignore[return-value]


def normalize_toplevel_options(args: argparse.Namespace) -> None:
    """
    Normalize and validate the common cli arguments.

    :arg args: The argparse parsed arguments.  The arguments added by
        :func:`add_common_options` will be validated and normalized.

    .. warning:: This function operates by side effect.

        Any normalization needed will be applied directly to ``args``.
    """
    for conf_file in args.config_file:
        if not os.path.isfile(conf_file):
            raise InvalidArgumentError(
                f"The user specified config file, {conf_file}, must exist."
            )
    if getattr(args, "thread_max", 1) < 1:
        raise InvalidArgumentError("--threads must be at least 1")
    if args.seed is not None and args.seed < 0:
        raise InvalidArgumentError("--seed must not be negative")
