# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Pydantic validators."""

from __future__ import annotations

import typing as t

#: Ladders are rounded to this many decimals so that ``0.1:0.1:0.7`` yields 0.3, not
#: 0.30000000000000004.
LADDER_DECIMALS = 10


def convert_none(value):
    """
    Convert strings to Python None.

    When a setting is set to None in a config file, it could be the string "None" or "Null".
    This validator will convert those strings to python None.
    """
    if isinstance(value, str) and value.lower() in ("none", "null"):
        value = None
    return value


def _is_truthy_int(value):
    if value == 0:
        return False
    return True


def convert_bool(value):
    """
    Convert strings to Python True/False.

    True and False values may be specified in config files and the command line as strings.
    ``on``/``off`` are accepted alongside ``yes``/``no`` and ``true``/``false`` since switches such
    as ``c3bn`` and ``use_projection`` read naturally that way.
    """
    if isinstance(value, str):
        if value.lower() in ("false", "no", "n", "f", "off", ""):
            value = False
        elif value.lower() in ("true", "yes", "y", "t", "on"):
            value = True
        else:
            try:
                value = int(value)
            # A string which is not a number is left for pydantic to reject.
            except Exception:  # pylint: disable=broad-except
                pass
            else:
                value = _is_truthy_int(value)

    elif isinstance(value, int):
        value = _is_truthy_int(value)

    return value


def parse_ladder(spec: str) -> list[float]:
    """
    Expand a ``start:step:stop`` ladder.  ``stop`` is included when the ladder lands on it.

    :raises ValueError: if the ladder is malformed or empty.
    """
    pieces = spec.split(":")
    if len(pieces) != 3:
        raise ValueError(f"ladder {spec!r} must have the form start:step:stop")
    start, step, stop = (float(piece) for piece in pieces)
    if step <= 0:
        raise ValueError(f"ladder {spec!r} must have a positive step")
    if stop < start:
        raise ValueError(f"ladder {spec!r} must not end before it starts")
    count = int(round((stop - start) / step, LADDER_DECIMALS)) + 1
    return [round(start + index * step, LADDER_DECIMALS) for index in range(count)]


def convert_float_list(value: t.Any) -> t.Any:
    """
    Convert ``0.1,0.2`` lists and ``start:step:stop`` ladders to lists of floats.

    Anything that is not a string is passed through for pydantic to validate.
    """
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    if not isinstance(value, str):
        return value
    value = value.strip()
    if ":" in value:
        return parse_ladder(value)
    return [float(piece) for piece in value.split(",") if piece.strip()]
