# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

"""
Helpers for pydantic.
"""

from __future__ import annotations

import pydantic as p


def get_formatted_error_messages(error: p.ValidationError) -> list[str]:
    """Format each validation error as ``section -> key: message``."""

    def format_error(err) -> str:
        location = " -> ".join(str(loc) for loc in err["loc"])
        if not location:
            return err["msg"]
        return f'{location}: {err["msg"]}'

    return [format_error(err) for err in error.errors()]


def get_extra_field_names(model: p.BaseModel, prefix: str = "") -> list[str]:
    """
    List fields which a model with ``extra="allow"`` accepted without declaring them.

    Nested models are searched as well; their fields are reported as ``outer.inner``.
    """
    names = [f"{prefix}{name}" for name in sorted(model.model_extra or {})]
    for field_name in type(model).model_fields:
        value = getattr(model, field_name)
        if isinstance(value, p.BaseModel):
            names.extend(get_extra_field_names(value, f"{prefix}{field_name}."))
        elif isinstance(value, (list, tuple)):
            for index, item in enumerate(value):
                if isinstance(item, p.BaseModel):
                    names.extend(
                        get_extra_field_names(item, f"{prefix}{field_name}.{index}.")
                    )
    return names
