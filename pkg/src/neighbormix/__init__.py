# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

"""
Weakly-supervised temporal action localization with adjacent-snippet mixing consistency
"""

from __future__ import annotations

__version__ = "0.1.0"

__all__ = ("__version__",)
