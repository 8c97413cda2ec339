# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Adjacent-snippet mixing.

A video of ``T`` snippets yields a child sequence of ``T - 1`` snippets, child ``t`` being the
convex combination ``α_t·f_t + (1 - α_t)·f_{t+1}`` of its two parents with ``α_t`` drawn from a
symmetric Beta distribution.  The same weights mix the parents' predictions into the targets the
child's predictions are compared with.
"""

from __future__ import annotations

import dataclasses
import typing as t
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ConfigError

#: Draws are kept this far inside (0, 1).
ALPHA_CLAMP = 1e-6

SeedLike = t.Union[int, Sequence[int], np.random.Generator]


def mixing_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """
    Generator for one video in one epoch.  It depends only on its three arguments, so results do
    not change with the order in which videos are processed.
    """
    return np.random.default_rng([seed, epoch, index])


def sample_alphas(length: int, gamma: float, seed: SeedLike) -> np.ndarray:
    """
    Draw ``length - 1`` mixing weights from ``Beta(gamma, gamma)``, clamped to
    ``[1e-6, 1 - 1e-6]``.

    :arg length: ``T``, the number of snippets of the video.
    :arg gamma: Beta shape parameter.
    :arg seed: Seed, seed sequence or generator.
    :raises ConfigError: if ``gamma <= 0``.
    :raises ShapeError: if ``length < 2``.
    """
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if length < 2:
        raise ShapeError(f"mixing needs at least two snippets, got {length}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    alphas = rng.beta(gamma, gamma, size=length - 1)
    return np.clip(alphas, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)


def _mix_rows(x: Tensor, alphas: np.ndarray, opname: str) -> Tensor:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.shape[0] != x.rows - 1:
        raise ShapeError(
            f"{opname}: {x.rows} rows need {x.rows - 1} weights, got {alphas.shape}"
        )
    weight = alphas[:, None]
    mixed = weight * x.data[:-1] + (1.0 - weight) * x.data[1:]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[:-1] += weight * g
        grad[1:] += (1.0 - weight) * g
        return (grad,)

    return ad.op_result(mixed, (x,), backward)


def mix_adjacent(features: Tensor, alphas: np.ndarray) -> Tensor:
    """Child sequence ``F'`` with ``F'[t] = α_t·F[t] + (1 - α_t)·F[t+1]``."""
    return _mix_rows(features, alphas, "mix_adjacent")


def mix_predictions(probs: Tensor, alphas: np.ndarray) -> Tensor:
    """Mixed targets ``P̂[t] = α_t·P[t] + (1 - α_t)·P[t+1]``; gradients reach ``P``."""
    return _mix_rows(probs, alphas, "mix_predictions")


@dataclasses.dataclass(frozen=True)
class MixPlan:
    """
    :ivar alphas: the ``T - 1`` mixing weights.
    :ivar gamma: Beta shape parameter they were drawn with.
    :ivar child: the child sequence ``F'``.
    """

    alphas: np.ndarray
    gamma: float
    child: Tensor


def make_mix_plan(features: Tensor, gamma: float, seed: SeedLike) -> MixPlan:
    alphas = sample_alphas(features.rows, gamma, seed)
    return MixPlan(alphas=alphas, gamma=gamma, child=mix_adjacent(features, alphas))
