# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Training objectives.

For one video with snippet features ``F`` and mixing weights ``α`` the objective is::

    total = base + lambda1 * cls_prime + lambda2 * cons + lambda3 * (cont + cont_prime)

``base`` is the video classification loss of the baseline, ``cls_prime`` the same loss on the
child sequence, ``cons`` the squared distance between child predictions and mixed parent
predictions, and ``cont``/``cont_prime`` soft contrastive losses between child and parent
projections in both directions.  A term whose weight is zero, or which is switched off, is not
computed at all, so the objective with all weights zero is exactly the baseline objective.
"""

from __future__ import annotations

import dataclasses
import typing as t
from collections.abc import Collection

import numpy as np

from . import autodiff as ad
from .augment import mix_adjacent, mix_predictions
from .autodiff import ShapeError, Tensor
from .logging import log
from .model import TCAS, Model
from .schemas.experiment import TERM_NAMES, LossWeights

mlog = log.fields(mod=__name__)

#: Lower clamp of probabilities inside the classification loss.
PROB_FLOOR = 1e-12

#: Allowed deviation of a projection row's norm from 1.
UNIT_NORM_TOLERANCE = 1e-6


class LossInputError(ValueError):
    """Inputs a loss is not defined for, such as a label without positive classes."""


#
# Pooling
#


def topk_k(length: int, divisor: int) -> int:
    return max(1, length // divisor)


def topk_pool(logits: Tensor, divisor: int = 8, *, k: int | None = None) -> Tensor:
    """
    Mean of the ``k`` largest entries of every column, ``k = max(1, T // divisor)``.

    Ties are broken towards the lower time index; the gradient reaches exactly the ``k`` selected
    entries of each column with weight ``1/k``.
    """
    length = logits.rows
    if k is None:
        k = topk_k(length, divisor)
    k = min(max(1, k), length)
    order = np.argsort(-logits.data, axis=0, kind="stable")[:k]
    columns = np.arange(logits.cols)
    selected = logits.data[order, columns]
    value = selected.mean(axis=0, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(logits.data)
        grad[order, columns] = np.broadcast_to(g / k, (k, logits.cols))
        return (grad,)

    return ad.op_result(value, (logits,), backward)


def attention_pool(probs: Tensor, attention: Tensor) -> Tensor:
    """``Σ_t λ_t p_t / Σ_t λ_t`` as a ``1 x C_out`` row."""
    if attention.shape != (probs.rows, 1):
        raise ShapeError(
            f"attention_pool: attention must be {probs.rows}x1, got {attention.shape}"
        )
    weights = attention.data
    total = float(weights.sum())
    assert total >= 1e-12, "attention weights come from a sigmoid and cannot vanish"
    pooled = (weights.T @ probs.data) / total

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_probs = weights @ g / total
        grad_attention = (probs.data @ g.T - float((pooled * g).sum())) / total
        return grad_probs, grad_attention

    return ad.op_result(pooled, (probs, attention), backward)


def video_probs(tcas: TCAS, divisor: int = 8) -> Tensor:
    """
    Video-level class probabilities: the softmax of the top-k pooled logits for the MIL baseline,
    the attention-pooled snippet probabilities for the attention baseline.
    """
    if tcas.attention is None:
        return ad.softmax_rows(topk_pool(tcas.logits, divisor))
    return attention_pool(tcas.probs, tcas.attention)


#
# Classification
#


def video_cls_loss(pooled: Tensor, label: np.ndarray) -> Tensor:
    """
    ``-(1/C_out) Σ_c ỹ_c log max(p̄_c, 1e-12)`` with ``ỹ = y / Σ y``.

    :arg pooled: ``1 x C_out`` video-level distribution.
    :arg label: Length ``C_out`` multi-hot target.
    :raises LossInputError: if ``label`` has no positive entry.
    """
    label = np.asarray(label, dtype=np.float64).reshape(1, -1)
    if label.shape != pooled.shape:
        raise ShapeError(f"video_cls_loss: label {label.shape} vs prediction {pooled.shape}")
    mass = label.sum()
    if not mass > 0:
        raise LossInputError("the video label has no positive class")
    weights = ad.constant(label / mass)
    return ad.scale(ad.sum_all(ad.mul(weights, ad.log(pooled, PROB_FLOOR))), -1.0 / label.size)


def _extend_label(label: np.ndarray, background: float) -> np.ndarray:
    return np.append(np.asarray(label, dtype=np.float64), background)


def base_loss(tcas: TCAS, label: np.ndarray, divisor: int = 8) -> Tensor:
    """
    Video classification loss of the baseline.

    MIL: ``video_cls_loss(softmax(topk_pool(S)), y)``.  Attention: the mean-pooled probabilities
    against ``y`` plus background, and the attention-pooled probabilities against ``y`` without
    background, with equal weight.

    :arg label: Multi-hot over the ``C`` action classes.
    """
    if tcas.attention is None:
        return video_cls_loss(video_probs(tcas, divisor), label)
    suppressed = video_cls_loss(ad.mean_rows(tcas.probs), _extend_label(label, 1.0))
    attended = video_cls_loss(
        attention_pool(tcas.probs, tcas.attention), _extend_label(label, 0.0)
    )
    return ad.add(suppressed, attended)


def macro_consistency_loss(child_tcas: TCAS, label: np.ndarray, divisor: int = 8) -> Tensor:
    """The baseline classification loss on the child sequence, with the parent's label."""
    return base_loss(child_tcas, label, divisor)


#
# Consistency
#


def prediction_consistency_loss(child_preds: Tensor, mixed_preds: Tensor) -> Tensor:
    """``(1/(T-1)) Σ_t ‖p'_t - p̂_t‖²``; gradients flow into both arguments."""
    if child_preds.shape != mixed_preds.shape:
        raise ShapeError(
            f"prediction_consistency_loss: {child_preds.shape} vs {mixed_preds.shape}"
        )
    return ad.mse(child_preds, mixed_preds)


def _check_unit_rows(z: Tensor, what: str) -> None:
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    # all-zero rows are what l2_normalize_rows leaves of a degenerate row; it already warned
    norms = norms[norms >= UNIT_NORM_TOLERANCE]
    if norms.size == 0:
        return
    worst = float(np.abs(norms - 1.0).max())
    if worst > UNIT_NORM_TOLERANCE:
        raise LossInputError(f"{what} rows must have unit norm (deviation {worst:.3g})")


def _weighted_log_likelihood(
    queries: Tensor, keys: Tensor, weights: np.ndarray, rho: float
) -> Tensor:
    # -(1/queries) Σ_{q,k} W[q,k] log softmax_k(z_q·z_k / rho)
    similarity = ad.scale(ad.matmul(queries, ad.transpose(keys)), 1.0 / rho)
    log_probs = ad.log_softmax_rows(similarity)
    return ad.scale(
        ad.sum_all(ad.mul(ad.constant(weights), log_probs)), -1.0 / queries.rows
    )


def _check_contrastive_shapes(
    children: Tensor, parents: Tensor, alphas: np.ndarray, rho: float
) -> None:
    if not rho > 0:
        raise LossInputError(f"temperature must be positive, got {rho}")
    if children.rows != parents.rows - 1 or children.cols != parents.cols:
        raise ShapeError(
            f"child projections {children.shape} do not fit parent projections {parents.shape}"
        )
    if alphas.shape != (children.rows,):
        raise ShapeError(f"{children.rows} child snippets need as many weights, got {alphas.shape}")
    _check_unit_rows(children, "child projection")
    _check_unit_rows(parents, "parent projection")


def contrastive_loss(
    child_z: Tensor, parent_z: Tensor, alphas: np.ndarray, rho: float
) -> Tensor:
    """
    Children as queries over all ``T`` parent keys.  Child ``t`` has the positive keys parent
    ``t`` with weight ``α_t`` and parent ``t + 1`` with weight ``1 - α_t``.

    :raises LossInputError: if a row is not unit norm.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    _check_contrastive_shapes(child_z, parent_z, alphas, rho)
    count = child_z.rows
    weights = np.zeros((count, parent_z.rows))
    index = np.arange(count)
    weights[index, index] = alphas
    weights[index, index + 1] = 1.0 - alphas
    return _weighted_log_likelihood(child_z, parent_z, weights, rho)


def reverse_contrastive_loss(
    parent_z: Tensor, child_z: Tensor, alphas: np.ndarray, rho: float
) -> Tensor:
    """
    Parents as queries over all ``T - 1`` child keys.  Parent ``t`` has the positive keys child
    ``t - 1`` with weight ``1 - α_{t-1}`` and child ``t`` with weight ``α_t``; the first and last
    parent have one of them only.  Each parent's weights are divided by their sum, and the result
    is averaged over the ``T`` parents.

    :raises LossInputError: if a row is not unit norm.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    _check_contrastive_shapes(child_z, parent_z, alphas, rho)
    count = child_z.rows
    weights = np.zeros((parent_z.rows, count))
    index = np.arange(count)
    weights[index, index] = alphas
    weights[index + 1, index] += 1.0 - alphas
    sums = weights.sum(axis=1, keepdims=True)
    weights = weights / np.where(sums > 0, sums, 1.0)
    return _weighted_log_likelihood(parent_z, child_z, weights, rho)


#
# Total
#


@dataclasses.dataclass(frozen=True)
class LossReport:
    """
    Term values of one objective evaluation.  Terms which were not computed are 0.

    :ivar total_tensor: the differentiable total, for backpropagation.
    """

    base: float
    cls_prime: float
    cons: float
    cont: float
    cont_prime: float
    total: float
    total_tensor: Tensor = dataclasses.field(repr=False, compare=False)

    def terms(self) -> dict[str, float]:
        return {
            "base": self.base,
            "cls_prime": self.cls_prime,
            "cons": self.cons,
            "cont": self.cont,
            "cont_prime": self.cont_prime,
            "total": self.total,
        }


@dataclasses.dataclass(frozen=True)
class LossComponents:
    """Differentiable terms; None marks a term that was not computed."""

    base: Tensor
    cls_prime: Tensor | None = None
    cons: Tensor | None = None
    cont: Tensor | None = None
    cont_prime: Tensor | None = None


def total_loss(components: LossComponents, weights: LossWeights) -> LossReport:
    """
    ``base + lambda1 * cls_prime + lambda2 * cons + lambda3 * (cont + cont_prime)``.

    Missing terms and terms with weight zero are left out of the sum.
    """
    total = components.base
    for term, factor in (
        (components.cls_prime, weights.lambda1),
        (components.cons, weights.lambda2),
        (components.cont, weights.lambda3),
        (components.cont_prime, weights.lambda3),
    ):
        if term is not None and factor != 0:
            total = ad.add(total, ad.scale(term, factor))

    def value(term: Tensor | None) -> float:
        return 0.0 if term is None else term.item()

    return LossReport(
        base=value(components.base),
        cls_prime=value(components.cls_prime),
        cons=value(components.cons),
        cont=value(components.cont),
        cont_prime=value(components.cont_prime),
        total=total.item(),
        total_tensor=total,
    )


def video_objective(
    model: Model,
    features: Tensor,
    label: np.ndarray,
    weights: LossWeights,
    *,
    alphas: np.ndarray | None = None,
    terms: Collection[str] = TERM_NAMES,
    cons_space: t.Literal["probs", "logits"] = "probs",
) -> LossReport:
    """
    Evaluate the objective for one video.

    :arg alphas: Mixing weights.  None evaluates the baseline objective only.
    :arg terms: The consistency terms to compute.
    :arg cons_space: Compare probabilities (``probs``) or logits (``logits``) in ``cons``.
    """
    enabled = {
        "cls_prime": weights.lambda1 != 0,
        "cons": weights.lambda2 != 0,
        "cont": weights.lambda3 != 0,
        "cont_prime": weights.lambda3 != 0,
    }
    wanted = {
        name for name in TERM_NAMES if alphas is not None and name in terms and enabled[name]
    }
    needs_projection = bool(wanted & {"cont", "cont_prime"})

    parent = model.forward(features, with_projection=needs_projection)
    base = base_loss(parent.tcas, label, weights.topk_divisor)
    if not wanted:
        return total_loss(LossComponents(base=base), weights)

    assert alphas is not None
    child = model.forward(mix_adjacent(features, alphas), with_projection=needs_projection)
    components: dict[str, Tensor] = {}
    if "cls_prime" in wanted:
        components["cls_prime"] = macro_consistency_loss(
            child.tcas, label, weights.topk_divisor
        )
    if "cons" in wanted:
        if cons_space == "logits":
            child_preds, parent_preds = child.tcas.logits, parent.tcas.logits
        else:
            child_preds, parent_preds = child.tcas.probs, parent.tcas.probs
        components["cons"] = prediction_consistency_loss(
            child_preds, mix_predictions(parent_preds, alphas)
        )
    if needs_projection:
        assert parent.projection is not None and child.projection is not None
        if "cont" in wanted:
            components["cont"] = contrastive_loss(
                child.projection, parent.projection, alphas, weights.rho
            )
        if "cont_prime" in wanted:
            components["cont_prime"] = reverse_contrastive_loss(
                parent.projection, child.projection, alphas, weights.rho
            )
    return total_loss(LossComponents(base=base, **components), weights)
