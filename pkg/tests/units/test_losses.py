# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

import math

import numpy as np
import pytest

import neighbormix.autodiff as ad
from neighbormix.augment import sample_alphas
from neighbormix.losses import (
    LossComponents,
    LossInputError,
    attention_pool,
    base_loss,
    contrastive_loss,
    prediction_consistency_loss,
    reverse_contrastive_loss,
    topk_k,
    topk_pool,
    total_loss,
    video_cls_loss,
    video_objective,
)
from neighbormix.model import Model, ModelSpec
from neighbormix.schemas.experiment import LossWeights, ModelConfig


def _unit_rows(rng, rows, cols):
    z = rng.normal(size=(rows, cols))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.mark.parametrize(
    "length, divisor, expected",
    [
        (3, 8, 1),
        (8, 8, 1),
        (17, 8, 2),
        (64, 8, 8),
        (10, 1, 10),
    ],
)
def test_topk_k(length, divisor, expected):
    assert topk_k(length, divisor) == expected


def test_topk_pool_example():
    pooled = topk_pool(ad.tensor([[1.0], [3.0], [2.0]]), k=2)
    assert pooled.item() == pytest.approx(2.5)


def test_topk_pool_gradient_reaches_k_entries():
    rng = np.random.default_rng(0)
    logits = ad.tensor(rng.normal(size=(16, 3)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(topk_pool(logits, 8))
    (grad,) = tape.gradient(loss, [logits])
    np.testing.assert_array_equal((grad != 0).sum(axis=0), [2, 2, 2])
    np.testing.assert_allclose(grad[grad != 0], 0.5)


def test_topk_pool_ties_prefer_earlier_snippets():
    logits = ad.tensor([[1.0], [1.0], [1.0]], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(topk_pool(logits, k=1))
    (grad,) = tape.gradient(loss, [logits])
    np.testing.assert_array_equal(grad[:, 0], [1.0, 0.0, 0.0])


def test_attention_pool_is_a_distribution():
    rng = np.random.default_rng(1)
    probs = ad.softmax_rows(ad.tensor(rng.normal(size=(6, 4))))
    attention = ad.sigmoid(ad.tensor(rng.normal(size=(6, 1))))
    pooled = attention_pool(probs, attention)
    assert pooled.shape == (1, 4)
    assert pooled.data.sum() == pytest.approx(1.0)


def test_attention_pool_gradient():
    rng = np.random.default_rng(2)
    logits = ad.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    gate = ad.tensor(rng.normal(size=(5, 1)), requires_grad=True)

    def loss():
        pooled = attention_pool(ad.softmax_rows(logits), ad.sigmoid(gate))
        return ad.sum_all(ad.mul(pooled, ad.constant([[1.0, -2.0, 0.5]])))

    report = ad.finite_difference_check(loss, {"logits": logits, "gate": gate})
    assert report.passed, report.format()


def test_video_cls_loss_example():
    loss = video_cls_loss(ad.tensor([[0.5, 0.5]]), np.array([1.0, 0.0]))
    assert loss.item() == pytest.approx(0.5 * math.log(2), abs=1e-4)
    assert loss.item() == pytest.approx(0.3466, abs=1e-4)


def test_video_cls_loss_normalizes_multi_hot_labels():
    pooled = ad.tensor([[0.25, 0.25, 0.5]])
    loss = video_cls_loss(pooled, np.array([1.0, 0.0, 1.0]))
    expected = -(0.5 * math.log(0.25) + 0.5 * math.log(0.5)) / 3
    assert loss.item() == pytest.approx(expected)


def test_video_cls_loss_rejects_empty_label():
    with pytest.raises(LossInputError):
        video_cls_loss(ad.tensor([[0.5, 0.5]]), np.array([0.0, 0.0]))


def test_video_cls_loss_floors_zero_probability():
    loss = video_cls_loss(ad.tensor([[0.0, 1.0]]), np.array([1.0, 0.0]))
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(-math.log(1e-12) / 2)


def test_prediction_consistency_example():
    loss = prediction_consistency_loss(ad.tensor([[1.0, 0.0]]), ad.tensor([[0.0, 1.0]]))
    assert loss.item() == pytest.approx(2.0)


def test_prediction_consistency_zero_for_matching_predictions():
    probs = ad.tensor([[0.25, 0.75], [0.6, 0.4]])
    assert prediction_consistency_loss(probs, probs).item() == 0.0


def test_prediction_consistency_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        prediction_consistency_loss(ad.tensor(np.zeros((2, 2))), ad.tensor(np.zeros((3, 2))))


def test_contrastive_example():
    parents = ad.tensor([[1.0, 0.0], [0.0, 1.0]])
    children = ad.tensor([[1.0, 0.0]])
    loss = contrastive_loss(children, parents, np.array([1.0]), 0.1)
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-10)), rel=1e-6)
    assert loss.item() == pytest.approx(4.54e-5, rel=1e-2)


def test_reverse_contrastive_with_one_child_is_zero():
    parents = ad.tensor([[1.0, 0.0], [0.0, 1.0]])
    children = ad.tensor([[1.0, 0.0]])
    loss = reverse_contrastive_loss(parents, children, np.array([0.5]), 0.1)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("length", [3, 6])
def test_contrastive_identical_keys(length):
    rng = np.random.default_rng(length)
    alphas = sample_alphas(length, 2.0, length)
    same = np.tile([0.6, 0.8], (length, 1))
    children = ad.tensor(_unit_rows(rng, length - 1, 2))
    loss = contrastive_loss(children, ad.tensor(same), alphas, 0.1)
    assert loss.item() == pytest.approx(math.log(length))

    parents = ad.tensor(_unit_rows(rng, length, 2))
    reverse = reverse_contrastive_loss(parents, ad.tensor(same[:-1]), alphas, 0.1)
    assert reverse.item() == pytest.approx(math.log(length - 1))


def test_contrastive_invariant_under_rotation():
    rng = np.random.default_rng(5)
    parents = _unit_rows(rng, 6, 4)
    children = _unit_rows(rng, 5, 4)
    alphas = sample_alphas(6, 2.0, 5)
    rotation, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    for loss_fn in (contrastive_loss, reverse_contrastive_loss):
        if loss_fn is contrastive_loss:
            plain = loss_fn(ad.tensor(children), ad.tensor(parents), alphas, 0.1)
            rotated = loss_fn(
                ad.tensor(children @ rotation), ad.tensor(parents @ rotation), alphas, 0.1
            )
        else:
            plain = loss_fn(ad.tensor(parents), ad.tensor(children), alphas, 0.1)
            rotated = loss_fn(
                ad.tensor(parents @ rotation), ad.tensor(children @ rotation), alphas, 0.1
            )
        assert abs(plain.item() - rotated.item()) <= 1e-9


def test_contrastive_rejects_non_unit_rows():
    parents = ad.tensor([[2.0, 0.0], [0.0, 1.0]])
    children = ad.tensor([[1.0, 0.0]])
    with pytest.raises(LossInputError, match="unit norm"):
        contrastive_loss(children, parents, np.array([0.5]), 0.1)
    with pytest.raises(LossInputError, match="unit norm"):
        reverse_contrastive_loss(parents, children, np.array([0.5]), 0.1)


def test_contrastive_accepts_zero_rows():
    parents = ad.tensor([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    children = ad.tensor([[0.0, 0.0], [0.6, 0.8]])
    loss = contrastive_loss(children, parents, np.array([0.5, 0.5]), 0.1)
    assert math.isfinite(loss.item())


def test_contrastive_shape_mismatch():
    parents = ad.tensor(_unit_rows(np.random.default_rng(0), 4, 2))
    with pytest.raises(ad.ShapeError):
        contrastive_loss(parents, parents, np.full(3, 0.5), 0.1)


def test_contrastive_gradients():
    rng = np.random.default_rng(6)
    raw_parents = ad.tensor(rng.normal(size=(5, 3)), requires_grad=True)
    raw_children = ad.tensor(rng.normal(size=(4, 3)), requires_grad=True)
    alphas = sample_alphas(5, 2.0, 6)

    def loss():
        parents = ad.l2_normalize_rows(raw_parents)
        children = ad.l2_normalize_rows(raw_children)
        return ad.add(
            contrastive_loss(children, parents, alphas, 0.5),
            reverse_contrastive_loss(parents, children, alphas, 0.5),
        )

    report = ad.finite_difference_check(
        loss, {"parents": raw_parents, "children": raw_children}
    )
    assert report.passed, report.format()


def test_total_loss_combines_terms():
    components = LossComponents(
        base=ad.tensor(1.0),
        cls_prime=ad.tensor(2.0),
        cons=ad.tensor(3.0),
        cont=ad.tensor(4.0),
        cont_prime=ad.tensor(5.0),
    )
    weights = LossWeights(lambda1=0.5, lambda2=2.0, lambda3=0.1)
    report = total_loss(components, weights)
    assert report.total == pytest.approx(1.0 + 1.0 + 6.0 + 0.9)
    assert report.terms()["cons"] == 3.0
    assert report.total_tensor.item() == report.total


def test_total_loss_is_linear_in_the_weights():
    components = LossComponents(
        base=ad.tensor(0.7), cls_prime=ad.tensor(0.2), cons=ad.tensor(0.3), cont=ad.tensor(1.1)
    )
    low = total_loss(components, LossWeights(lambda1=1.0, lambda2=1.0, lambda3=1.0))
    high = total_loss(components, LossWeights(lambda1=2.0, lambda2=2.0, lambda3=2.0))
    assert high.total - 0.7 == pytest.approx(2 * (low.total - 0.7))
    assert low.cont_prime == 0.0


def test_total_loss_base_only():
    report = total_loss(LossComponents(base=ad.tensor(0.42)), LossWeights())
    assert report.total == 0.42
    assert report.cls_prime == report.cons == report.cont == report.cont_prime == 0.0


@pytest.fixture(params=["mil", "attention"])
def small_model(request):
    spec = ModelSpec(
        feature_dim=8,
        num_classes=3,
        config=ModelConfig(baseline=request.param, embed_dim=8, proj_dim=4),
    )
    return Model.initialize(spec, 0)


def test_base_loss_is_finite(small_model):
    features = ad.tensor(np.random.default_rng(7).normal(size=(10, 8)))
    tcas = small_model.forward(features).tcas
    loss = base_loss(tcas, np.array([1.0, 0.0, 1.0]))
    assert math.isfinite(loss.item())
    assert loss.item() > 0


def test_video_objective_zero_weights_is_baseline(small_model):
    features = ad.tensor(np.random.default_rng(8).normal(size=(10, 8)))
    label = np.array([0.0, 1.0, 0.0])
    zero = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    mixed = video_objective(small_model, features, label, zero, alphas=sample_alphas(10, 2.0, 8))
    plain = video_objective(small_model, features, label, zero)
    assert mixed.total == plain.total
    assert mixed.total == mixed.base
    assert mixed.cls_prime == mixed.cons == mixed.cont == mixed.cont_prime == 0.0


def test_video_objective_selected_terms(small_model):
    features = ad.tensor(np.random.default_rng(9).normal(size=(10, 8)))
    label = np.array([1.0, 0.0, 0.0])
    report = video_objective(
        small_model,
        features,
        label,
        LossWeights(),
        alphas=sample_alphas(10, 2.0, 9),
        terms=("cons",),
    )
    assert report.cons > 0
    assert report.cls_prime == report.cont == report.cont_prime == 0.0
    assert report.total == pytest.approx(report.base + 10.0 * report.cons)


def test_video_objective_all_terms(small_model):
    features = ad.tensor(np.random.default_rng(10).normal(size=(12, 8)))
    report = video_objective(
        small_model,
        features,
        np.array([1.0, 1.0, 0.0]),
        LossWeights(),
        alphas=sample_alphas(12, 2.0, 10),
    )
    for value in report.terms().values():
        assert math.isfinite(value)
    assert report.cont > 0
    assert report.cont_prime > 0


@pytest.mark.parametrize("seed", range(5))
def test_prediction_consistency_vanishes_for_a_row_wise_affine_model(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(
        feature_dim=5,
        num_classes=3,
        config=ModelConfig(kernel_width=1, embed_dim=5, proj_dim=2),
    )
    model = Model.initialize(spec, seed)
    model.params["embed1.kernel"].data[:] = np.eye(5)
    model.params["embed2.kernel"].data[:] = np.eye(5)
    model.params["classifier.weight"].data[:] = rng.normal(size=(5, 3))
    model.params["classifier.bias"].data[:] = rng.normal(size=(1, 3))
    # non-negative features pass both ReLUs unchanged
    features = ad.tensor(rng.uniform(0.0, 2.0, size=(14, 5)))
    label = np.array([0.0, 1.0, 0.0])
    alphas = sample_alphas(14, 2.0, seed)

    logits = video_objective(
        model, features, label, LossWeights(), alphas=alphas, terms=("cons",), cons_space="logits"
    )
    assert logits.cons == pytest.approx(0.0, abs=1e-24)

    probs = video_objective(
        model, features, label, LossWeights(), alphas=alphas, terms=("cons",)
    )
    assert probs.cons > logits.cons
