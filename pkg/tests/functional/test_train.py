# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

import math

import numpy as np
import pytest
import pytest_asyncio

import neighbormix.app_context as ap
from neighbormix.autodiff import tensor
from neighbormix.model import ModelParams
from neighbormix.schemas.context import LibContext
from neighbormix.schemas.experiment import (
    EvalConfig,
    GeneratorConfig,
    InferConfig,
    LossWeights,
    ModelConfig,
    TrainConfig,
)
from neighbormix.synthdata import Dataset, generate_split
from neighbormix.train import (
    SGD,
    TOY_MODEL,
    Adam,
    NonFiniteLossError,
    TrainLog,
    gradcheck_mode,
    toy_video,
    train,
)

TINY_DATA = GeneratorConfig(
    num_classes=2,
    feature_dim=6,
    min_snippets=16,
    max_snippets=20,
    max_actions=1,
    crossfade=1,
    train_videos=4,
    test_videos=2,
)
TINY_MODEL = ModelConfig(embed_dim=6, proj_dim=3)
ZERO = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)


def _param(values):
    return tensor(values, requires_grad=True)


@pytest_asyncio.fixture
async def tiny_train():
    return await generate_split(TINY_DATA, 3, "train")


@pytest_asyncio.fixture
async def tiny_test():
    return await generate_split(TINY_DATA, 3, "test")


def test_sgd_step():
    params = ModelParams({"w": _param([[1.0, -1.0]])})
    SGD(params, 0.5).step({"w": np.array([[2.0, 2.0]])})
    np.testing.assert_array_equal(params["w"].data, [[0.0, -2.0]])


def test_sgd_weight_decay():
    params = ModelParams({"w": _param([[1.0]])})
    SGD(params, 0.1, weight_decay=1.0).step({"w": np.array([[0.0]])})
    assert params["w"].data[0, 0] == pytest.approx(0.9)


def test_adam_first_step_moves_by_lr():
    params = ModelParams({"w": _param([[1.0, 1.0]])})
    Adam(params, 0.01).step({"w": np.array([[3.0, -0.5]])})
    np.testing.assert_allclose(params["w"].data, [[0.99, 1.01]], rtol=1e-6)


def test_train_log_csv():
    log = TrainLog()
    terms = {"base": 1.0, "cls_prime": 0.5, "cons": 0.25, "cont": 0.0, "cont_prime": 0.0}
    log.add_epoch(1, {**terms, "total": 1.75})
    assert log.to_csv().splitlines() == [
        "epoch,term,value",
        "1,base,1",
        "1,cls_prime,0.5",
        "1,cons,0.25",
        "1,cont,0",
        "1,cont_prime,0",
        "1,total,1.75",
    ]
    with pytest.raises(ValueError):
        log.add_epoch(1, {**terms, "total": 1.75})


@pytest.mark.asyncio
async def test_zero_weights_recover_the_baseline(tiny_train):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=1)
    mixed = await train(tiny_train, cfg, ZERO, TINY_MODEL)
    plain = await train(tiny_train, cfg.model_copy(update={"c3bn": False}), ZERO, TINY_MODEL)
    assert mixed.model.params.equals(plain.model.params)
    assert mixed.log.to_csv() == plain.log.to_csv()


@pytest.mark.asyncio
async def test_loss_decreases(tiny_train):
    two = Dataset(
        split="train",
        num_classes=tiny_train.num_classes,
        feature_dim=tiny_train.feature_dim,
        snippet_duration=tiny_train.snippet_duration,
        seed=tiny_train.seed,
        videos=tiny_train.videos[:2],
    )
    cfg = TrainConfig(epochs=3, batch_size=2, lr=0.01, c3bn=False)
    result = await train(two, cfg, LossWeights(), TINY_MODEL)
    assert len(result.step_losses) == 3
    assert result.step_losses[2] < result.step_losses[0]


@pytest.mark.parametrize("baseline", ["mil", "attention"])
@pytest.mark.asyncio
async def test_training_is_deterministic(tiny_train, baseline):
    model_cfg = TINY_MODEL.model_copy(update={"baseline": baseline})
    cfg = TrainConfig(epochs=2, batch_size=3, seed=2)
    with ap.lib_context(LibContext(thread_max=4)):
        threaded = await train(tiny_train, cfg, LossWeights(), model_cfg)
    with ap.lib_context(LibContext(thread_max=1)):
        inline = await train(tiny_train, cfg, LossWeights(), model_cfg)
    again = await train(tiny_train, cfg, LossWeights(), model_cfg)
    assert threaded.model.params.equals(inline.model.params)
    assert threaded.log.to_csv() == inline.log.to_csv() == again.log.to_csv()
    assert threaded.step_losses == inline.step_losses


@pytest.mark.asyncio
async def test_logged_terms_add_up(tiny_train):
    weights = LossWeights(lambda1=0.5, lambda2=2.0, lambda3=0.2)
    result = await train(tiny_train, TrainConfig(epochs=2, seed=4), weights, TINY_MODEL)
    assert [epoch for epoch, _ in result.log.epochs] == [1, 2]
    for _, means in result.log.epochs:
        expected = (
            means["base"]
            + 0.5 * means["cls_prime"]
            + 2.0 * means["cons"]
            + 0.2 * (means["cont"] + means["cont_prime"])
        )
        assert means["total"] == pytest.approx(expected)
        assert means["cont"] > 0


@pytest.mark.asyncio
async def test_evaluation_snapshots(tiny_train, tiny_test):
    cfg = TrainConfig(epochs=2, seed=5, eval_every=1)
    epochs_seen = []

    async def on_epoch(epoch, model):
        epochs_seen.append(epoch)

    result = await train(
        tiny_train,
        cfg,
        LossWeights(),
        TINY_MODEL,
        eval_dataset=tiny_test,
        infer_cfg=InferConfig(),
        eval_cfg=EvalConfig(),
        on_epoch=on_epoch,
    )
    assert epochs_seen == [1, 2]
    assert [snapshot.epoch for snapshot in result.log.snapshots] == [1, 2]
    for snapshot in result.log.snapshots:
        assert 0.0 <= snapshot.avg_map <= 1.0
        assert 0.0 <= snapshot.entropy <= 1 / math.e
    assert "2,eval_avg_map," in result.log.to_csv()


@pytest.mark.asyncio
async def test_non_finite_loss(tiny_train):
    cfg = TrainConfig(epochs=1, batch_size=1, lr=math.inf, optimizer="sgd", c3bn=False)
    with pytest.raises(NonFiniteLossError) as exc:
        await train(tiny_train, cfg, LossWeights(), TINY_MODEL)
    assert exc.value.video_id.startswith("train-")


@pytest.mark.parametrize("baseline", ["mil", "attention"])
@pytest.mark.asyncio
async def test_parameters_stay_finite_over_a_long_run(baseline):
    video = toy_video(seed=7, length=12)
    dataset = Dataset(
        split="train",
        num_classes=video.label.shape[0],
        feature_dim=video.features.shape[1],
        snippet_duration=video.snippet_duration,
        seed=7,
        videos=(video,),
    )
    cfg = TrainConfig(epochs=200, batch_size=1, lr=0.01, seed=7)
    result = await train(
        dataset, cfg, LossWeights(), TOY_MODEL.model_copy(update={"baseline": baseline})
    )
    assert len(result.step_losses) == 200
    assert all(math.isfinite(loss) for loss in result.step_losses)
    for name, param in result.model.params.items():
        assert np.isfinite(param.data).all(), name


@pytest.mark.parametrize("baseline", ["mil", "attention"])
@pytest.mark.parametrize("cons_space", ["probs", "logits"])
def test_gradcheck_passes(baseline, cons_space):
    report = gradcheck_mode(
        toy_video(),
        TOY_MODEL.model_copy(update={"baseline": baseline}),
        LossWeights(),
        cons_space=cons_space,
    )
    assert report.passed, report.format()
    assert {check.name for check in report.params} >= {"embed1.kernel", "projection.weight"}


def test_gradcheck_catches_a_wrong_gradient():
    report = gradcheck_mode(
        toy_video(), TOY_MODEL, LossWeights(), perturb="classifier.weight"
    )
    assert not report.passed
    failing = [check.name for check in report.params if check.failures]
    assert failing == ["classifier.weight"]


def test_gradcheck_unknown_parameter():
    with pytest.raises(KeyError):
        gradcheck_mode(toy_video(), TOY_MODEL, LossWeights(), perturb="nope")
