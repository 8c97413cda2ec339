# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Optimization loop, optimizers, the training log and the gradient check harness."""

from __future__ import annotations

import dataclasses
import typing as t
from collections.abc import Awaitable, Callable, Collection, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .augment import mixing_rng, sample_alphas
from .autodiff import GradCheckReport, Tape, Tensor
from .evaluation import boundary_entropy, map_ladder
from .infer import run_dataset_inference
from .logging import log
from .losses import LossReport, video_objective
from .model import Model, ModelParams, ModelSpec
from .parallel import map_bounded
from .schemas.experiment import (
    TERM_NAMES,
    EvalConfig,
    InferConfig,
    LossWeights,
    ModelConfig,
    TrainConfig,
)
from .synthdata import Dataset, FeatureSequence

mlog = log.fields(mod=__name__)

_SHUFFLE_STREAM = 7
_REPORT_TERMS = ("base", "cls_prime", "cons", "cont", "cont_prime", "total")


class NonFiniteLossError(Exception):
    """A loss term, gradient or parameter became NaN or infinite."""

    def __init__(self, video_id: str, term: str) -> None:
        super().__init__(f"non-finite {term} for video {video_id}")
        self.video_id = video_id
        self.term = term


#
# Optimizers
#


class SGD:
    """Plain gradient descent with optional L2 weight decay."""

    def __init__(self, params: ModelParams, lr: float, weight_decay: float = 0.0) -> None:
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            grad = grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            param.data -= self.lr * grad


class Adam:
    """Adaptive moment estimation with bias correction and optional L2 weight decay."""

    def __init__(
        self,
        params: ModelParams,
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self._first = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._second = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for name, param in self.params.items():
            grad = grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            first = self._first[name]
            second = self._second[name]
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad * grad
            param.data -= (
                self.lr * (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            )


def make_optimizer(params: ModelParams, cfg: TrainConfig) -> SGD | Adam:
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.weight_decay)
    return Adam(params, cfg.lr, cfg.weight_decay)


#
# Training log
#


@dataclasses.dataclass(frozen=True)
class EvalSnapshot:
    epoch: int
    avg_map: float
    entropy: float


@dataclasses.dataclass
class TrainLog:
    """
    :ivar epochs: per epoch, the mean of every loss term over the epoch's videos.
    :ivar snapshots: held-out evaluation results at the configured interval.
    """

    epochs: list[tuple[int, dict[str, float]]] = dataclasses.field(default_factory=list)
    snapshots: list[EvalSnapshot] = dataclasses.field(default_factory=list)

    def add_epoch(self, epoch: int, means: dict[str, float]) -> None:
        if self.epochs and epoch <= self.epochs[-1][0]:
            raise ValueError(f"epoch {epoch} does not follow epoch {self.epochs[-1][0]}")
        self.epochs.append((epoch, means))

    def to_csv(self) -> str:
        """``epoch,term,value`` rows; evaluation snapshots use the terms ``eval_avg_map`` and
        ``eval_entropy``."""
        lines = ["epoch,term,value"]
        snapshots = {snapshot.epoch: snapshot for snapshot in self.snapshots}
        for epoch, means in self.epochs:
            for term in _REPORT_TERMS:
                lines.append(f"{epoch},{term},{means[term]:.12g}")
            if epoch in snapshots:
                lines.append(f"{epoch},eval_avg_map,{snapshots[epoch].avg_map:.12g}")
                lines.append(f"{epoch},eval_entropy,{snapshots[epoch].entropy:.12g}")
        return "\n".join(lines) + "\n"


@dataclasses.dataclass
class TrainResult:
    """
    :ivar step_losses: mean total loss of every optimizer step's batch, before the step.
    """

    model: Model
    log: TrainLog
    step_losses: list[float]


#
# Training
#


@dataclasses.dataclass(frozen=True)
class _VideoStep:
    report: LossReport
    grads: list[np.ndarray]


def _first_non_finite(report: LossReport) -> str | None:
    for term, value in report.terms().items():
        if not np.isfinite(value):
            return term
    return None


def model_spec_for(dataset: Dataset, model_cfg: ModelConfig) -> ModelSpec:
    return ModelSpec(dataset.feature_dim, dataset.num_classes, model_cfg)


def _check_dataset(dataset: Dataset) -> None:
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    for video in dataset.videos:
        if video.num_snippets < 2:
            raise ValueError(f"{video.video_id}: needs at least two snippets")


async def train(
    dataset: Dataset,
    cfg: TrainConfig,
    weights: LossWeights,
    model_cfg: ModelConfig,
    *,
    eval_dataset: Dataset | None = None,
    infer_cfg: InferConfig | None = None,
    eval_cfg: EvalConfig | None = None,
    on_epoch: Callable[[int, Model], Awaitable[None]] | None = None,
) -> TrainResult:
    """
    Train a freshly initialized model.

    Every epoch visits the videos in an order shuffled from ``(seed, epoch)``; every video draws
    its mixing weights from ``(seed, epoch, video index)``.  Videos of a batch are processed in
    helper threads and their gradients averaged in batch order, so results do not depend on the
    thread count.

    :kwarg on_epoch: Awaited after every epoch with the epoch number and the model, for
        instance to write a checkpoint.
    :raises NonFiniteLossError: naming the video and the term which stopped being finite.
    """
    flog = mlog.fields(func="train")
    flog.fields(videos=len(dataset), epochs=cfg.epochs, c3bn=cfg.c3bn).debug("Enter")
    _check_dataset(dataset)

    model = Model.initialize(model_spec_for(dataset, model_cfg), cfg.seed)
    params = model.params
    names = list(params)
    optimizer = make_optimizer(params, cfg)
    train_log = TrainLog()
    step_losses: list[float] = []
    terms: Collection[str] = cfg.terms

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, _SHUFFLE_STREAM]).permutation(
            len(dataset)
        )
        sums = dict.fromkeys(_REPORT_TERMS, 0.0)

        def video_step(index: int, epoch: int = epoch) -> _VideoStep:
            video = dataset.videos[index]
            alphas = None
            if cfg.c3bn:
                alphas = sample_alphas(
                    video.num_snippets, cfg.gamma, mixing_rng(cfg.seed, epoch, index)
                )
            with Tape() as tape:
                report = video_objective(
                    model,
                    ad.tensor(video.features),
                    video.label,
                    weights,
                    alphas=alphas,
                    terms=terms,
                    cons_space=cfg.cons_space,
                )
            bad_term = _first_non_finite(report)
            if bad_term is not None:
                raise NonFiniteLossError(video.video_id, bad_term)
            grads = tape.gradient(report.total_tensor, params.tensors())
            if not all(np.isfinite(grad).all() for grad in grads):
                raise NonFiniteLossError(video.video_id, "gradient")
            return _VideoStep(report, grads)

        for start in range(0, len(order), cfg.batch_size):
            batch = [int(index) for index in order[start : start + cfg.batch_size]]
            steps = await map_bounded(video_step, batch)
            mean_grads = {}
            for position, name in enumerate(names):
                total = np.zeros_like(params[name].data)
                for step in steps:
                    total += step.grads[position]
                mean_grads[name] = total / len(steps)
            batch_total = 0.0
            for step in steps:
                for term, value in step.report.terms().items():
                    sums[term] += value
                batch_total += step.report.total
            step_losses.append(batch_total / len(steps))
            optimizer.step(mean_grads)
            if not params.all_finite():
                raise NonFiniteLossError(dataset.videos[batch[0]].video_id, "parameters")

        means = {term: value / len(dataset) for term, value in sums.items()}
        train_log.add_epoch(epoch, means)
        flog.fields(epoch=epoch, **means).info("epoch finished")

        if cfg.eval_every and eval_dataset is not None and epoch % cfg.eval_every == 0:
            snapshot = await evaluate_snapshot(
                model,
                eval_dataset,
                infer_cfg or InferConfig(),
                eval_cfg or EvalConfig(),
                epoch,
                weights.topk_divisor,
            )
            train_log.snapshots.append(snapshot)
            flog.fields(
                epoch=epoch, avg_map=snapshot.avg_map, entropy=snapshot.entropy
            ).info("evaluation snapshot")

        if on_epoch is not None:
            await on_epoch(epoch, model)

    flog.fields(epochs=cfg.epochs).notice("training finished")
    return TrainResult(model=model, log=train_log, step_losses=step_losses)


async def evaluate_snapshot(
    model: Model,
    dataset: Dataset,
    infer_cfg: InferConfig,
    eval_cfg: EvalConfig,
    epoch: int,
    topk_divisor: int = 8,
) -> EvalSnapshot:
    results = await run_dataset_inference(model, dataset, infer_cfg, topk_divisor)
    proposals = [proposal for result in results for proposal in result.proposals]
    report = map_ladder(proposals, dataset.segments, eval_cfg.iou, dataset.num_classes)
    entropy = boundary_entropy(
        [result.probs for result in results],
        labels=[video.label for video in dataset.videos],
        restrict_to_action_classes=eval_cfg.restrict_to_action_classes,
    )
    return EvalSnapshot(epoch=epoch, avg_map=report.avg_map, entropy=entropy)


#
# Gradient check
#


def toy_video(
    seed: int = 0, length: int = 5, feature_dim: int = 8, num_classes: int = 3
) -> FeatureSequence:
    """A random short video for gradient checks, with classes 0 and 1 positive."""
    rng = np.random.default_rng([seed, length, feature_dim])
    label = np.zeros(num_classes)
    label[: min(2, num_classes)] = 1.0
    return FeatureSequence(
        video_id="toy",
        features=rng.normal(size=(length, feature_dim)),
        label=label,
        snippet_duration=1.0,
    )


#: Network shape used for gradient checks.
TOY_MODEL = ModelConfig(embed_dim=8, kernel_width=3, proj_dim=4)


def gradcheck_mode(
    video: FeatureSequence,
    model_cfg: ModelConfig,
    weights: LossWeights,
    *,
    num_classes: int | None = None,
    seed: int = 0,
    gamma: float = 2.0,
    terms: Sequence[str] = TERM_NAMES,
    cons_space: t.Literal["probs", "logits"] = "probs",
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-9,
    perturb: str | None = None,
    perturb_factor: float = 1.01,
) -> GradCheckReport:
    """
    Check the analytic gradient of the full objective for one short video against central
    differences, for every coordinate of every parameter.

    The mixing weights are drawn once and then held fixed.

    :kwarg perturb: Name of a parameter whose analytic gradient is multiplied by
        ``perturb_factor`` before the comparison.  Lets tests confirm that a wrong gradient is
        caught.
    """
    flog = mlog.fields(func="gradcheck_mode")
    if num_classes is None:
        num_classes = video.label.shape[0]
    spec = ModelSpec(video.features.shape[1], num_classes, model_cfg)
    model = Model.initialize(spec, seed)
    features = ad.tensor(video.features)
    alphas = sample_alphas(video.num_snippets, gamma, mixing_rng(seed, 0, 0))

    def loss_fn() -> Tensor:
        return video_objective(
            model,
            features,
            video.label,
            weights,
            alphas=alphas,
            terms=terms,
            cons_space=cons_space,
        ).total_tensor

    params = model.params.as_dict()
    with Tape() as tape:
        loss = loss_fn()
    analytic = dict(zip(params, tape.gradient(loss, list(params.values()))))
    if perturb is not None:
        if perturb not in analytic:
            raise KeyError(perturb)
        analytic[perturb] = analytic[perturb] * perturb_factor

    report = ad.finite_difference_check(
        loss_fn, params, eps=eps, tol=tol, atol=atol, analytic=analytic
    )
    flog.fields(passed=report.passed, max_rel_error=report.max_rel_error).info(
        "gradient check finished"
    )
    return report
