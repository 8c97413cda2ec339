# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Schemas for experiment settings.

Config files are flat (``lambda2 = 10``, ``epochs = 40``); :meth:`ExperimentConfig.from_flat`
routes every key to the section models that declare it.
"""

from __future__ import annotations

import typing as t
from collections.abc import Mapping

import pydantic as p

from .validators import convert_bool, convert_float_list, convert_none, parse_ladder

#: Names of the regularization terms which can be switched on and off individually.
TERM_NAMES: tuple[str, ...] = ("cls_prime", "cons", "cont", "cont_prime")

#: Loss-weight recipes ``(lambda1, lambda2, lambda3)`` for the baselines the method was
#: plugged into.
PRESETS: dict[str, tuple[float, float, float]] = {
    "basnet": (1.0, 10.0, 0.1),
    "facnet": (1.0, 1.0, 0.2),
    "delu": (1.0, 0.1, 0.3),
    "sfnet": (1.0, 10.0, 0.2),
    "lacp": (1.0, 2.0, 0.1),
}

DEFAULT_THRESHOLDS = "0.10:0.05:0.50"
DEFAULT_IOU_LADDER = "0.1:0.1:0.7"


class BaseModel(p.BaseModel):
    model_config = p.ConfigDict(frozen=True, extra="forbid", validate_default=True)


class GeneratorConfig(BaseModel):
    """
    Synthetic dataset layout.

    :ivar num_classes: number of action classes ``C`` (background is extra).
    :ivar feature_dim: snippet feature dimension ``D_f``.
    :ivar min_snippets: shortest video length ``T``.
    :ivar max_snippets: longest video length ``T``.
    :ivar min_actions: fewest action segments per video.
    :ivar max_actions: most action segments per video.
    :ivar crossfade: half-width ``w`` of the linear crossfade around each boundary, in snippets.
    :ivar noise: standard deviation of the additive Gaussian feature noise.
    :ivar min_segment: shortest action segment in snippets (raised to ``2w`` when smaller).
    :ivar min_gap: shortest background gap between segments in snippets (raised to ``2w``).
    :ivar train_videos: number of videos in the training split.
    :ivar test_videos: number of videos in the test split.
    :ivar snippet_duration: seconds covered by one snippet.
    """

    num_classes: int = p.Field(5, ge=2)
    feature_dim: int = p.Field(32, ge=4)
    min_snippets: int = p.Field(40, ge=2)
    max_snippets: int = p.Field(120, ge=2)
    min_actions: int = p.Field(1, ge=1)
    max_actions: int = p.Field(3, ge=1)
    crossfade: int = p.Field(3, ge=0)
    noise: float = p.Field(0.15, ge=0)
    min_segment: int = p.Field(4, ge=1)
    min_gap: int = p.Field(2, ge=1)
    train_videos: int = p.Field(60, ge=1)
    test_videos: int = p.Field(30, ge=1)
    snippet_duration: float = p.Field(0.64, gt=0)

    @p.model_validator(mode="after")
    def _ranges_are_ordered(self) -> GeneratorConfig:
        if self.max_snippets < self.min_snippets:
            raise ValueError("max_snippets must not be smaller than min_snippets")
        if self.max_actions < self.min_actions:
            raise ValueError("max_actions must not be smaller than min_actions")
        return self


class ModelConfig(BaseModel):
    """
    Network shape.  ``D_f`` and ``C`` are taken from the dataset when the model is built.

    :ivar baseline: ``mil`` (top-k pooling) or ``attention`` (attention pooling with an extra
        background class).
    :ivar embed_dim: width ``D_e`` of both temporal convolution layers.
    :ivar kernel_width: temporal kernel width ``k_w``; must be odd.
    :ivar proj_dim: projection output ``D_z``; must be smaller than ``D_f``.
    :ivar use_projection: when off, the contrastive terms use the normalized embedding directly.
    :ivar init_std: standard deviation of the Gaussian weight initialization.
    """

    baseline: t.Literal["mil", "attention"] = "mil"
    embed_dim: int = p.Field(32, ge=1)
    kernel_width: int = p.Field(3, ge=1)
    proj_dim: int = p.Field(16, ge=1)
    use_projection: bool = True
    init_std: float = p.Field(0.1, gt=0)

    # pylint: disable-next=unused-private-member
    __convert_bools = p.field_validator("use_projection", mode="before")(convert_bool)

    @p.field_validator("kernel_width")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"kernel width must be odd, got {value}")
        return value


class LossWeights(BaseModel):
    """
    :ivar lambda1: weight of the child-sequence classification loss.
    :ivar lambda2: weight of the prediction consistency loss.
    :ivar lambda3: weight of both contrastive consistency losses.
    :ivar rho: contrastive temperature.
    :ivar topk_divisor: ``r`` in ``k = max(1, T // r)``.
    :ivar preset: fills ``lambda1..3`` from :data:`PRESETS`; explicit lambdas win.
    """

    lambda1: float = p.Field(1.0, ge=0)
    lambda2: float = p.Field(10.0, ge=0)
    lambda3: float = p.Field(0.1, ge=0)
    rho: float = p.Field(0.1, gt=0)
    topk_divisor: int = p.Field(8, ge=1)
    preset: t.Optional[t.Literal["basnet", "facnet", "delu", "sfnet", "lacp"]] = None

    # pylint: disable-next=unused-private-member
    __convert_nones = p.field_validator("preset", mode="before")(convert_none)

    @p.model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: t.Any) -> t.Any:
        if not isinstance(data, Mapping):
            return data
        preset = convert_none(data.get("preset"))
        if preset not in PRESETS:
            # Unknown names are reported by the field validation.
            return data
        data = dict(data)
        for key, value in zip(("lambda1", "lambda2", "lambda3"), PRESETS[preset]):
            data.setdefault(key, value)
        return data

    @property
    def all_zero(self) -> bool:
        return self.lambda1 == 0 and self.lambda2 == 0 and self.lambda3 == 0


class TrainConfig(BaseModel):
    """
    :ivar c3bn: switches the adjacent-snippet augmentation and every consistency term.
    :ivar terms: which consistency terms are computed when ``c3bn`` is on.
    :ivar cons_space: ``probs`` compares child probabilities with mixed probabilities; ``logits``
        compares child logits with mixed logits.
    :ivar eval_every: evaluate on the held-out manifest every this many epochs (0 disables).
    """

    epochs: int = p.Field(30, ge=1)
    batch_size: int = p.Field(8, ge=1)
    lr: float = p.Field(1e-3, gt=0)
    optimizer: t.Literal["adam", "sgd"] = "adam"
    weight_decay: float = p.Field(0.0, ge=0)
    seed: int = p.Field(0, ge=0)
    gamma: float = p.Field(2.0, gt=0)
    c3bn: bool = True
    terms: tuple[t.Literal["cls_prime", "cons", "cont", "cont_prime"], ...] = TERM_NAMES
    cons_space: t.Literal["probs", "logits"] = "probs"
    eval_every: int = p.Field(0, ge=0)

    # pylint: disable-next=unused-private-member
    __convert_bools = p.field_validator("c3bn", mode="before")(convert_bool)

    @p.field_validator("terms", mode="before")
    @classmethod
    def _split_terms(cls, value: t.Any) -> t.Any:
        if isinstance(value, str):
            value = tuple(piece.strip() for piece in value.split(",") if piece.strip())
        return value


class InferConfig(BaseModel):
    """
    :ivar video_threshold: ``θ_v``; classes with a video probability at least this high are
        localized.
    :ivar thresholds: T-CAS thresholds ``Θ``, strictly increasing, each in (0, 1).
    :ivar inflation: OIC flank length as a fraction of the proposal length.
    :ivar nms_sigma: SoftNMS Gaussian width.
    :ivar nms_floor: SoftNMS drops proposals whose score, before or after decay, is below this.
    :ivar attention_modulation: attention baseline only; threshold ``λ_t·p_t`` instead of ``p_t``.
    :ivar video_score_weight: adds this multiple of the class's video probability to OIC scores.
    """

    video_threshold: float = p.Field(0.1, ge=0, le=1)
    thresholds: list[float] = p.Field(default_factory=lambda: parse_ladder(DEFAULT_THRESHOLDS))
    inflation: float = p.Field(0.25, gt=0)
    nms_sigma: float = p.Field(0.5, gt=0)
    nms_floor: float = p.Field(0.001, ge=0)
    attention_modulation: bool = True
    video_score_weight: float = 0.0

    # pylint: disable-next=unused-private-member
    __convert_lists = p.field_validator("thresholds", mode="before")(convert_float_list)
    # pylint: disable-next=unused-private-member
    __convert_bools = p.field_validator("attention_modulation", mode="before")(convert_bool)

    @p.field_validator("thresholds")
    @classmethod
    def _increasing_thresholds(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("at least one threshold is needed")
        if any(not 0 < thr < 1 for thr in value):
            raise ValueError("thresholds must lie strictly between 0 and 1")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return value


class EvalConfig(BaseModel):
    """
    :ivar iou: tIoU ladder for mAP.
    :ivar entropy: also report the boundary entropy ``H(d_t)``.
    :ivar restrict_to_action_classes: compute ``H(d_t)`` on the video's positive classes only.
    """

    iou: list[float] = p.Field(default_factory=lambda: parse_ladder(DEFAULT_IOU_LADDER))
    entropy: bool = False
    restrict_to_action_classes: bool = False

    # pylint: disable-next=unused-private-member
    __convert_lists = p.field_validator("iou", mode="before")(convert_float_list)
    # pylint: disable-next=unused-private-member
    __convert_bools = p.field_validator(
        "entropy", "restrict_to_action_classes", mode="before"
    )(convert_bool)

    @p.field_validator("iou")
    @classmethod
    def _valid_ladder(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("at least one tIoU threshold is needed")
        if any(not 0 < thr <= 1 for thr in value):
            raise ValueError("tIoU thresholds must lie in (0, 1]")
        return value


def _flat_value(value: t.Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_flat_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SECTIONS: dict[str, type[BaseModel]] = {
    "generator": GeneratorConfig,
    "model": ModelConfig,
    "weights": LossWeights,
    "train": TrainConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
}


class ExperimentConfig(BaseModel):
    """All experiment settings, grouped by the module that consumes them."""

    seed: int = p.Field(0, ge=0)
    generator: GeneratorConfig = GeneratorConfig()
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()
    infer: InferConfig = InferConfig()
    eval: EvalConfig = EvalConfig()

    @classmethod
    def known_keys(cls) -> frozenset[str]:
        keys = {"seed"}
        for section in _SECTIONS.values():
            keys.update(section.model_fields)
        return frozenset(keys)

    @classmethod
    def from_flat(cls, values: Mapping[str, t.Any]) -> ExperimentConfig:
        """
        Build from flat ``key = value`` settings.

        :raises KeyError: naming the first key which no section declares.
        :raises pydantic.ValidationError: when a value is invalid.  The error location is
            ``section -> key``.
        """
        unknown = sorted(set(values) - cls.known_keys())
        if unknown:
            raise KeyError(unknown[0])
        sections: dict[str, dict[str, t.Any]] = {name: {} for name in _SECTIONS}
        top: dict[str, t.Any] = {}
        for key, value in values.items():
            if key == "seed":
                top[key] = value
            for name, section in _SECTIONS.items():
                if key in section.model_fields:
                    sections[name][key] = value
        return cls.model_validate({**top, **sections})

    def to_flat(self) -> dict[str, str]:
        """
        Flat ``key = value`` settings which :meth:`from_flat` turns back into this config.
        """
        flat = {"seed": _flat_value(self.seed)}
        for name in _SECTIONS:
            section = getattr(self, name)
            for key in type(section).model_fields:
                flat.setdefault(key, _flat_value(getattr(section, key)))
        return flat
