# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
The localization network and its checkpoint format.

Two temporal convolutions with ReLU map snippet features ``F`` (``T x D_f``) to the embedding
``E`` (``T x D_e``).  Three heads branch from ``E``:

* the snippet classifier gives logits ``S`` and row-softmax probabilities ``P``
  (``T x C_out``; ``C_out = C`` for the MIL baseline, ``C + 1`` with a trailing background
  column for the attention baseline),
* the attention head (attention baseline only) gives foreground weights ``λ`` (``T x 1``),
* the projection head gives unit rows ``Z`` (``T x D_z``), or the normalized ``E`` itself when the
  projection head is switched off.
"""

from __future__ import annotations

import dataclasses
import struct
import typing as t
from collections.abc import Iterator

import numpy as np
import pydantic as p

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError
from .logging import log
from .schemas.experiment import ModelConfig
from .utils.io import read_bytes, write_bytes_atomic

if t.TYPE_CHECKING:
    from _typeshed import StrPath

mlog = log.fields(mod=__name__)

CHECKPOINT_MAGIC = b"C3BM"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    """A checkpoint file cannot be read or does not describe a valid model."""


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """
    Everything needed to build the parameter set.

    :ivar feature_dim: ``D_f`` of the dataset.
    :ivar num_classes: ``C`` of the dataset, without background.
    :ivar config: Network shape settings.
    """

    feature_dim: int
    num_classes: int
    config: ModelConfig

    @property
    def attention(self) -> bool:
        return self.config.baseline == "attention"

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1 if self.attention else self.num_classes

    def validate(self) -> None:
        """:raises ConfigError: for shapes the network cannot have."""
        ad.check_kernel_width(self.config.kernel_width)
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ConfigError(
                f"feature_dim and num_classes must be positive, got {self.feature_dim}"
                f" and {self.num_classes}"
            )
        if self.config.use_projection and self.config.proj_dim >= self.feature_dim:
            raise ConfigError(
                f"proj_dim ({self.config.proj_dim}) must be smaller than the feature"
                f" dimension ({self.feature_dim})"
            )

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        cfg = self.config
        width = cfg.kernel_width
        shapes = {
            "embed1.kernel": (width * self.feature_dim, cfg.embed_dim),
            "embed1.bias": (1, cfg.embed_dim),
            "embed2.kernel": (width * cfg.embed_dim, cfg.embed_dim),
            "embed2.bias": (1, cfg.embed_dim),
            "classifier.weight": (cfg.embed_dim, self.num_outputs),
            "classifier.bias": (1, self.num_outputs),
        }
        if self.attention:
            shapes["attention.weight"] = (cfg.embed_dim, 1)
            shapes["attention.bias"] = (1, 1)
        if cfg.use_projection:
            shapes["projection.weight"] = (cfg.embed_dim, cfg.proj_dim)
            shapes["projection.bias"] = (1, cfg.proj_dim)
        return shapes


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]) -> None:
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> t.ItemsView[str, Tensor]:
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def copy(self) -> ModelParams:
        return ModelParams(
            {
                name: Tensor(tensor.data.copy(), requires_grad=True, name=name)
                for name, tensor in self._tensors.items()
            }
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(tensor.data).all() for tensor in self._tensors.values())

    def equals(self, other: ModelParams) -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[name].shape == other[name].shape
            and self[name].data.tobytes() == other[name].data.tobytes()
            for name in self
        )


@dataclasses.dataclass(frozen=True)
class TCAS:
    """
    Snippet-level class activations.

    :ivar logits: ``S``, ``T x C_out``.
    :ivar probs: ``P``, the row softmax of ``S``.
    :ivar attention: ``λ``, ``T x 1`` in (0, 1); None for the MIL baseline.
    """

    logits: Tensor
    probs: Tensor
    attention: Tensor | None = None


@dataclasses.dataclass(frozen=True)
class Forward:
    embedding: Tensor
    tcas: TCAS
    projection: Tensor | None = None


class Model:
    """The network: a :class:`ModelSpec` plus its :class:`ModelParams`."""

    def __init__(self, spec: ModelSpec, params: ModelParams) -> None:
        spec.validate()
        expected = spec.param_shapes()
        if list(params) != list(expected):
            raise ConfigError(
                f"parameter names {list(params)} do not match the model {list(expected)}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.spec = spec
        self.params = params

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> Model:
        """
        Gaussian weights with standard deviation ``init_std`` and zero biases, drawn in parameter
        order from a generator seeded with ``seed``.
        """
        spec.validate()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in spec.param_shapes().items():
            if name.endswith(".bias"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, spec.config.init_std, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(spec, ModelParams(tensors))

    def embed(self, features: Tensor) -> Tensor:
        if features.cols != self.spec.feature_dim:
            raise ad.ShapeError(
                f"features have {features.cols} columns, the model expects"
                f" {self.spec.feature_dim}"
            )
        width = self.spec.config.kernel_width
        hidden = ad.relu(
            ad.temporal_conv(
                features, self.params["embed1.kernel"], self.params["embed1.bias"], width
            )
        )
        return ad.relu(
            ad.temporal_conv(
                hidden, self.params["embed2.kernel"], self.params["embed2.bias"], width
            )
        )

    def classify(self, embedding: Tensor) -> TCAS:
        logits = ad.affine(
            embedding, self.params["classifier.weight"], self.params["classifier.bias"]
        )
        attention = None
        if self.spec.attention:
            attention = ad.sigmoid(
                ad.affine(
                    embedding,
                    self.params["attention.weight"],
                    self.params["attention.bias"],
                )
            )
        return TCAS(logits=logits, probs=ad.softmax_rows(logits), attention=attention)

    def project(self, embedding: Tensor) -> Tensor:
        if not self.spec.config.use_projection:
            return ad.l2_normalize_rows(embedding)
        return ad.l2_normalize_rows(
            ad.affine(
                embedding, self.params["projection.weight"], self.params["projection.bias"]
            )
        )

    def forward(self, features: Tensor, with_projection: bool = True) -> Forward:
        embedding = self.embed(features)
        tcas = self.classify(embedding)
        projection = self.project(embedding) if with_projection else None
        return Forward(embedding=embedding, tcas=tcas, projection=projection)


#
# Checkpoints
#


class CheckpointMeta(p.BaseModel):
    model_config = p.ConfigDict(frozen=True, extra="forbid")

    feature_dim: int
    num_classes: int
    model: ModelConfig
    seed: int


def encode_checkpoint(model: Model, seed: int) -> bytes:
    """
    Serialize a model.

    Layout, all integers little-endian u32: magic ``C3BM``, version, length of the JSON metadata,
    the metadata, parameter count, then per parameter the name length, UTF-8 name, number of
    dimensions (2), each dimension, and the values as little-endian float64 in row-major order.
    """
    meta = CheckpointMeta(
        feature_dim=model.spec.feature_dim,
        num_classes=model.spec.num_classes,
        model=model.spec.config,
        seed=seed,
    ).model_dump_json()
    meta_bytes = meta.encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        _U32.pack(CHECKPOINT_VERSION),
        _U32.pack(len(meta_bytes)),
        meta_bytes,
        _U32.pack(len(model.params)),
    ]
    for name, tensor in model.params.items():
        name_bytes = name.encode("utf-8")
        chunks.append(_U32.pack(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(_U32.pack(tensor.data.ndim))
        chunks.extend(_U32.pack(dim) for dim in tensor.data.shape)
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, content: bytes, source: str) -> None:
        self.content = content
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.content):
            raise CheckpointError(f"{self.source}: checkpoint is truncated")
        chunk = self.content[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def decode_checkpoint(content: bytes, source: str = "<bytes>") -> tuple[Model, CheckpointMeta]:
    """:raises CheckpointError: if ``content`` is not a valid checkpoint."""
    reader = _Reader(content, source)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = CheckpointMeta.model_validate_json(reader.take(reader.u32()))
    except p.ValidationError as exc:
        raise CheckpointError(f"{source}: invalid checkpoint metadata: {exc}") from exc
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        if ndim != 2:
            raise CheckpointError(f"{source}: parameter {name} has {ndim} dimensions")
        shape = (reader.u32(), reader.u32())
        data = np.frombuffer(reader.take(8 * shape[0] * shape[1]), dtype="<f8")
        tensors[name] = Tensor(
            data.reshape(shape).astype(np.float64), requires_grad=True, name=name
        )
    if reader.offset != len(content):
        raise CheckpointError(f"{source}: trailing data after the last parameter")
    spec = ModelSpec(meta.feature_dim, meta.num_classes, meta.model)
    try:
        model = Model(spec, ModelParams(tensors))
    except ConfigError as exc:
        raise CheckpointError(f"{source}: {exc}") from exc
    return model, meta


async def save_checkpoint(path: StrPath, model: Model, seed: int) -> None:
    """Write a checkpoint atomically: a reader sees either the old file or the new one."""
    await write_bytes_atomic(path, encode_checkpoint(model, seed))
    mlog.fields(func="save_checkpoint", path=path).info("checkpoint written")


async def load_checkpoint(path: StrPath) -> tuple[Model, CheckpointMeta]:
    """:raises CheckpointError: if the file is missing or invalid."""
    try:
        content = await read_bytes(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(content, str(path))
