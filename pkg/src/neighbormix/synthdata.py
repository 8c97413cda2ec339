# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Synthetic untrimmed videos with smooth action boundaries.

Every class, and the background, has a unit prototype vector.  A video is a layout of action
segments separated by background; a snippet's clean feature is the prototype of the region it
belongs to, except near a boundary ``b`` (the first snippet of a new region) where snippets
``b - w .. b + w - 1`` fade linearly from the left prototype to the right one, the snippet at
``b`` being the midpoint.  Gaussian noise is added on top.

On disk a split is a JSON-lines manifest (a header record, then one record per video) next to a
``features/`` directory holding one binary file per video: the header ``<4sIII`` (magic ``C3BN``,
format version, ``T``, ``D``) followed by ``T x D`` little-endian float64 values in row-major
order.
"""

from __future__ import annotations

import asyncio
import dataclasses
import os
import struct
import typing as t
from collections.abc import Sequence

import aiofiles
import numpy as np
import pydantic as p

from .config import ConfigError
from .logging import log
from .parallel import map_bounded
from .pydantic import get_extra_field_names
from .schemas.experiment import GeneratorConfig
from .utils.hashing import sha256_digest, verify_hash
from .utils.io import read_bytes, read_file, write_file

if t.TYPE_CHECKING:
    from _typeshed import StrPath

mlog = log.fields(mod=__name__)

FEATURE_MAGIC = b"C3BN"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")
MANIFEST_VERSION = 1

#: How often an infeasible segment layout is redrawn before giving up.
MAX_LAYOUT_ATTEMPTS = 100

SPLITS = ("train", "test")
_SPLIT_STREAMS = {"train": 0, "test": 1}
_PROTOTYPE_STREAM = 2


class DatasetLoadError(Exception):
    """A manifest or feature file is missing, corrupt, or does not match its declaration."""


@dataclasses.dataclass(frozen=True)
class GroundTruthSegment:
    """An annotated action instance, in seconds.  Used for evaluation only."""

    video_id: str
    class_id: int
    t_start: float
    t_end: float


@dataclasses.dataclass(frozen=True)
class FeatureSequence:
    """
    One video.

    :ivar features: ``T x D_f`` snippet features.
    :ivar label: multi-hot over the ``C`` action classes.
    :ivar segments: ground truth, for evaluation only.
    """

    video_id: str
    features: np.ndarray
    label: np.ndarray
    snippet_duration: float
    segments: tuple[GroundTruthSegment, ...] = ()

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_duration


@dataclasses.dataclass(frozen=True)
class Dataset:
    split: str
    num_classes: int
    feature_dim: int
    snippet_duration: float
    seed: int
    videos: tuple[FeatureSequence, ...]

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def segments(self) -> list[GroundTruthSegment]:
        return [segment for video in self.videos for segment in video.segments]

    def get(self, video_id: str) -> FeatureSequence | None:
        for video in self.videos:
            if video.video_id == video_id:
                return video
        return None


#
# Generation
#


@dataclasses.dataclass(frozen=True)
class SnippetSegment:
    """An action segment in snippet indices, ``stop`` exclusive."""

    class_id: int
    start: int
    stop: int


def make_prototypes(cfg: GeneratorConfig, seed: int) -> np.ndarray:
    """
    Unit prototype vectors: rows ``0 .. C-1`` for the classes, row ``C`` for the background.
    They depend on ``seed`` only, so both splits share them.
    """
    rng = np.random.default_rng([seed, _PROTOTYPE_STREAM])
    prototypes = rng.normal(size=(cfg.num_classes + 1, cfg.feature_dim))
    return prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)


def _draw_layout(
    rng: np.random.Generator, length: int, cfg: GeneratorConfig
) -> list[SnippetSegment] | None:
    fade = cfg.crossfade
    min_len = max(cfg.min_segment, 2 * fade)
    min_gap = max(cfg.min_gap, 2 * fade)
    count = int(rng.integers(cfg.min_actions, cfg.max_actions + 1))
    fixed = 2 * fade + (count - 1) * min_gap
    upper = max(min_len, (length - fixed) // count)
    lengths = rng.integers(min_len, upper + 1, size=count)
    slack = length - fixed - int(lengths.sum())
    if slack < 0:
        return None
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    spare = np.diff(np.concatenate(([0], cuts, [slack])))
    classes = rng.integers(0, cfg.num_classes, size=count)
    segments = []
    position = fade + int(spare[0])
    for index in range(count):
        stop = position + int(lengths[index])
        segments.append(SnippetSegment(int(classes[index]), position, stop))
        position = stop + min_gap + int(spare[index + 1])
    return segments


def sample_layout(
    rng: np.random.Generator, length: int, cfg: GeneratorConfig
) -> list[SnippetSegment]:
    """
    Draw segments for a ``length``-snippet video.

    Segments are at least ``max(min_segment, 2w)`` long, interior gaps at least
    ``max(min_gap, 2w)``, and at least ``w`` background snippets lead and trail, so crossfade
    zones never overlap.

    :raises ConfigError: if no layout fits after :data:`MAX_LAYOUT_ATTEMPTS` draws.
    """
    flog = mlog.fields(func="sample_layout")
    for attempt in range(MAX_LAYOUT_ATTEMPTS):
        segments = _draw_layout(rng, length, cfg)
        if segments is not None:
            return segments
        flog.fields(attempt=attempt, length=length).debug("layout does not fit, redrawing")
    raise ConfigError(
        f"cannot fit {cfg.min_actions}..{cfg.max_actions} actions into {length} snippets"
        f" after {MAX_LAYOUT_ATTEMPTS} attempts; lower min_segment, min_gap, crossfade or"
        " max_actions, or raise min_snippets"
    )


def region_owners(length: int, segments: Sequence[SnippetSegment], background: int) -> np.ndarray:
    owners = np.full(length, background, dtype=np.int64)
    for segment in segments:
        owners[segment.start : segment.stop] = segment.class_id
    return owners


def boundaries(owners: np.ndarray) -> list[int]:
    """Indices ``b`` where snippet ``b`` belongs to a different region than snippet ``b - 1``."""
    return [int(b) for b in np.flatnonzero(owners[1:] != owners[:-1]) + 1]


def crossfade_mask(owners: np.ndarray, fade: int) -> np.ndarray:
    mask = np.zeros(owners.shape[0], dtype=bool)
    for boundary in boundaries(owners):
        mask[max(0, boundary - fade) : boundary + fade] = True
    return mask


def clean_features(owners: np.ndarray, prototypes: np.ndarray, fade: int) -> np.ndarray:
    """Prototype of each snippet's region, crossfaded linearly around every boundary."""
    features = prototypes[owners].copy()
    if fade == 0:
        return features
    for boundary in boundaries(owners):
        left = prototypes[owners[boundary - 1]]
        right = prototypes[owners[boundary]]
        for snippet in range(boundary - fade, boundary + fade):
            if 0 <= snippet < owners.shape[0]:
                beta = (snippet - (boundary - fade)) / (2 * fade)
                features[snippet] = (1.0 - beta) * left + beta * right
    return features


def nearest_prototype_agreement(
    features: np.ndarray, owners: np.ndarray, prototypes: np.ndarray, fade: int
) -> tuple[int, int]:
    """
    Count snippets outside every crossfade zone whose nearest prototype is their region's.

    :returns: ``(agreeing, considered)``
    """
    outside = ~crossfade_mask(owners, fade)
    if not outside.any():
        return 0, 0
    distances = (
        (features[outside, None, :] - prototypes[None, :, :]) ** 2
    ).sum(axis=2)
    nearest = distances.argmin(axis=1)
    return int((nearest == owners[outside]).sum()), int(outside.sum())


def generate_video(
    cfg: GeneratorConfig, seed: int, split: str, index: int, prototypes: np.ndarray
) -> FeatureSequence:
    """One video, fully determined by ``(cfg, seed, split, index)``."""
    rng = np.random.default_rng([seed, _SPLIT_STREAMS[split], index])
    length = int(rng.integers(cfg.min_snippets, cfg.max_snippets + 1))
    segments = sample_layout(rng, length, cfg)
    owners = region_owners(length, segments, cfg.num_classes)
    features = clean_features(owners, prototypes, cfg.crossfade)
    if cfg.noise > 0:
        features = features + rng.normal(0.0, cfg.noise, size=features.shape)
    video_id = f"{split}-{index:04d}"
    label = np.zeros(cfg.num_classes)
    for segment in segments:
        label[segment.class_id] = 1.0
    ground_truth = tuple(
        GroundTruthSegment(
            video_id,
            segment.class_id,
            segment.start * cfg.snippet_duration,
            segment.stop * cfg.snippet_duration,
        )
        for segment in segments
    )
    return FeatureSequence(video_id, features, label, cfg.snippet_duration, ground_truth)


async def generate_split(
    cfg: GeneratorConfig, seed: int, split: str, count: int | None = None
) -> Dataset:
    """
    Generate one split in memory.  Videos are generated in helper threads.
    """
    flog = mlog.fields(func="generate_split")
    if split not in _SPLIT_STREAMS:
        raise ConfigError(f"unknown split {split!r}, expected one of {', '.join(SPLITS)}")
    if count is None:
        count = cfg.train_videos if split == "train" else cfg.test_videos
    prototypes = make_prototypes(cfg, seed)
    videos = await map_bounded(
        lambda index: generate_video(cfg, seed, split, index, prototypes), range(count)
    )

    agreeing = considered = 0
    for video in videos:
        owners = _owners_from_segments(video, cfg.num_classes)
        a, c = nearest_prototype_agreement(video.features, owners, prototypes, cfg.crossfade)
        agreeing += a
        considered += c
    if considered:
        flog.fields(
            split=split, agreement=agreeing / considered, snippets=considered
        ).info("nearest prototype agrees with region outside crossfade zones")

    return Dataset(
        split=split,
        num_classes=cfg.num_classes,
        feature_dim=cfg.feature_dim,
        snippet_duration=cfg.snippet_duration,
        seed=seed,
        videos=tuple(videos),
    )


def _owners_from_segments(video: FeatureSequence, background: int) -> np.ndarray:
    owners = np.full(video.num_snippets, background, dtype=np.int64)
    for segment in video.segments:
        start = int(round(segment.t_start / video.snippet_duration))
        stop = int(round(segment.t_end / video.snippet_duration))
        owners[start:stop] = segment.class_id
    return owners


#
# Feature files
#


def encode_features(features: np.ndarray) -> bytes:
    rows, cols = features.shape
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols)
    return header + np.ascontiguousarray(features, dtype="<f8").tobytes()


def decode_features(content: bytes, video_id: str) -> np.ndarray:
    """:raises DatasetLoadError: naming ``video_id`` for any malformed content."""
    if len(content) < _FEATURE_HEADER.size:
        raise DatasetLoadError(f"{video_id}: feature file is truncated (no header)")
    magic, version, rows, cols = _FEATURE_HEADER.unpack_from(content)
    if magic != FEATURE_MAGIC:
        raise DatasetLoadError(f"{video_id}: feature file has bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DatasetLoadError(f"{video_id}: unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 8 * rows * cols
    if len(content) != expected:
        raise DatasetLoadError(
            f"{video_id}: feature file has {len(content)} bytes, expected {expected}"
            f" for {rows}x{cols}"
        )
    data = np.frombuffer(content, dtype="<f8", offset=_FEATURE_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


#
# Manifests
#


class _ManifestModel(p.BaseModel):
    # Fields added by later versions are accepted and reported.
    model_config = p.ConfigDict(frozen=True, extra="allow")


class SegmentRecord(_ManifestModel):
    class_id: int = p.Field(ge=0)
    t_start: float = p.Field(ge=0)
    t_end: float

    @p.model_validator(mode="after")
    def _positive_length(self) -> SegmentRecord:
        if self.t_end <= self.t_start:
            raise ValueError("t_end must be after t_start")
        return self


class ManifestHeader(_ManifestModel):
    record: t.Literal["header"] = "header"
    format_version: int = MANIFEST_VERSION
    split: str
    num_classes: int = p.Field(ge=1)
    feature_dim: int = p.Field(ge=1)
    snippet_duration: float = p.Field(gt=0)
    seed: int
    num_videos: int = p.Field(ge=0)
    generator: dict[str, t.Any] = {}


class VideoRecord(_ManifestModel):
    record: t.Literal["video"] = "video"
    video_id: str
    num_snippets: int = p.Field(ge=2)
    feature_dim: int = p.Field(ge=1)
    label: list[int]
    path: str
    sha256: str
    segments: list[SegmentRecord] = []


def _manifest_lines(
    dataset: Dataset, paths: Sequence[str], digests: Sequence[str], generator: GeneratorConfig | None
) -> str:
    header = ManifestHeader(
        split=dataset.split,
        num_classes=dataset.num_classes,
        feature_dim=dataset.feature_dim,
        snippet_duration=dataset.snippet_duration,
        seed=dataset.seed,
        num_videos=len(dataset),
        generator=generator.model_dump() if generator is not None else {},
    )
    lines = [header.model_dump_json()]
    for video, path, digest in zip(dataset.videos, paths, digests):
        record = VideoRecord(
            video_id=video.video_id,
            num_snippets=video.num_snippets,
            feature_dim=video.features.shape[1],
            label=[int(v) for v in video.label],
            path=path,
            sha256=digest,
            segments=[
                SegmentRecord(class_id=s.class_id, t_start=s.t_start, t_end=s.t_end)
                for s in video.segments
            ],
        )
        lines.append(record.model_dump_json())
    return "\n".join(lines) + "\n"


async def _write_binary(path: str, content: bytes) -> None:
    async with aiofiles.open(path, "wb") as f:
        await f.write(content)


async def write_dataset(
    dataset: Dataset, out_dir: StrPath, generator: GeneratorConfig | None = None
) -> str:
    """
    Write feature files and the manifest ``<split>.jsonl`` below ``out_dir``.

    :returns: The manifest path.
    """
    flog = mlog.fields(func="write_dataset")
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    contents = [encode_features(video.features) for video in dataset.videos]
    paths = [os.path.join("features", f"{video.video_id}.bin") for video in dataset.videos]
    await asyncio.gather(
        *(
            _write_binary(os.path.join(out_dir, path), content)
            for path, content in zip(paths, contents)
        )
    )
    manifest_path = os.path.join(out_dir, f"{dataset.split}.jsonl")
    await write_file(
        manifest_path,
        _manifest_lines(dataset, paths, [sha256_digest(c) for c in contents], generator),
    )
    flog.fields(manifest=manifest_path, videos=len(dataset)).info("dataset written")
    return manifest_path


async def generate_dataset(
    cfg: GeneratorConfig, seed: int, out_dir: StrPath
) -> dict[str, str]:
    """
    Generate and write the train and test splits.

    :returns: Manifest path per split.
    :raises ConfigError: if the layout constraints cannot be met.
    """
    manifests = {}
    for split in SPLITS:
        dataset = await generate_split(cfg, seed, split)
        manifests[split] = await write_dataset(dataset, out_dir, cfg)
    mlog.fields(func="generate_dataset", out_dir=out_dir, seed=seed).notice("dataset generated")
    return manifests


def _parse_record(model: type[_ManifestModel], line: str, where: str) -> t.Any:
    try:
        record = model.model_validate_json(line)
    except p.ValidationError as exc:
        raise DatasetLoadError(f"{where}: invalid record: {exc}") from exc
    extra = get_extra_field_names(record)
    if extra:
        mlog.fields(func="load_dataset", where=where, fields=extra).warning(
            "ignoring unknown manifest fields"
        )
    return record


async def _load_video(
    record: VideoRecord, header: ManifestHeader, base_dir: str
) -> FeatureSequence:
    video_id = record.video_id
    path = os.path.join(base_dir, record.path)
    if not os.path.isfile(path):
        raise DatasetLoadError(f"{video_id}: feature file {path} does not exist")
    if not await verify_hash(path, record.sha256):
        raise DatasetLoadError(f"{video_id}: checksum of {path} does not match the manifest")
    features = decode_features(await read_bytes(path), video_id)
    if features.shape != (record.num_snippets, record.feature_dim):
        raise DatasetLoadError(
            f"{video_id}: features are {features.shape[0]}x{features.shape[1]}, manifest"
            f" declares {record.num_snippets}x{record.feature_dim}"
        )
    if record.feature_dim != header.feature_dim:
        raise DatasetLoadError(
            f"{video_id}: feature dimension {record.feature_dim} differs from the dataset's"
            f" {header.feature_dim}"
        )
    if len(record.label) != header.num_classes or not any(record.label):
        raise DatasetLoadError(
            f"{video_id}: label must be multi-hot over {header.num_classes} classes with at"
            " least one positive"
        )
    duration = record.num_snippets * header.snippet_duration
    segments = []
    for segment in record.segments:
        if segment.class_id >= header.num_classes or segment.t_end > duration + 1e-9:
            raise DatasetLoadError(f"{video_id}: segment {segment} is outside the video")
        if not record.label[segment.class_id]:
            raise DatasetLoadError(
                f"{video_id}: segment of class {segment.class_id} is not in the label"
            )
        segments.append(
            GroundTruthSegment(video_id, segment.class_id, segment.t_start, segment.t_end)
        )
    return FeatureSequence(
        video_id=video_id,
        features=features,
        label=np.array(record.label, dtype=np.float64),
        snippet_duration=header.snippet_duration,
        segments=tuple(segments),
    )


async def load_dataset(manifest_path: StrPath) -> Dataset:
    """
    Load a split written by :func:`write_dataset`.

    :raises DatasetLoadError: for a missing or malformed manifest, and for any video whose
        feature file is missing, fails its checksum, or does not match its declared shape.
        The message names the video.
    """
    flog = mlog.fields(func="load_dataset")
    flog.fields(manifest=manifest_path).debug("Enter")
    try:
        text = await read_file(manifest_path)
    except OSError as exc:
        raise DatasetLoadError(f"cannot read manifest {manifest_path}: {exc}") from exc
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise DatasetLoadError(f"manifest {manifest_path} is empty")
    header = _parse_record(ManifestHeader, lines[0], f"{manifest_path}:1")
    records = [
        _parse_record(VideoRecord, line, f"{manifest_path}:{number}")
        for number, line in enumerate(lines[1:], start=2)
    ]
    ids = [record.video_id for record in records]
    if len(set(ids)) != len(ids):
        raise DatasetLoadError(f"manifest {manifest_path} has duplicate video ids")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    videos = await asyncio.gather(
        *(_load_video(record, header, base_dir) for record in records)
    )
    flog.fields(videos=len(videos)).info("dataset loaded")
    return Dataset(
        split=header.split,
        num_classes=header.num_classes,
        feature_dim=header.feature_dim,
        snippet_duration=header.snippet_duration,
        seed=header.seed,
        videos=tuple(videos),
    )
