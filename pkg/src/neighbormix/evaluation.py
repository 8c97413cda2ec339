# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Localization metrics: tIoU, average precision over tIoU ladders, and boundary entropy."""

from __future__ import annotations

import dataclasses
import typing as t
from collections.abc import Sequence

import numpy as np

from .logging import log

mlog = log.fields(mod=__name__)


class EvaluationError(Exception):
    """There is nothing to evaluate."""


class ScoredInterval(t.Protocol):
    video_id: str
    class_id: int
    t_start: float
    t_end: float
    score: float


class AnnotatedInterval(t.Protocol):
    video_id: str
    class_id: int
    t_start: float
    t_end: float


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection over union of two ``(start, end)`` intervals."""
    intersection = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    if intersection <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return intersection / union


def interpolated_ap(recall: Sequence[float], precision: Sequence[float]) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def match_proposals(
    proposals: Sequence[ScoredInterval], gts: Sequence[AnnotatedInterval], threshold: float
) -> list[bool]:
    """
    Greedy matching in score order (stable on ties).  Each proposal takes the unmatched ground
    truth segment of its video with the highest tIoU, if that reaches ``threshold``.

    :returns: per proposal in ranked order, whether it is a true positive.
    """
    ranked = sorted(range(len(proposals)), key=lambda index: -proposals[index].score)
    by_video: dict[str, list[int]] = {}
    for index, gt in enumerate(gts):
        by_video.setdefault(gt.video_id, []).append(index)
    matched = [False] * len(gts)
    hits = []
    for index in ranked:
        proposal = proposals[index]
        best_index = -1
        best_overlap = -1.0
        for gt_index in by_video.get(proposal.video_id, ()):
            if matched[gt_index]:
                continue
            gt = gts[gt_index]
            overlap = tiou((proposal.t_start, proposal.t_end), (gt.t_start, gt.t_end))
            if overlap > best_overlap:
                best_index, best_overlap = gt_index, overlap
        if best_index >= 0 and best_overlap >= threshold:
            matched[best_index] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def average_precision(
    proposals: Sequence[ScoredInterval], gts: Sequence[AnnotatedInterval], threshold: float
) -> float | None:
    """
    Average precision for one class.

    :returns: None if there is neither a ground truth segment nor a proposal, 0 if only one of
        them is missing.
    """
    if not gts:
        return 0.0 if proposals else None
    if not proposals:
        return 0.0
    hits = np.asarray(match_proposals(proposals, gts, threshold), dtype=np.float64)
    true_positives = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return interpolated_ap(true_positives / len(gts), true_positives / ranks)


@dataclasses.dataclass
class EvalReport:
    """
    :ivar thresholds: the tIoU ladder.
    :ivar class_ap: per class, the AP at every threshold; None where undefined.
    :ivar maps: mAP at every threshold, over the classes with ground truth.
    :ivar entropy: ``H(d_t)`` when computed.
    """

    thresholds: list[float]
    class_ap: dict[int, list[float | None]]
    maps: list[float]
    num_proposals: int
    num_segments: int
    entropy: float | None = None

    @property
    def avg_map(self) -> float:
        return float(np.mean(self.maps))

    def to_csv(self) -> str:
        lines = ["kind,class_id,tiou,value"]
        for class_id, aps in sorted(self.class_ap.items()):
            for threshold, ap in zip(self.thresholds, aps):
                value = "" if ap is None else f"{ap:.6f}"
                lines.append(f"ap,{class_id},{threshold:g},{value}")
        for threshold, value in zip(self.thresholds, self.maps):
            lines.append(f"map,,{threshold:g},{value:.6f}")
        lines.append(f"avg_map,,,{self.avg_map:.6f}")
        if self.entropy is not None:
            lines.append(f"entropy,,,{self.entropy:.6f}")
        lines.append(f"proposals,,,{self.num_proposals}")
        lines.append(f"segments,,,{self.num_segments}")
        return "\n".join(lines) + "\n"

    def format_table(self, label: str = "mAP") -> str:
        """
        Text table with one column per tIoU threshold plus ``AVG``; values in percent.
        """
        header = ["tIoU"] + [f"{threshold:g}" for threshold in self.thresholds] + ["AVG"]
        row = [label] + [f"{100 * value:.1f}" for value in self.maps]
        row.append(f"{100 * self.avg_map:.1f}")
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        lines = [
            " ".join(cell.rjust(width) for cell, width in zip(header, widths)),
            " ".join(cell.rjust(width) for cell, width in zip(row, widths)),
        ]
        if self.entropy is not None:
            lines.append(f"H(d_t) {self.entropy:.4f}")
        return "\n".join(lines) + "\n"


def map_ladder(
    proposals: Sequence[ScoredInterval],
    gts: Sequence[AnnotatedInterval],
    thresholds: Sequence[float],
    num_classes: int | None = None,
) -> EvalReport:
    """
    AP for every class at every tIoU threshold, mAP per threshold and their average.

    :kwarg num_classes: Size of the class universe; defaults to the classes seen in ``gts`` and
        ``proposals``.
    :raises EvaluationError: if there is no ground truth at all.
    """
    if not gts:
        raise EvaluationError("no ground truth segments to evaluate against")
    if num_classes is None:
        num_classes = 1 + max(
            [gt.class_id for gt in gts] + [proposal.class_id for proposal in proposals]
        )
    proposals_by_class: dict[int, list[ScoredInterval]] = {c: [] for c in range(num_classes)}
    gts_by_class: dict[int, list[AnnotatedInterval]] = {c: [] for c in range(num_classes)}
    for proposal in proposals:
        proposals_by_class[proposal.class_id].append(proposal)
    for gt in gts:
        gts_by_class[gt.class_id].append(gt)

    class_ap = {
        class_id: [
            average_precision(proposals_by_class[class_id], gts_by_class[class_id], threshold)
            for threshold in thresholds
        ]
        for class_id in range(num_classes)
    }
    evaluated = [class_id for class_id in range(num_classes) if gts_by_class[class_id]]
    maps = [
        float(np.mean([class_ap[class_id][position] for class_id in evaluated]))
        for position in range(len(thresholds))
    ]
    mlog.fields(func="map_ladder", classes=len(evaluated), maps=maps).debug("mAP computed")
    return EvalReport(
        thresholds=list(thresholds),
        class_ap=class_ap,
        maps=maps,
        num_proposals=len(proposals),
        num_segments=len(gts),
    )


def _entropy_terms(diffs: np.ndarray) -> np.ndarray:
    diffs = np.clip(diffs, 0.0, 1.0)
    safe = np.where(diffs > 0, diffs, 1.0)
    return np.where(diffs > 0, -diffs * np.log(safe), 0.0)


def boundary_entropy(
    probs: np.ndarray | Sequence[np.ndarray],
    labels: Sequence[np.ndarray] | None = None,
    restrict_to_action_classes: bool = False,
) -> float:
    """
    Mean of ``-d log d`` over the absolute differences ``d = |p_{t+1} - p_t|`` of adjacent
    snippet probabilities, natural log, ``0 log 0 = 0``.  Lower means sharper transitions.

    :arg probs: One ``T x C_out`` array or a sequence of them; elements of all videos are
        pooled.
    :kwarg labels: Per video multi-hot labels; needed with ``restrict_to_action_classes``.
    :kwarg restrict_to_action_classes: Only use the columns of each video's positive classes.
    :raises ValueError: if a video has fewer than two snippets.
    """
    if isinstance(probs, np.ndarray):
        probs = [probs]
        if labels is not None and isinstance(labels, np.ndarray):
            labels = [labels]
    if restrict_to_action_classes and labels is None:
        raise ValueError("restricting to action classes needs the video labels")
    total = 0.0
    count = 0
    for position, video_probs in enumerate(probs):
        video_probs = np.asarray(video_probs, dtype=np.float64)
        if video_probs.shape[0] < 2:
            raise ValueError("boundary entropy needs at least two snippets")
        diffs = np.abs(np.diff(video_probs, axis=0))
        if restrict_to_action_classes:
            assert labels is not None
            columns = np.flatnonzero(np.asarray(labels[position]) > 0)
            diffs = diffs[:, columns]
        terms = _entropy_terms(diffs)
        total += float(terms.sum())
        count += terms.size
    if not count:
        return 0.0
    return total / count
