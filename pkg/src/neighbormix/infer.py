# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Test-time localization.

Classes are selected from the video-level prediction.  For every selected class the class
activation sequence is thresholded at several levels, each run of consecutive snippets becoming a
candidate interval.  Candidates are scored by the outer-inner contrast of the activations and
pruned with SoftNMS.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import tiou
from .logging import log
from .losses import video_probs as pooled_video_probs
from .model import Model
from .parallel import map_bounded
from .schemas.experiment import InferConfig
from .synthdata import Dataset, FeatureSequence

mlog = log.fields(mod=__name__)

_CSV_HEADER = "video_id,class_id,t_start,t_end,score"


@dataclasses.dataclass(frozen=True)
class Proposal:
    video_id: str
    class_id: int
    t_start: float
    t_end: float
    score: float

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)


@dataclasses.dataclass(frozen=True)
class InferenceResult:
    """
    :ivar probs: raw ``P``, ``T x C_out``.
    :ivar scores: the ``T x C`` action-class activations proposals are thresholded on.
    :ivar video_probs: length ``C`` video-level class probabilities.
    :ivar classes: the selected classes.
    :ivar candidates: OIC-scored candidates before SoftNMS, grouped by class.
    :ivar proposals: the final proposals.
    """

    video_id: str
    snippet_duration: float
    probs: np.ndarray
    scores: np.ndarray
    video_probs: np.ndarray
    classes: list[int]
    candidates: list[Proposal]
    proposals: list[Proposal]


def select_classes(video_probs: np.ndarray, threshold: float) -> list[int]:
    """
    Classes whose video probability reaches ``threshold``; the argmax (lowest index on ties)
    when none does.
    """
    video_probs = np.asarray(video_probs, dtype=np.float64)
    selected = [int(c) for c in np.flatnonzero(video_probs >= threshold)]
    if not selected:
        selected = [int(np.argmax(video_probs))]
    return selected


def threshold_runs(scores: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal runs ``[start, stop)`` of snippets scoring at least ``threshold``."""
    above = np.concatenate(([False], np.asarray(scores) >= threshold, [False]))
    changes = np.flatnonzero(above[1:] != above[:-1])
    return [(int(start), int(stop)) for start, stop in zip(changes[::2], changes[1::2])]


def candidate_runs(scores: np.ndarray, thresholds: Sequence[float]) -> list[tuple[int, int]]:
    """Union of the runs over all thresholds, identical runs kept once, in first-seen order."""
    seen: dict[tuple[int, int], None] = {}
    for threshold in thresholds:
        for run in threshold_runs(scores, threshold):
            seen.setdefault(run, None)
    return list(seen)


def generate_proposals(
    scores: np.ndarray, thresholds: Sequence[float], snippet_duration: float
) -> list[tuple[float, float]]:
    """
    Candidate intervals in seconds for one class.

    :arg scores: Length ``T`` activations of the class, in [0, 1].
    """
    return [
        (start * snippet_duration, stop * snippet_duration)
        for start, stop in candidate_runs(scores, thresholds)
    ]


def interval_to_run(interval: tuple[float, float], snippet_duration: float) -> tuple[int, int]:
    """Snippet run ``[start, stop)`` of an interval in seconds that lies on snippet edges."""
    start, stop = interval
    return (int(round(start / snippet_duration)), int(round(stop / snippet_duration)))


def flank_length(length: int, inflation: float) -> int:
    # round first so that products like 0.25 * 4 do not ceil up through float noise
    return math.ceil(round(inflation * length, 9))


def oic_score(run: tuple[int, int], scores: np.ndarray, inflation: float) -> float:
    """
    Outer-inner contrast of the snippet run ``[start, stop)``: the mean activation inside minus
    the mean over both flanks, each ``ceil(inflation * length)`` snippets long and clipped to the
    video.  Without any flank snippet the outer mean is 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    start, stop = run
    if not 0 <= start < stop <= scores.shape[0]:
        raise ValueError(f"run {run} is outside a video of {scores.shape[0]} snippets")
    inner = float(scores[start:stop].mean())
    flank = flank_length(stop - start, inflation)
    outer_scores = np.concatenate(
        (scores[max(0, start - flank) : start], scores[stop : stop + flank])
    )
    outer = float(outer_scores.mean()) if outer_scores.size else 0.0
    return inner - outer


def soft_nms(proposals: Sequence[Proposal], sigma: float, floor: float) -> list[Proposal]:
    """
    Gaussian SoftNMS for proposals of one class.

    Proposals scoring below ``floor`` are dropped first.  Then repeatedly picks the highest score
    (earlier ``t_start``, then earlier position, on ties), multiplies every remaining positive
    score by ``exp(-tiou**2 / sigma)`` and drops those falling below ``floor``.  Returns the picks
    in pick order with their score at pick time; no score ever increases.
    """
    remaining = [
        (proposal.score, index, proposal)
        for index, proposal in enumerate(proposals)
        if proposal.score >= floor
    ]
    kept: list[Proposal] = []
    while remaining:
        best = min(remaining, key=lambda item: (-item[0], item[2].t_start, item[1]))
        remaining.remove(best)
        score, _, picked = best
        kept.append(dataclasses.replace(picked, score=score))
        decayed = []
        for other_score, index, other in remaining:
            # decay moves only positive scores toward 0
            if other_score > 0:
                overlap = tiou(picked.interval, other.interval)
                other_score *= math.exp(-(overlap**2) / sigma)
            if other_score >= floor:
                decayed.append((other_score, index, other))
        remaining = decayed
    return kept


def score_candidates(
    video_id: str,
    class_id: int,
    intervals: Sequence[tuple[float, float]],
    scores: np.ndarray,
    snippet_duration: float,
    cfg: InferConfig,
    video_prob: float = 0.0,
) -> list[Proposal]:
    """OIC-score intervals in seconds, as returned by :func:`generate_proposals`."""
    bonus = cfg.video_score_weight * video_prob
    return [
        Proposal(
            video_id=video_id,
            class_id=class_id,
            t_start=t_start,
            t_end=t_end,
            score=oic_score(
                interval_to_run((t_start, t_end), snippet_duration), scores, cfg.inflation
            )
            + bonus,
        )
        for t_start, t_end in intervals
    ]


def suppress(candidates: Sequence[Proposal], cfg: InferConfig) -> list[Proposal]:
    """SoftNMS per class; classes in order of first appearance."""
    by_class: dict[int, list[Proposal]] = {}
    for candidate in candidates:
        by_class.setdefault(candidate.class_id, []).append(candidate)
    proposals: list[Proposal] = []
    for group in by_class.values():
        proposals.extend(soft_nms(group, cfg.nms_sigma, cfg.nms_floor))
    return proposals


def localize(
    video_id: str,
    scores: np.ndarray,
    video_probs: np.ndarray,
    snippet_duration: float,
    cfg: InferConfig,
) -> tuple[list[int], list[Proposal], list[Proposal]]:
    """
    Class selection, candidate generation, OIC scoring and SoftNMS on given activations.

    :arg scores: ``T x C`` action-class activations.
    :arg video_probs: Length ``C`` video-level probabilities.
    :returns: ``(classes, candidates, proposals)``.
    """
    classes = select_classes(video_probs, cfg.video_threshold)
    candidates: list[Proposal] = []
    for class_id in classes:
        column = scores[:, class_id]
        candidates.extend(
            score_candidates(
                video_id,
                class_id,
                generate_proposals(column, cfg.thresholds, snippet_duration),
                column,
                snippet_duration,
                cfg,
                float(video_probs[class_id]),
            )
        )
    return classes, candidates, suppress(candidates, cfg)


def run_inference(
    model: Model, video: FeatureSequence, cfg: InferConfig, topk_divisor: int = 8
) -> InferenceResult:
    """Localize actions in one video.  Deterministic for a fixed model and configuration."""
    forward = model.forward(ad.constant(video.features), with_projection=False)
    tcas = forward.tcas
    num_classes = model.spec.num_classes
    probs = tcas.probs.data
    scores = probs[:, :num_classes]
    if tcas.attention is not None and cfg.attention_modulation:
        scores = scores * tcas.attention.data
    class_probs = pooled_video_probs(tcas, topk_divisor).data[0, :num_classes]
    classes, candidates, proposals = localize(
        video.video_id, scores, class_probs, video.snippet_duration, cfg
    )
    return InferenceResult(
        video_id=video.video_id,
        snippet_duration=video.snippet_duration,
        probs=probs,
        scores=scores,
        video_probs=class_probs,
        classes=classes,
        candidates=candidates,
        proposals=proposals,
    )


async def run_dataset_inference(
    model: Model, dataset: Dataset, cfg: InferConfig, topk_divisor: int = 8
) -> list[InferenceResult]:
    """Inference for every video, in dataset order."""
    flog = mlog.fields(func="run_dataset_inference")
    results = await map_bounded(
        lambda video: run_inference(model, video, cfg, topk_divisor), dataset.videos
    )
    flog.fields(
        videos=len(results), proposals=sum(len(result.proposals) for result in results)
    ).debug("inference finished")
    return results


def sort_proposals(proposals: Sequence[Proposal]) -> list[Proposal]:
    """By video id, then score descending; stable otherwise."""
    return sorted(proposals, key=lambda proposal: (proposal.video_id, -proposal.score))


def proposals_to_csv(proposals: Sequence[Proposal]) -> str:
    lines = [_CSV_HEADER]
    for proposal in sort_proposals(proposals):
        lines.append(
            f"{proposal.video_id},{proposal.class_id},{proposal.t_start:.6f},"
            f"{proposal.t_end:.6f},{proposal.score:.6f}"
        )
    return "\n".join(lines) + "\n"
