# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Swap ablation.

Localization has two stages: boundary localization (which intervals are proposed) and proposal
evaluation (how they are scored).  Taking the candidate intervals of one model and scoring them
with another model's activations shows which stage a training change helps.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence

from .evaluation import EvalReport, map_ladder
from .infer import InferenceResult, Proposal, interval_to_run, score_candidates, suppress
from .logging import log
from .schemas.experiment import EvalConfig, InferConfig
from .synthdata import Dataset

mlog = log.fields(mod=__name__)

#: ``(boundaries from, scores from, label)`` for the four cells of the swap table.
SWAP_CELLS: tuple[tuple[str, str, str], ...] = (
    ("base", "base", "①Base+②Base"),
    ("c3bn", "base", "①C3BN+②Base"),
    ("base", "c3bn", "①Base+②C3BN"),
    ("c3bn", "c3bn", "①C3BN+②C3BN"),
)


def _snippet_run(
    proposal: Proposal, snippet_duration: float, length: int
) -> tuple[int, int] | None:
    start, stop = interval_to_run(proposal.interval, snippet_duration)
    clipped_start, clipped_stop = max(0, start), min(length, stop)
    if (clipped_start, clipped_stop) != (start, stop):
        mlog.fields(
            func="swap_ablation", video_id=proposal.video_id, start=start, stop=stop
        ).warning("interval clipped to the scoring video's extent")
    if clipped_stop <= clipped_start:
        return None
    return (clipped_start, clipped_stop)


def rescore(
    boundaries_from: InferenceResult, scores_from: InferenceResult, cfg: InferConfig
) -> list[Proposal]:
    """Score the candidate intervals of one result with the activations of another, then
    apply SoftNMS."""
    if boundaries_from.video_id != scores_from.video_id:
        raise ValueError(
            f"cannot swap between videos {boundaries_from.video_id} and {scores_from.video_id}"
        )
    length = scores_from.scores.shape[0]
    duration = scores_from.snippet_duration
    candidates: list[Proposal] = []
    for candidate in boundaries_from.candidates:
        run = _snippet_run(candidate, duration, length)
        if run is None:
            continue
        candidates.extend(
            score_candidates(
                candidate.video_id,
                candidate.class_id,
                [(run[0] * duration, run[1] * duration)],
                scores_from.scores[:, candidate.class_id],
                duration,
                cfg,
                float(scores_from.video_probs[candidate.class_id]),
            )
        )
    return suppress(candidates, cfg)


def swap_ablation(
    boundaries_from: Sequence[InferenceResult],
    scores_from: Sequence[InferenceResult],
    dataset: Dataset,
    infer_cfg: InferConfig,
    eval_cfg: EvalConfig,
) -> EvalReport:
    """
    Evaluate the candidate intervals of model A (boundary localization) scored with the
    activations of model B (proposal evaluation).  Both result lists cover ``dataset`` in order.
    """
    if len(boundaries_from) != len(scores_from):
        raise ValueError("both models must be evaluated on the same videos")
    proposals = [
        proposal
        for result_a, result_b in zip(boundaries_from, scores_from)
        for proposal in rescore(result_a, result_b, infer_cfg)
    ]
    return map_ladder(proposals, dataset.segments, eval_cfg.iou, dataset.num_classes)


@dataclasses.dataclass
class SwapTable:
    """The four swap cells keyed by their label, in table order."""

    cells: dict[str, EvalReport]

    def to_csv(self) -> str:
        lines = ["cell,tiou,map"]
        for label, report in self.cells.items():
            for threshold, value in zip(report.thresholds, report.maps):
                lines.append(f"{label},{threshold:g},{value:.6f}")
            lines.append(f"{label},AVG,{report.avg_map:.6f}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        reports = list(self.cells.values())
        header = ["cell"] + [f"{threshold:g}" for threshold in reports[0].thresholds] + ["AVG"]
        rows = [
            [label]
            + [f"{100 * value:.1f}" for value in report.maps]
            + [f"{100 * report.avg_map:.1f}"]
            for label, report in self.cells.items()
        ]
        widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
        return (
            "\n".join(
                " ".join(
                    cell.ljust(width) if i == 0 else cell.rjust(width)
                    for i, (cell, width) in enumerate(zip(row, widths))
                )
                for row in [header, *rows]
            )
            + "\n"
        )


def swap_table(
    base: Sequence[InferenceResult],
    c3bn: Sequence[InferenceResult],
    dataset: Dataset,
    infer_cfg: InferConfig,
    eval_cfg: EvalConfig,
) -> SwapTable:
    results = {"base": base, "c3bn": c3bn}
    return SwapTable(
        cells={
            label: swap_ablation(
                results[boundaries], results[scores], dataset, infer_cfg, eval_cfg
            )
            for boundaries, scores, label in SWAP_CELLS
        }
    )
