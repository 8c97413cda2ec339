# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

import dataclasses

import numpy as np
import pytest
import pytest_asyncio

from neighbormix.ablation import SWAP_CELLS, rescore, swap_ablation, swap_table
from neighbormix.evaluation import map_ladder
from neighbormix.infer import InferenceResult, Proposal, run_dataset_inference
from neighbormix.model import Model
from neighbormix.schemas.experiment import EvalConfig, GeneratorConfig, InferConfig, ModelConfig
from neighbormix.synthdata import generate_split
from neighbormix.train import model_spec_for

DATA = GeneratorConfig(
    num_classes=3,
    feature_dim=8,
    min_snippets=24,
    max_snippets=32,
    max_actions=2,
    crossfade=1,
    test_videos=4,
)
MODEL = ModelConfig(embed_dim=8, proj_dim=4)
EVAL = EvalConfig(iou=[0.1, 0.3, 0.5])


@pytest_asyncio.fixture
async def evaluated():
    dataset = await generate_split(DATA, 7, "test")
    spec = model_spec_for(dataset, MODEL)
    base = await run_dataset_inference(Model.initialize(spec, 1), dataset, InferConfig())
    other = await run_dataset_inference(Model.initialize(spec, 2), dataset, InferConfig())
    return dataset, base, other


@pytest.mark.asyncio
async def test_self_swap_matches_standard_evaluation(evaluated):
    dataset, base, _ = evaluated
    proposals = [proposal for result in base for proposal in result.proposals]
    standard = map_ladder(proposals, dataset.segments, EVAL.iou, dataset.num_classes)
    swapped = swap_ablation(base, base, dataset, InferConfig(), EVAL)
    assert swapped.maps == standard.maps
    assert swapped.class_ap == standard.class_ap
    assert swapped.num_proposals == standard.num_proposals


@pytest.mark.asyncio
async def test_swap_table_has_four_cells(evaluated):
    dataset, base, other = evaluated
    table = swap_table(base, other, dataset, InferConfig(), EVAL)
    labels = [label for _, _, label in SWAP_CELLS]
    assert list(table.cells) == labels
    assert labels == ["①Base+②Base", "①C3BN+②Base", "①Base+②C3BN", "①C3BN+②C3BN"]
    assert table.cells["①C3BN+②C3BN"].maps == swap_ablation(
        other, other, dataset, InferConfig(), EVAL
    ).maps

    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0] == "cell,tiou,map"
    assert len(csv_lines) == 1 + 4 * (len(EVAL.iou) + 1)
    assert csv_lines[4].startswith("①Base+②Base,AVG,")

    text = table.format_table().splitlines()
    assert text[0].split() == ["cell", "0.1", "0.3", "0.5", "AVG"]
    assert [line.split()[0] for line in text[1:]] == labels


def _result(candidates, length=10, video_id="v"):
    scores = np.zeros((length, 2))
    scores[2:5, 0] = 1.0
    return InferenceResult(
        video_id=video_id,
        snippet_duration=1.0,
        probs=scores,
        scores=scores,
        video_probs=np.array([0.9, 0.1]),
        classes=[0],
        candidates=candidates,
        proposals=[],
    )


def test_rescore_uses_the_other_activations():
    boundaries = _result([Proposal("v", 0, 2.0, 5.0, 0.01)])
    kept = rescore(boundaries, _result([]), InferConfig())
    assert [(p.t_start, p.t_end) for p in kept] == [(2.0, 5.0)]
    assert kept[0].score == pytest.approx(1.0)


def test_rescore_clips_to_the_video():
    boundaries = _result(
        [Proposal("v", 0, 6.0, 12.0, 0.5), Proposal("v", 0, 11.0, 13.0, 0.5)], length=14
    )
    kept = rescore(boundaries, _result([], length=10), InferConfig())
    assert [(p.t_start, p.t_end) for p in kept] == [(6.0, 10.0)]


def test_rescore_needs_the_same_video():
    with pytest.raises(ValueError):
        rescore(_result([]), _result([], video_id="w"), InferConfig())


@pytest.mark.asyncio
async def test_swap_needs_matching_results(evaluated):
    dataset, base, other = evaluated
    with pytest.raises(ValueError):
        swap_ablation(base, other[:-1], dataset, InferConfig(), EVAL)


def test_uniform_scores_keep_perfect_intervals():
    perfect = _result([Proposal("v", 0, 2.0, 5.0, 1.0)])
    flat = dataclasses.replace(_result([]), scores=np.full((10, 2), 0.5))
    kept = rescore(perfect, flat, InferConfig(nms_floor=0.0))
    assert [(p.t_start, p.t_end) for p in kept] == [(2.0, 5.0)]
    assert kept[0].score == pytest.approx(0.0)


def test_rescore_drops_intervals_below_the_floor():
    perfect = _result([Proposal("v", 0, 2.0, 5.0, 1.0)])
    flat = dataclasses.replace(_result([]), scores=np.full((10, 2), 0.5))
    assert rescore(perfect, flat, InferConfig()) == []
