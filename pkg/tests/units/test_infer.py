# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors

import math

import numpy as np
import pydantic as p
import pytest

import neighbormix.infer as ni
from neighbormix.evaluation import map_ladder
from neighbormix.infer import (
    Proposal,
    candidate_runs,
    flank_length,
    generate_proposals,
    interval_to_run,
    localize,
    oic_score,
    proposals_to_csv,
    run_inference,
    select_classes,
    soft_nms,
    sort_proposals,
    suppress,
)
from neighbormix.model import Model, ModelSpec
from neighbormix.schemas.experiment import InferConfig, ModelConfig
from neighbormix.synthdata import FeatureSequence, GroundTruthSegment


def _proposal(t_start, t_end, score, class_id=0, video_id="v"):
    return Proposal(video_id, class_id, t_start, t_end, score)


@pytest.mark.parametrize(
    "probs, threshold, expected",
    [
        ([0.7, 0.3], 0.5, [0]),
        ([0.2, 0.3, 0.1], 0.5, [1]),
        ([0.4, 0.4, 0.2], 0.5, [0]),
        ([0.2, 0.5, 0.3], 0.0, [0, 1, 2]),
        ([0.45, 0.1, 0.45], 0.4, [0, 2]),
    ],
)
def test_select_classes(probs, threshold, expected):
    assert select_classes(np.array(probs), threshold) == expected


@pytest.mark.parametrize(
    "scores, thresholds, expected",
    [
        ([0.1, 0.9, 0.9, 0.1], [0.5], [(1.0, 3.0)]),
        ([0.9, 0.1, 0.9], [0.5], [(0.0, 1.0), (2.0, 3.0)]),
        ([0.3, 0.6, 0.8], [0.5, 0.7], [(1.0, 3.0), (2.0, 3.0)]),
        ([0.1, 0.2], [0.5], []),
    ],
)
def test_generate_proposals(scores, thresholds, expected):
    assert generate_proposals(np.array(scores), thresholds, 1.0) == expected


def test_generate_proposals_in_seconds():
    assert generate_proposals(np.array([0.0, 1.0, 1.0]), [0.5], 0.64) == [(0.64, 3 * 0.64)]


def test_candidate_runs_deduplicates():
    runs = candidate_runs(np.array([0.0, 1.0, 1.0, 0.0]), [0.1, 0.5, 0.9])
    assert runs == [(1, 3)]


def test_candidate_runs_nest_inside_lower_thresholds():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=40)
    thresholds = [0.2, 0.4, 0.6, 0.8]
    low_runs = candidate_runs(scores, thresholds[:1])
    for start, stop in candidate_runs(scores, thresholds):
        assert any(lo <= start and stop <= hi for lo, hi in low_runs)
        assert (scores[start:stop] >= 0.2).all()


@pytest.mark.parametrize(
    "length, inflation, expected",
    [
        (2, 0.25, 1),
        (4, 0.25, 1),
        (5, 0.25, 2),
        (10, 0.1, 1),
    ],
)
def test_flank_length(length, inflation, expected):
    assert flank_length(length, inflation) == expected


def test_oic_example():
    scores = np.array([0.2, 0.8, 0.6, 0.4])
    assert oic_score((1, 3), scores, 0.25) == pytest.approx(0.4)


def test_oic_perfect_contrast():
    scores = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    assert oic_score((2, 4), scores, 0.25) == 1.0


def test_oic_constant_scores():
    assert oic_score((1, 3), np.full(5, 0.3), 0.25) == pytest.approx(0.0)


def test_oic_without_flanks():
    assert oic_score((0, 3), np.array([0.5, 0.7, 0.9]), 0.25) == pytest.approx(0.7)


def test_oic_one_sided_flank():
    scores = np.array([0.9, 0.9, 0.1, 0.3])
    # right flank only, two snippets long
    assert oic_score((0, 2), scores, 1.0) == pytest.approx(0.9 - 0.2)


def test_oic_rejects_runs_outside_the_video():
    with pytest.raises(ValueError):
        oic_score((2, 5), np.zeros(4), 0.25)


def test_soft_nms_decay():
    kept = soft_nms([_proposal(0.0, 2.0, 1.0), _proposal(0.0, 1.0, 0.8)], 0.5, 0.001)
    assert [p.score for p in kept][0] == 1.0
    assert kept[1].score == pytest.approx(0.8 * math.exp(-0.5), abs=1e-12)


def test_soft_nms_keeps_disjoint_proposals():
    proposals = [_proposal(0.0, 1.0, 0.3), _proposal(2.0, 3.0, 0.9)]
    kept = soft_nms(proposals, 0.5, 0.001)
    assert kept == [proposals[1], proposals[0]]


def test_soft_nms_suppresses_duplicates():
    proposals = [_proposal(1.0, 2.0, 0.9), _proposal(1.0, 2.0, 0.9)]
    kept = soft_nms(proposals, 0.5, 0.9 * math.exp(-2.0) + 1e-6)
    assert len(kept) == 1


def test_soft_nms_ties_prefer_earlier_start():
    proposals = [_proposal(3.0, 4.0, 0.5), _proposal(1.0, 2.0, 0.5)]
    kept = soft_nms(proposals, 0.5, 0.001)
    assert [p.t_start for p in kept] == [1.0, 3.0]


def test_soft_nms_never_increases_scores():
    rng = np.random.default_rng(1)
    starts = rng.uniform(0, 10, size=20)
    proposals = [
        _proposal(float(s), float(s + rng.uniform(0.5, 3)), float(rng.uniform()))
        for s in starts
    ]
    kept = soft_nms(proposals, 0.5, 0.001)
    original = {(p.t_start, p.t_end): p.score for p in proposals}
    for proposal in kept:
        assert proposal.score <= original[(proposal.t_start, proposal.t_end)]


def test_soft_nms_never_raises_negative_scores():
    proposals = [_proposal(1.0, 2.0, -0.5), _proposal(1.0, 2.0, -0.6)]
    kept = soft_nms(proposals, 0.5, -10.0)
    assert [p.score for p in kept] == [-0.5, -0.6]


def test_soft_nms_never_increases_mixed_sign_scores():
    rng = np.random.default_rng(4)
    starts = rng.uniform(0, 10, size=30)
    proposals = [
        _proposal(float(s), float(s + rng.uniform(0.5, 3)), float(rng.uniform(-1, 1)))
        for s in starts
    ]
    original = {(p.t_start, p.t_end): p.score for p in proposals}
    for floor in (-10.0, 0.0, 0.001):
        for proposal in soft_nms(proposals, 0.5, floor):
            assert proposal.score <= original[(proposal.t_start, proposal.t_end)]
            assert proposal.score >= floor


def test_soft_nms_floor_applies_to_the_first_pick():
    assert soft_nms([_proposal(0.0, 1.0, 0.0005)], 0.5, 0.001) == []
    kept = soft_nms([_proposal(0.0, 1.0, -0.2), _proposal(2.0, 3.0, 0.4)], 0.5, 0.0)
    assert [p.score for p in kept] == [0.4]


def test_nms_floor_must_not_be_negative():
    with pytest.raises(p.ValidationError, match="nms_floor"):
        InferConfig(nms_floor=-0.5)


def test_suppress_is_per_class():
    proposals = [_proposal(0.0, 1.0, 0.9, class_id=0), _proposal(0.0, 1.0, 0.8, class_id=1)]
    kept = suppress(proposals, InferConfig())
    assert [(p.class_id, p.score) for p in kept] == [(0, 0.9), (1, 0.8)]


def test_video_score_weight_is_added():
    scores = np.zeros((6, 2))
    scores[2:4, 0] = 1.0
    cfg = InferConfig(video_threshold=0.5, video_score_weight=0.5)
    _, candidates, _ = localize("v", scores, np.array([0.8, 0.2]), 1.0, cfg)
    assert [c.score for c in candidates] == [pytest.approx(1.0 + 0.4)]


def test_step_function_activations_reproduce_ground_truth():
    duration = 0.5
    length = 30
    layout = [(0, 3, 9), (1, 12, 20), (0, 24, 28)]
    scores = np.zeros((length, 3))
    gts = []
    for class_id, start, stop in layout:
        scores[start:stop, class_id] = 1.0
        gts.append(GroundTruthSegment("v", class_id, start * duration, stop * duration))
    classes, _, proposals = localize(
        "v", scores, np.array([0.5, 0.5, 0.0]), duration, InferConfig()
    )
    assert classes == [0, 1]
    assert sorted((p.class_id, p.t_start, p.t_end) for p in proposals) == sorted(
        (gt.class_id, gt.t_start, gt.t_end) for gt in gts
    )
    report = map_ladder(proposals, gts, [0.1, 0.5, 0.9, 1.0], num_classes=3)
    assert report.maps == [1.0, 1.0, 1.0, 1.0]


def _model(baseline="mil"):
    spec = ModelSpec(
        feature_dim=6, num_classes=3, config=ModelConfig(baseline=baseline, embed_dim=5, proj_dim=2)
    )
    return Model.initialize(spec, 0)


def _video(length=12):
    features = np.random.default_rng(2).normal(size=(length, 6))
    return FeatureSequence("test-0000", features, np.array([1.0, 0.0, 0.0]), 0.64)


def test_uniform_model_uses_the_fallback_class():
    model = _model()
    model.params["classifier.weight"].data[...] = 0.0
    result = run_inference(model, _video(), InferConfig(video_threshold=0.5))
    np.testing.assert_allclose(result.scores, np.full((12, 3), 1 / 3))
    assert result.classes == [0]
    assert [(p.t_start, p.t_end) for p in result.proposals] == [(0.0, 12 * 0.64)]


@pytest.mark.parametrize("baseline", ["mil", "attention"])
def test_run_inference_is_deterministic(baseline):
    model = _model(baseline)
    first = run_inference(model, _video(), InferConfig())
    second = run_inference(model, _video(), InferConfig())
    assert first.proposals == second.proposals
    np.testing.assert_array_equal(first.scores, second.scores)
    assert first.scores.shape == (12, 3)
    assert first.video_probs.shape == (3,)
    for proposal in first.proposals:
        assert 0 <= proposal.t_start < proposal.t_end <= 12 * 0.64 + 1e-9


def test_attention_modulation():
    model = _model("attention")
    modulated = run_inference(model, _video(), InferConfig())
    raw = run_inference(model, _video(), InferConfig(attention_modulation=False))
    np.testing.assert_array_equal(raw.scores, raw.probs[:, :3])
    assert (modulated.scores < raw.scores).all()


def test_proposals_csv():
    proposals = [
        _proposal(1.0, 2.5, 0.25, class_id=1, video_id="b"),
        _proposal(0.0, 1.0, 0.5, class_id=0, video_id="b"),
        _proposal(3.0, 4.0, 0.125, class_id=2, video_id="a"),
    ]
    assert proposals_to_csv(proposals) == (
        "video_id,class_id,t_start,t_end,score\n"
        "a,2,3.000000,4.000000,0.125000\n"
        "b,0,0.000000,1.000000,0.500000\n"
        "b,1,1.000000,2.500000,0.250000\n"
    )
    assert [p.video_id for p in sort_proposals(proposals)] == ["a", "b", "b"]


def test_run_inference_generates_proposals_per_selected_class(monkeypatch):
    calls = []

    def recording(scores, thresholds, snippet_duration):
        calls.append((scores.shape, list(thresholds), snippet_duration))
        return generate_proposals(scores, thresholds, snippet_duration)

    monkeypatch.setattr(ni, "generate_proposals", recording)
    cfg = InferConfig(video_threshold=0.0)
    result = run_inference(_model(), _video(), cfg)
    assert result.classes == [0, 1, 2]
    assert calls == [((12,), cfg.thresholds, 0.64)] * 3
    for candidate in result.candidates:
        assert candidate.t_start / 0.64 == pytest.approx(round(candidate.t_start / 0.64))


@pytest.mark.parametrize(
    "interval, duration, expected",
    [
        ((0.0, 0.64), 0.64, (0, 1)),
        ((3 * 0.64, 7 * 0.64), 0.64, (3, 7)),
        ((1.5, 3.0), 0.5, (3, 6)),
    ],
)
def test_interval_to_run(interval, duration, expected):
    assert interval_to_run(interval, duration) == expected
