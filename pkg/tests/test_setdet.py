from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedet.geometry import Box3D, iou
from fusedet.numerics import ContractError
from fusedet.oracles import exhaustive_assignment, reference_assignment, subset_dp_assignment
from fusedet.setdet import (
    PredictedBox,
    consistency_ratio,
    cost_matrix,
    hungarian,
    match_cost,
    match_sets,
    nms_baseline,
    nms_indices,
    select_test_time,
)

from helpers import brute_force_min_cost, nearby_box, random_box


def box(x, z=10.0, theta=0.0, size=(1.5, 1.6, 3.9)):
    return Box3D(x, 1.0, z, *size, theta)


def test_match_cost_examples():
    b = box(0.0)
    assert match_cost(PredictedBox(b, 1.0), b) == 0.0
    assert match_cost(PredictedBox(b, 0.0), b) == math.inf
    assert match_cost(PredictedBox(box(50.0), 1.0), b) == math.inf
    unit = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    inner = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 0.5, 0.0)
    assert iou(unit, inner) == pytest.approx(0.5, abs=1e-12)
    assert match_cost(PredictedBox(inner, 0.5), unit) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_hungarian_examples():
    res = hungarian(np.ones((3, 3)) - np.eye(3))
    assert res.assignment == [(0, 0), (1, 1), (2, 2)] and res.total_cost == 0.0
    res = hungarian([[1.0, 2.0], [2.0, 1.0]])
    assert res.assignment == [(0, 0), (1, 1)] and res.total_cost == 2.0
    res = hungarian([[math.inf, 1.0, 5.0], [math.inf, 2.0, math.inf]])
    assert res.assignment == [(0, 2), (1, 1)] and res.total_cost == 7.0
    res = hungarian([[math.inf, math.inf], [1.0, math.inf]])
    assert res.assignment == [(1, 0)]
    assert res.match_labels.tolist() == [1, 0]


def test_hungarian_contract_errors():
    with pytest.raises(ContractError):
        hungarian(np.ones((3, 2)))
    with pytest.raises(ContractError):
        hungarian([[np.nan, 1.0]])
    with pytest.raises(ContractError):
        hungarian([[-np.inf, 1.0]])
    with pytest.raises(ContractError):
        match_sets([PredictedBox(box(0.0), 0.5)], [box(0.0), box(5.0)])


def test_hungarian_random_6x9_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cost = rng.uniform(0, 10, (6, 9))
        cost[rng.random((6, 9)) < 0.3] = math.inf
        res = hungarian(cost)
        count, total = brute_force_min_cost(cost)
        assert len(res.assignment) == count
        assert res.total_cost == pytest.approx(total, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(0, 2))
def test_oracles_agree(seed, n, extra):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 5, (n, n + extra))
    cost[rng.random(cost.shape) < 0.25] = math.inf
    pairs_h = hungarian(cost)
    pairs_e, cost_e = exhaustive_assignment(cost)
    pairs_d, cost_d = subset_dp_assignment(cost)
    assert len(pairs_e) == len(pairs_d) == len(pairs_h.assignment)
    assert cost_e == pytest.approx(cost_d, abs=1e-12)
    assert pairs_h.total_cost == pytest.approx(cost_e, abs=1e-12)
    assert reference_assignment(cost)[1] == cost_e


def test_match_sets_copies_and_junk():
    gts = [box(-6.0), box(0.0, theta=0.4), box(6.0, z=20.0)]
    junk = [PredictedBox(box(40.0 + 5 * i, z=60.0), 0.1) for i in range(4)]
    copies = [PredictedBox(g, 1.0) for g in gts]
    preds = junk[:2] + [copies[2], copies[0]] + junk[2:] + [copies[1]]
    res = match_sets(preds, gts)
    assert res.assignment == [(0, 3), (1, 6), (2, 2)]
    assert res.total_cost == pytest.approx(0.0, abs=1e-12)
    assert res.match_labels.tolist() == [0, 0, 1, 1, 0, 0, 1]
    empty = match_sets(preds, [])
    assert empty.assignment == [] and not empty.match_labels.any() and empty.total_cost == 0.0


def test_match_sets_graded_matches_brute_force():
    rng = np.random.default_rng(2)
    gts = [random_box(rng) for _ in range(3)]
    preds = [PredictedBox(nearby_box(rng, gts[i % 3]), c) for i, c in enumerate((0.9, 0.7, 0.5, 0.3, 0.8))]
    res = match_sets(preds, gts)
    count, total = brute_force_min_cost(cost_matrix(preds, gts))
    assert len(res.assignment) == count and res.total_cost == pytest.approx(total, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_scaling_log_costs_preserves_argmin(seed, k):
    rng = np.random.default_rng(seed)
    gts = [random_box(rng, 2.0) for _ in range(3)]
    preds = [PredictedBox(nearby_box(rng, gts[i % 3]), rng.uniform(0.05, 1.0)) for i in range(6)]
    cost = cost_matrix(preds, gts)
    assert hungarian(k * cost).assignment == hungarian(cost).assignment


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_confidence_power_preserves_argmin_on_exact_copies(seed, k):
    # with IoU in {0, 1} the whole cost is -log c, so c -> c^k scales it by k
    rng = np.random.default_rng(seed)
    gts = [box(6.0 * i) for i in range(3)]
    preds = [PredictedBox(gts[rng.integers(3)], rng.uniform(0.05, 1.0)) for _ in range(7)]
    powered = [PredictedBox(p.box, p.cls_conf**k) for p in preds]
    assert match_sets(powered, gts).assignment == match_sets(preds, gts).assignment


def test_select_test_time_examples():
    preds = [PredictedBox(box(float(i)), 0.5, s) for i, s in enumerate((0.2, 0.9, 0.5, 0.9, 0.1))]
    assert select_test_time(preds, 5) == [preds[i] for i in (1, 3, 2, 0, 4)]
    assert select_test_time(preds, 2) == [preds[1], preds[3]]  # tie goes to the lower index
    desc = [PredictedBox(box(float(i)), 0.5, 1.0 - i / 10) for i in range(6)]
    assert select_test_time(desc, 3) == desc[:3]
    with pytest.raises(ContractError):
        select_test_time(preds, 6)


def test_select_test_time_matches_sort_oracle():
    rng = np.random.default_rng(3)
    scores = rng.random(30)
    preds = [PredictedBox(box(float(i)), 0.5, s) for i, s in enumerate(scores)]
    expected = [preds[i] for i in np.argsort(-scores, kind="stable")[:11]]
    assert select_test_time(preds, 11) == expected


def test_nms_examples():
    single = [PredictedBox(box(0.0), 0.4)]
    assert nms_baseline(single, 0.7) == single
    twins = [PredictedBox(box(0.0), 0.4), PredictedBox(box(0.0), 0.8)]
    assert nms_baseline(twins, 0.7) == [twins[1]]
    with pytest.raises(ContractError):
        nms_indices([box(0.0)], [1.0], 1.5)


def quadratic_nms(boxes, scores, thr):
    alive = list(range(len(boxes)))
    kept = []
    while alive:
        best = max(alive, key=lambda i: (scores[i], -i))
        kept.append(best)
        alive = [j for j in alive if j != best and iou(boxes[best], boxes[j]) <= thr]
    return kept


def test_nms_crafted_scene_matches_reference():
    boxes = [box(0.0), box(0.3), box(0.6, theta=0.2), box(5.0), box(5.2)]
    scores = [0.9, 0.95, 0.5, 0.6, 0.7]
    assert nms_indices(boxes, scores, 0.3) == quadratic_nms(boxes, scores, 0.3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        base = random_box(rng)
        cand = [nearby_box(rng, base) for _ in range(12)]
        sc = list(rng.random(12))
        for thr in (0.1, 0.5, 0.7):
            kept = nms_indices(cand, sc, thr)
            assert kept == quadratic_nms(cand, sc, thr)
            for i in kept:
                for j in kept:
                    assert i == j or iou(cand[i], cand[j]) <= thr


def test_consistency_ratio_examples():
    gts = [box(-9.0), box(-3.0), box(3.0), box(9.0)]
    assert consistency_ratio([PredictedBox(g, 1.0) for g in gts], gts, v=0.5) == 1.0
    assert consistency_ratio([PredictedBox(g, 0.0) for g in gts], gts, v=0.01) == 0.0
    graded = [PredictedBox(g, c) for g, c in zip(gts, (0.9, 0.8, 0.3, 0.2))]
    assert consistency_ratio(graded + [PredictedBox(box(40.0), 0.05)], gts, v=0.5) == 0.5
    assert consistency_ratio([PredictedBox(box(40.0), 0.05)], gts) == 1.0  # no positives
    with pytest.raises(ContractError):
        consistency_ratio(graded, gts, v=1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_consistency_ratio_non_increasing_in_v(seed):
    rng = np.random.default_rng(seed)
    gts = [random_box(rng) for _ in range(3)]
    preds = [PredictedBox(nearby_box(rng, gts[i % 3]), rng.random()) for i in range(15)]
    preds += [PredictedBox(g, rng.random()) for g in gts]
    ratios = [consistency_ratio(preds, gts, 0.7, v) for v in np.linspace(0, 1, 11)]
    assert all(b <= a for a, b in zip(ratios, ratios[1:]))
    assert all(0.0 <= r <= 1.0 for r in ratios)
