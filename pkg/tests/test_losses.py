from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedet import numerics as nx
from fusedet.geometry import BinConfig, Box3D, encode_bins
from fusedet.losses import (
    LossConfig,
    bin_reg_loss,
    cross_entropy,
    focal_cls_loss,
    smooth_l1_loss,
    total_loss,
)
from fusedet.numerics import DimensionError
from fusedet.setdet import match_head_loss


def test_focal_closed_form_at_half():
    expected = 0.25 * 0.25 * math.log(2)
    assert focal_cls_loss([0.5], [1]).item() == pytest.approx(expected, abs=1e-12)
    assert match_head_loss(nx.const([0.5, 0.5]), [1, 1]).item() == pytest.approx(expected, abs=1e-12)
    assert abs(expected - 0.043322) < 1e-6


def test_focal_perfect_scores_are_near_zero():
    assert focal_cls_loss([1.0 - 1e-7], [1]).item() < 1e-12
    assert focal_cls_loss([1.0, 0.0], [1, 0]).item() < 1e-12


def test_focal_reduces_to_cross_entropy():
    p = np.array([0.2, 0.7, 0.9, 0.4])
    t = np.array([1, 0, 1, 0])
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    ce_cfg = LossConfig(alpha=1.0, gamma=0.0)
    pos = t == 1
    assert focal_cls_loss(p[pos], t[pos], ce_cfg).item() == pytest.approx(bce[pos].mean(), abs=1e-12)
    half = LossConfig(alpha=0.5, gamma=0.0)
    assert focal_cls_loss(p, t, half).item() == pytest.approx(0.5 * bce.mean(), abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LossConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        focal_cls_loss([0.5], [0.5])
    with pytest.raises(DimensionError):
        focal_cls_loss([0.5, 0.5], [1])


def test_smooth_l1_piecewise():
    assert smooth_l1_loss([0.0], [0.0]).item() == 0.0
    assert smooth_l1_loss([2.0], [0.0]).item() == 1.5
    assert smooth_l1_loss([0.5, -3.0], [0.0, 0.0]).item() == (0.125 + 2.5) / 2


def test_cross_entropy_uniform_logits():
    assert cross_entropy(np.zeros(12), 3).item() == pytest.approx(math.log(12), abs=1e-12)
    assert cross_entropy(np.full((4, 12), 7.5), [0, 1, 2, 11]).item() == pytest.approx(math.log(12), abs=1e-12)
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros(12), 12)


def _one_hot(count, index, scale=60.0):
    z = np.zeros(count)
    z[index] = scale
    return z


def test_bin_loss_perfect_and_uniform():
    cfg = BinConfig()
    enc = encode_bins(Box3D(1.1, 0.4, -0.3, 1.6, 1.7, 4.0, 0.7), np.zeros(3), cfg)
    res = [enc.residual[d] for d in ("x", "y", "z", "h", "w", "l", "theta")]
    perfect = {d: _one_hot(enc.bin_count[d], enc.bin_index[d]) for d in ("x", "z", "theta")}
    assert bin_reg_loss(perfect, res, enc).item() < 1e-20
    uniform = {d: np.zeros(enc.bin_count[d]) for d in ("x", "z", "theta")}
    expected = 2 * math.log(12) + math.log(cfg.theta_bins)
    assert bin_reg_loss(uniform, res, enc).item() == pytest.approx(expected, abs=1e-12)
    off = list(res)
    off[3] += 2.0
    assert bin_reg_loss(perfect, off, enc).item() == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(DimensionError):
        bin_reg_loss(perfect, res[:6], enc)
    with pytest.raises(DimensionError):
        bin_reg_loss({"x": perfect["x"], "z": perfect["z"]}, res, enc)


def test_total_loss_examples():
    assert total_loss(0.0, 0.0, 0.0).item() == 0.0
    assert total_loss(1.0, 2.0, 0.5).item() == 3.5
    assert total_loss((0.5, 0.5), [1.5, 0.5], 0.5).item() == 3.5
    assert total_loss(1.0, 2.0, 9.0, LossConfig(lambda_sd=0.0)).item() == 3.0


parts = st.floats(0.0, 100.0)


@settings(max_examples=60, deadline=None)
@given(parts, parts, parts, parts, st.floats(0.0, 5.0))
def test_total_loss_linear_in_sd_and_nonnegative(rpn, rcnn, sd, sd2, lam):
    cfg = LossConfig(lambda_sd=lam)
    a = total_loss(rpn, rcnn, sd, cfg).item()
    b = total_loss(rpn, rcnn, sd2, cfg).item()
    assert a >= 0.0
    assert a - b == pytest.approx(lam * (sd - sd2), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.integers(0, 255))
def test_focal_is_nonnegative(probs, mask):
    t = [(mask >> i) & 1 for i in range(len(probs))]
    assert focal_cls_loss(probs, t).item() >= 0.0
