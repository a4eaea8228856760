"""Focal classification, bin-based regression and the combined objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .geometry import BINNED, RESIDUAL_DIMS, BinConfig, BinEncoding
from .numerics import DiffArray, DimensionError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_sd: float = 1.0
    bins: BinConfig = field(default_factory=BinConfig)

    def __post_init__(self):
        # alpha = 1 is admitted so the focal loss can reduce to cross-entropy
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lambda_sd < 0:
            raise ValueError(f"lambda_sd must be >= 0, got {self.lambda_sd}")


def focal_terms(probs, targets, alpha: float, gamma: float) -> DiffArray:
    """Per-element two-branch focal loss.

    Positives: ``-alpha (1-p)^gamma log p``; negatives:
    ``-(1-alpha) p^gamma log(1-p)``.  Probabilities are clipped to
    ``[1e-7, 1 - 1e-7]`` first.
    """
    p = nx.as_diff(probs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionError(f"targets {t.shape} do not match probabilities {p.shape}")
    if np.any((t != 0.0) & (t != 1.0)):
        raise ValueError("targets must be binary")
    p = nx.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    q = nx.sub(nx.const(np.ones(p.shape)), p)
    pos = nx.scale(nx.mul(nx.power(q, gamma), nx.log(p)), -alpha)
    neg = nx.scale(nx.mul(nx.power(p, gamma), nx.log(q)), -(1.0 - alpha))
    return nx.add(nx.mul(pos, nx.const(t)), nx.mul(neg, nx.const(1.0 - t)))


def focal_cls_loss(probs, targets, config: LossConfig = LossConfig()) -> DiffArray:
    """Mean focal loss over all elements."""
    return nx.mean(focal_terms(probs, targets, config.alpha, config.gamma))


def cross_entropy(logits, target_index) -> DiffArray:
    """Mean softmax cross-entropy of B x K logits against B integer targets."""
    z = nx.as_diff(logits)
    if z.ndim == 1:
        z = nx.reshape(z, (1, z.shape[0]))
    idx = np.atleast_1d(np.asarray(target_index, dtype=np.intp))
    b, k = z.shape
    if idx.shape != (b,):
        raise DimensionError(f"{idx.shape[0]} targets for {b} rows of logits")
    if np.any(idx < 0) or np.any(idx >= k):
        raise DimensionError(f"target bin outside [0, {k})")
    picked = nx.take(nx.reshape(z, (b * k,)), np.arange(b) * k + idx)
    return nx.mean(nx.sub(nx.logsumexp(z, axis=1), picked))


def smooth_l1_loss(pred, target) -> DiffArray:
    """Mean elementwise smooth-L1 of ``pred - target``."""
    p = nx.as_diff(pred)
    diff = nx.sub(p, nx.const(np.asarray(target, dtype=np.float64).reshape(p.shape)))
    return nx.mean(nx.smooth_l1(diff))


def bin_reg_loss(
    pred_bin_logits: Mapping[str, DiffArray],
    pred_residuals,
    target: BinEncoding | Sequence[BinEncoding],
) -> DiffArray:
    """Bin cross-entropy over x, z, theta plus smooth-L1 over all seven residuals.

    Logits per binned dimension are B x bin_count (or a single row), residual
    predictions B x 7 in (x, y, z, h, w, l, theta) order.  Each term is
    averaged over the batch; terms are summed over dimensions.
    """
    targets = [target] if isinstance(target, BinEncoding) else list(target)
    b = len(targets)
    res = nx.as_diff(pred_residuals)
    if res.ndim == 1:
        res = nx.reshape(res, (1, res.shape[0]))
    if res.shape != (b, len(RESIDUAL_DIMS)):
        raise DimensionError(f"residual predictions {res.shape}, expected ({b}, 7)")
    total = None
    for dim in BINNED:
        if dim not in pred_bin_logits:
            raise DimensionError(f"missing bin logits for {dim}")
        logits = nx.as_diff(pred_bin_logits[dim])
        if logits.ndim == 1:
            logits = nx.reshape(logits, (1, logits.shape[0]))
        count = targets[0].bin_count[dim]
        if logits.shape != (b, count):
            raise DimensionError(f"{dim} logits {logits.shape}, expected ({b}, {count})")
        ce = cross_entropy(logits, [t.bin_index[dim] for t in targets])
        total = ce if total is None else nx.add(total, ce)
    goal = np.array([[t.residual[d] for d in RESIDUAL_DIMS] for t in targets])
    # mean over the batch, summed over the seven dimensions
    reg = nx.scale(smooth_l1_loss(res, goal), float(len(RESIDUAL_DIMS)))
    return nx.add(total, reg)


def total_loss(rpn_parts, rcnn_parts, sd_loss, config: LossConfig = LossConfig()) -> DiffArray:
    """``L_rpn + L_rcnn + lambda * L_SD``; each stage loss may be a (cls, reg) pair."""

    def collapse(parts) -> DiffArray:
        if isinstance(parts, (DiffArray, int, float, np.floating)):
            parts = [parts]
        acc = None
        for p in parts:
            p = nx.as_diff(p)
            if p.size != 1:
                raise DimensionError(f"loss parts must be scalars, got shape {p.shape}")
            p = nx.reshape(p, (1,))
            acc = p if acc is None else nx.add(acc, p)
        return acc if acc is not None else nx.const([0.0])

    sd = collapse(sd_loss)
    return nx.add(nx.add(collapse(rpn_parts), collapse(rcnn_parts)), nx.scale(sd, config.lambda_sd))
