"""NMS-free set-based detection: matching, match labels, selection, baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3D, iou, iou_matrix
from .losses import LossConfig, focal_cls_loss
from .numerics import ContractError, DiffArray

DEFAULT_BOX_CAP = 64


@dataclass(frozen=True)
class PredictedBox:
    box: Box3D
    cls_conf: float
    match_score: float = 0.0

    def __post_init__(self):
        for name in ("cls_conf", "match_score"):
            val = float(getattr(self, name))
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
            object.__setattr__(self, name, val)


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]  # (gt_index, pred_index), sorted by gt
    match_labels: np.ndarray
    total_cost: float

    @property
    def positives(self) -> list[int]:
        return sorted(p for _, p in self.assignment)


def match_cost(pred: PredictedBox, gt: Box3D, iou_kind: str = "3d") -> float:
    """``-log(c * IoU)``; ``math.inf`` when the product is zero."""
    q = pred.cls_conf * iou(pred.box, gt, iou_kind)
    return math.inf if q <= 0.0 else -math.log(q)


def cost_matrix(preds: Sequence[PredictedBox], gts: Sequence[Box3D], iou_kind: str = "3d") -> np.ndarray:
    """N_gt x M matrix of match costs."""
    q = iou_matrix(gts, [p.box for p in preds], iou_kind)
    q = q * np.array([p.cls_conf for p in preds])[None, :]
    with np.errstate(divide="ignore"):
        return np.where(q > 0.0, -np.log(np.where(q > 0.0, q, 1.0)), np.inf)


def _assignment_cost(cost: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    total = 0.0
    for r, c in sorted(pairs):
        total += float(cost[r, c])
    return total


def hungarian(cost) -> MatchResult:
    """Minimum-cost maximum matching of rows (ground truth) into columns (predictions).

    Infinite entries are forbidden edges.  Internally they become a finite
    penalty large enough that fewer forbidden edges always wins, and any
    forbidden edge left in the optimum is dropped afterwards.  Shortest
    augmenting paths with row/column potentials, O(N^2 M); ties go to the
    lowest column index.
    """
    C = np.array(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {C.shape}")
    n, m = C.shape
    if n > m:
        raise ContractError(f"more ground-truth rows ({n}) than predictions ({m})")
    if np.any(np.isnan(C)) or np.any(C == -np.inf):
        raise ContractError("cost matrix contains NaN or -inf")
    if n == 0:
        return MatchResult([], np.zeros(m, dtype=np.int64), 0.0)
    finite = np.isfinite(C)
    span = float(np.max(np.abs(C[finite]))) if finite.any() else 0.0
    penalty = 4.0 * (n + 1) * (span + 1.0)
    work = np.where(finite, C, penalty)

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)  # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = work[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j] > 0]
    pairs = sorted((r, c) for r, c in pairs if finite[r, c])
    labels = np.zeros(m, dtype=np.int64)
    for _, c in pairs:
        labels[c] = 1
    return MatchResult(pairs, labels, _assignment_cost(C, pairs))


def match_sets(preds: Sequence[PredictedBox], gts: Sequence[Box3D], iou_kind: str = "3d") -> MatchResult:
    """Optimal one-to-one assignment of ground truth to predictions under the match cost."""
    if len(preds) < len(gts):
        raise ContractError(f"need at least as many predictions ({len(preds)}) as ground truth ({len(gts)})")
    if not gts:
        return MatchResult([], np.zeros(len(preds), dtype=np.int64), 0.0)
    return hungarian(cost_matrix(preds, gts, iou_kind))


def match_head_loss(match_scores: DiffArray, labels, config: LossConfig = LossConfig()) -> DiffArray:
    """Focal loss between match scores and the 0/1 match labels (mean over boxes)."""
    return focal_cls_loss(match_scores, labels, config)


def select_test_time(preds: Sequence[PredictedBox], n: int) -> list[PredictedBox]:
    """The ``n`` boxes with the highest match score, ties broken by lower index."""
    if n > len(preds):
        raise ContractError(f"cannot select {n} boxes from {len(preds)}")
    if n < 0:
        raise ContractError("selection count must be non-negative")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].match_score, i))
    return [preds[i] for i in order[:n]]


def select_indices(scores: Sequence[float], n: int) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:n]


def nms_indices(
    boxes: Sequence[Box3D],
    scores: Sequence[float],
    iou_threshold: float,
    iou_kind: str = "3d",
    overlaps: np.ndarray | None = None,
) -> list[int]:
    """Greedy NMS; returns kept indices in selection order.

    ``overlaps`` may supply a precomputed M x M IoU matrix.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ContractError(f"IoU threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    suppressed = np.zeros(len(boxes), dtype=bool)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if suppressed[j] or j == i or j in kept:
                continue
            ov = overlaps[i, j] if overlaps is not None else iou(boxes[i], boxes[j], iou_kind)
            if ov > iou_threshold:
                suppressed[j] = True
    return kept


def nms_baseline(
    preds: Sequence[PredictedBox], iou_threshold: float, score: str = "cls", iou_kind: str = "3d"
) -> list[PredictedBox]:
    if score not in ("cls", "match"):
        raise ContractError(f"score must be 'cls' or 'match', got {score!r}")
    vals = [p.cls_conf if score == "cls" else p.match_score for p in preds]
    return [preds[i] for i in nms_indices([p.box for p in preds], vals, iou_threshold, iou_kind)]


def consistency_ratio(
    preds: Sequence[PredictedBox],
    gts: Sequence[Box3D],
    tau: float = 0.7,
    v: float = 0.5,
    iou_kind: str = "3d",
) -> float:
    """Share of positive boxes (best ground-truth IoU > tau) whose confidence exceeds v.

    Vacuously 1 when there are no positives.
    """
    if not (0.0 <= tau <= 1.0 and 0.0 <= v <= 1.0):
        raise ContractError("tau and v must lie in [0, 1]")
    if not preds or not gts:
        return 1.0
    best = iou_matrix([p.box for p in preds], gts, iou_kind).max(axis=1)
    conf = np.array([p.cls_conf for p in preds])
    return ratio_from_overlaps(conf, best, tau, v)


def ratio_from_overlaps(conf: np.ndarray, best_iou: np.ndarray, tau: float, v: float) -> float:
    pos = best_iou > tau
    if not pos.any():
        return 1.0
    return float(np.count_nonzero(conf[pos] > v)) / float(np.count_nonzero(pos))
