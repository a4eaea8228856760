"""Desk-scale experiments behind the command-line tools.

No detector is trained here.  Candidate boxes come from a simulator that
perturbs ground truth (plus uniform false positives) and attaches a noisy
classification confidence ``c`` and a noisy IoU estimate ``q_hat``.  The match
head is a five-feature logistic model fitted with the focal match-head loss
against Hungarian labels, which is enough to study how the selectors behave.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .cdmp import FeatureGraph, PropagationParams, propagate
from .geometry import Box3D, iou_matrix, project_points
from .oracles import reference_assignment
from .rng import make_rng
from .scene import GROUND_Y, SceneConfig, SceneSample, generate_scene
from .setdet import (
    DEFAULT_BOX_CAP,
    PredictedBox,
    hungarian,
    cost_matrix,
    match_head_loss,
    nms_indices,
    select_indices,
)

# stream tags for make_rng(seed, tag, index)
_EVAL, _TRAIN, _CANDS, _COUNT, _PARAMS, _NODES = range(6)


def run_ordered(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``items``; results come back in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def scene_seed(seed: int, tag: int, index: int) -> int:
    return int(make_rng(seed, tag, index).integers(2**31))


def seeded_scene(seed: int, tag: int, index: int, min_objects: int = 1, max_objects: int = 8,
                 config: SceneConfig | None = None) -> SceneSample:
    """A synthetic scene whose object count is drawn from its own stream."""
    base = config or SceneConfig()
    count = int(make_rng(seed, _COUNT, tag, index).integers(min_objects, max_objects + 1))
    cfg = SceneConfig(**{**base.__dict__, "objects": count})
    return generate_scene(cfg, seed=scene_seed(seed, tag, index))


# -- candidate simulator ---------------------------------------------------------


@dataclass
class Candidates:
    boxes: list[Box3D]
    cls_conf: np.ndarray
    quality: np.ndarray  # noisy IoU estimate q_hat
    best_iou: np.ndarray  # true max IoU with any ground truth
    pair_iou: np.ndarray  # M x M

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class SimConfig:
    count: int = DEFAULT_BOX_CAP
    fp_rate: float = 0.3
    spread: tuple[float, float] = (0.02, 0.4)
    conf_noise: float = 1.0
    quality_noise: float = 0.05
    iou_kind: str = "3d"
    oracle: bool = False


def _perturb(gt: Box3D, s: float, rng: np.random.Generator) -> Box3D:
    size = np.exp(rng.normal(0.0, s * 0.3, 3))
    return Box3D(
        gt.x + rng.normal(0.0, s * gt.l * 0.5),
        gt.y + rng.normal(0.0, s * gt.h * 0.3),
        gt.z + rng.normal(0.0, s * gt.l * 0.5),
        gt.h * size[0], gt.w * size[1], gt.l * size[2],
        gt.theta + rng.normal(0.0, s * 0.5),
    )


def _false_positive(rng: np.random.Generator) -> Box3D:
    z = rng.uniform(8.0, 50.0)
    return Box3D(rng.uniform(-0.8 * z, 0.8 * z), GROUND_Y - 0.75, z, 1.5, 1.6, 3.9, rng.uniform(-math.pi, math.pi))


def simulate_candidates(gts: Sequence[Box3D], rng: np.random.Generator, config: SimConfig = SimConfig()) -> Candidates:
    """Candidates cycle through the ground truth; each is a false positive with prob ``fp_rate``.

    ``c = sigmoid(-1.5 + 3 [IoU > 0] + (IoU - 0.5) + noise)``.  In oracle mode
    candidates are exact copies of the ground truth (c = 1) padded with false
    positives at c = 0.
    """
    boxes: list[Box3D] = []
    for k in range(config.count):
        if config.oracle:
            boxes.append(gts[k] if k < len(gts) else _false_positive(rng))
        elif not gts or rng.random() < config.fp_rate:
            boxes.append(_false_positive(rng))
        else:
            boxes.append(_perturb(gts[k % len(gts)], rng.uniform(*config.spread), rng))
    m = len(boxes)
    best = iou_matrix(boxes, gts, config.iou_kind).max(axis=1) if gts else np.zeros(m)
    if config.oracle:
        conf = (np.arange(m) < len(gts)).astype(np.float64)
        quality = best.copy()
    else:
        logit = -1.5 + 3.0 * (best > 0.0) + (best - 0.5) + rng.normal(0.0, config.conf_noise, m)
        conf = 1.0 / (1.0 + np.exp(-logit))
        quality = np.clip(best + rng.normal(0.0, config.quality_noise, m), 0.0, 1.0)
    pair = iou_matrix(boxes, boxes, config.iou_kind)
    return Candidates(boxes, conf, quality, best, pair)


# -- match head --------------------------------------------------------------------

NEIGHBOUR_IOU = 0.3


def match_features(cands: Candidates) -> np.ndarray:
    """Per-candidate ``[logit c, q_hat, is_local_max, is_local_max * q_hat, 1]``.

    A candidate is a local maximum when its ``c * q_hat`` is at least that of
    every candidate overlapping it by more than 0.3 IoU.
    """
    c = np.clip(cands.cls_conf, 1e-6, 1.0 - 1e-6)
    s = c * cands.quality
    near = cands.pair_iou > NEIGHBOUR_IOU
    np.fill_diagonal(near, False)
    rival = np.where(near, s[None, :], -np.inf).max(axis=1)
    local_max = (s >= rival).astype(np.float64)
    return np.column_stack([np.log(c / (1.0 - c)), cands.quality, local_max, local_max * cands.quality, np.ones(len(c))])


@dataclass
class MatchHead:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Logistic score, gated to zero for candidates that are not local maxima.

        The gate stands in for the duplicate suppression a trained set-based
        head learns from one-to-one labels; the logistic part is fitted on
        all candidates.
        """
        return features[:, 2] / (1.0 + np.exp(-(features @ self.theta)))

    @staticmethod
    def loss_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        tape = nx.Tape()
        w = tape.variable(theta)
        probs = nx.sigmoid(nx.reshape(nx.matmul(nx.const(X), nx.reshape(w, (len(theta), 1))), (len(X),)))
        loss = match_head_loss(probs, y)
        tape.backward(loss)
        return loss.item(), w.grad.copy()

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> MatchHead:
        from scipy.optimize import minimize

        res = minimize(cls.loss_and_grad, np.zeros(X.shape[1]), args=(X, y), jac=True, method="BFGS")
        return cls(np.asarray(res.x))


def _training_rows(args) -> tuple[np.ndarray, np.ndarray]:
    seed, index, sim = args
    sc = seeded_scene(seed, _TRAIN, index)
    cands = simulate_candidates(sc.gt_boxes, make_rng(seed, _CANDS, _TRAIN, index), sim)
    preds = [PredictedBox(b, float(c)) for b, c in zip(cands.boxes, cands.cls_conf)]
    labels = hungarian(cost_matrix(preds, sc.gt_boxes, sim.iou_kind)).match_labels
    return match_features(cands), labels.astype(np.float64)


def train_match_head(seed: int, scenes: int = 20, sim: SimConfig = SimConfig(), workers: int = 1) -> MatchHead:
    rows = run_ordered(_training_rows, [(seed, i, sim) for i in range(scenes)], workers)
    return MatchHead.fit(np.vstack([r[0] for r in rows]), np.concatenate([r[1] for r in rows]))


# -- selector comparison -------------------------------------------------------------

SELECTORS = ("set_based", "nms_cls", "nms_iou")


@dataclass
class SelectorScene:
    index: int
    gt_count: int
    kept: dict[str, tuple[np.ndarray, np.ndarray]]  # selector -> (best IoU, confidence) of kept boxes
    nms_invariant: bool


def compare_scene(args) -> SelectorScene:
    """Run the three selectors on one scene.

    Confidence reported for R: the raw ``c`` for the set-based and cls-NMS
    selectors, the IoU-aware ``c * q_hat`` for the IoU-trained NMS one.
    """
    seed, index, sim, theta, nms_thr, scene_fn = args
    sc = scene_fn(index) if scene_fn is not None else seeded_scene(seed, _EVAL, index)
    cands = simulate_candidates(sc.gt_boxes, make_rng(seed, _CANDS, _EVAL, index), sim)
    n = len(sc.gt_boxes)
    if sim.oracle:
        match = cands.cls_conf.copy()
    else:
        match = MatchHead(theta).predict(match_features(cands))
    iou_aware = cands.cls_conf * cands.quality
    chosen = {
        "set_based": select_indices(list(match), n),
        "nms_cls": nms_indices(cands.boxes, list(cands.cls_conf), nms_thr, overlaps=cands.pair_iou),
        "nms_iou": nms_indices(cands.boxes, list(iou_aware), nms_thr, overlaps=cands.pair_iou),
    }
    conf = {"set_based": cands.cls_conf, "nms_cls": cands.cls_conf, "nms_iou": iou_aware}
    kept = {k: (cands.best_iou[idx], conf[k][idx]) for k, idx in chosen.items()}
    sel = chosen["set_based"]
    sub = cands.pair_iou[np.ix_(sel, sel)]
    after = nms_indices([cands.boxes[i] for i in sel], [match[i] for i in sel], nms_thr, overlaps=sub)
    return SelectorScene(index, n, kept, len(after) == len(sel))


@dataclass
class RatioRow:
    selector: str
    v: float
    positives: int
    above: int

    @property
    def ratio(self) -> float:
        return 1.0 if self.positives == 0 else self.above / self.positives


def consistency_curves(scenes: Sequence[SelectorScene], v_grid: Sequence[float], tau: float) -> list[RatioRow]:
    """R per selector per threshold, pooled over all scenes."""
    rows = []
    for name in SELECTORS:
        best = np.concatenate([s.kept[name][0] for s in scenes]) if scenes else np.zeros(0)
        conf = np.concatenate([s.kept[name][1] for s in scenes]) if scenes else np.zeros(0)
        pos = best > tau
        for v in v_grid:
            rows.append(RatioRow(name, float(v), int(pos.sum()), int(np.count_nonzero(conf[pos] > v))))
    return rows


def ratio_stderr(row: RatioRow) -> float:
    if row.positives == 0:
        return 0.0
    p = row.ratio
    return math.sqrt(p * (1.0 - p) / row.positives)


def dominates(rows: Sequence[RatioRow], a: str = "set_based", b: str = "nms_cls", sigmas: float = 0.0) -> bool:
    """``R_a(v) >= R_b(v)`` at every v, optionally allowing ``sigmas`` standard errors of the difference."""
    ra = {r.v: r for r in rows if r.selector == a}
    rb = {r.v: r for r in rows if r.selector == b}
    for v, x in ra.items():
        y = rb[v]
        slack = sigmas * math.hypot(ratio_stderr(x), ratio_stderr(y))
        if x.ratio < y.ratio - slack:
            return False
    return True


# -- matching demo -------------------------------------------------------------------


@dataclass
class MatchDemoRow:
    scene: int
    gt_count: int
    pred_count: int
    optimal_cost: float
    oracle_cost: float | None

    @property
    def equal(self) -> bool | None:
        return None if self.oracle_cost is None else self.optimal_cost == self.oracle_cost


def match_demo_scene(args) -> MatchDemoRow:
    seed, index, sim, max_oracle_gt, scene_fn = args
    sc = scene_fn(index) if scene_fn is not None else seeded_scene(seed, _EVAL, index, min_objects=0)
    cands = simulate_candidates(sc.gt_boxes, make_rng(seed, _CANDS, _EVAL, index), sim)
    preds = [PredictedBox(b, float(c)) for b, c in zip(cands.boxes, cands.cls_conf)]
    n = len(sc.gt_boxes)
    cost = cost_matrix(preds, sc.gt_boxes, sim.iou_kind)
    result = hungarian(cost)
    oracle = reference_assignment(cost)[1] if n <= max_oracle_gt else None
    return MatchDemoRow(index, n, len(preds), result.total_cost, oracle)


# -- propagation probe ---------------------------------------------------------------


def point_latents(points_lidar: np.ndarray, calib) -> np.ndarray:
    """Non-negative geometric point features: ``[1, height above ground, intensity, depth / 70.4]``."""
    cam = calib.lidar_to_camera(points_lidar[:, :3])
    height = np.clip(GROUND_Y - cam[:, 1], 0.0, None)
    return np.column_stack([np.ones(len(cam)), height, points_lidar[:, 3], cam[:, 2] / 70.4])


def probe_params(level_channels: Sequence[int], k: int, steps: int, update_mode: str,
                 rng: np.random.Generator | None, weight_scale: float = 0.05, identity: bool = False,
                 point_channels: int = 4) -> PropagationParams:
    """Random small parameters plus one fixed coupling from image categories to the filter.

    The filter on the constant channel becomes ``1 - f_0 + sum_{k>0} f_k``,
    about 0 on background texels and 2 on object texels.  ``identity``
    switches both off and sets alpha = 0.
    """
    params = PropagationParams.build(
        point_channels, list(level_channels), k,
        rng=None if identity else rng, weight_scale=0.0 if identity else weight_scale,
        update_mode=update_mode, steps=steps, alpha=0.0 if identity else 1.0,
        mix_channels=point_channels if len(level_channels) > 1 else None,
    )
    if identity:
        return params
    for lvl, c_img in enumerate(level_channels):
        W = params.affinity_W[lvl].data.copy()
        W[0, 1] -= 1.0
        W[1:, 1] += 1.0
        params.affinity_W[lvl] = nx.const(W)
    return params


def probe_r2(features: np.ndarray, labels: np.ndarray) -> float:
    """In-sample R^2 of a least-squares linear fit (with intercept) of the labels."""
    y = labels.astype(np.float64)
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return math.nan
    X = np.column_stack([features, np.ones(len(features))])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return 1.0 - float(resid @ resid) / sst


@dataclass
class ProbeResult:
    scene: int
    nodes: int
    foreground: int
    r2_plain: float
    r2_fused: float
    positions: np.ndarray
    labels: np.ndarray
    refined: np.ndarray


def propagate_scene(args) -> ProbeResult:
    seed, index, k, steps, variant, update_mode, max_nodes, identity, scene_fn = args
    sc = scene_fn(index) if scene_fn is not None else seeded_scene(seed, _EVAL, index)
    uv, inside = project_points(sc.points[:, :3], sc.calib)
    idx = np.flatnonzero(inside)
    if len(idx) > max_nodes:
        idx = np.sort(make_rng(seed, _NODES, index).choice(idx, size=max_nodes, replace=False))
    pts = sc.points[idx]
    pos = uv[idx]
    cam = sc.calib.lidar_to_camera(pts[:, :3])
    labels = np.zeros(len(pts), dtype=np.int64)
    for box in sc.gt_boxes:
        labels |= box.contains(cam, margin=0.1).astype(np.int64)
    h = point_latents(pts, sc.calib)
    maps = sc.image_features if variant == "cdmp_1x4" else sc.image_features[:1]
    strides = sc.strides if variant == "cdmp_1x4" else sc.strides[:1]
    image = FeatureGraph.from_image(maps, strides)
    graph = FeatureGraph(nx.const(h), pos)
    params = probe_params([m.shape[2] for m in maps], k, steps, update_mode,
                          make_rng(seed, _PARAMS), identity=identity, point_channels=h.shape[1])
    refined = propagate(graph, image, params, variant).numpy()
    return ProbeResult(index, len(pts), int(labels.sum()), probe_r2(h, labels), probe_r2(refined, labels),
                       pos, labels, refined)
