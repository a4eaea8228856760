"""Finite-difference gradient suites for every differentiable operation.

Each case draws a random point from a seeded stream, reduces the operation's
output to a scalar with fixed random weights and compares tape gradients with
central differences.  Points too close to a kink (relu at 0, the smooth-L1
knee, clip bounds, integer texel lines under bilinear sampling) are redrawn,
since one-sided derivatives disagree there by construction.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .cdmp import (
    FeatureGraph,
    PropagationParams,
    calculate_message,
    level_messages,
    neighbor_sampling,
    predict_affinity_filters,
    predict_walks,
    propagate,
    scatter_to_grid,
    to_level,
    update_latents,
)
from .geometry import BinConfig, Box3D, bilinear_sample, encode_bins
from .losses import LossConfig, bin_reg_loss, cross_entropy, focal_cls_loss, smooth_l1_loss, total_loss
from .numerics import DiffArray
from .rng import make_rng
from .setdet import match_head_loss

KINK_GAP = 1e-3
DEFAULT_TOL = 1e-4
DEFAULT_POINTS = 10

Case = Callable[[np.random.Generator], "tuple[Callable[[DiffArray], DiffArray], np.ndarray] | None"]


class Packer:
    """Slices one flat variable vector into named, shaped inputs."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = dict(shapes)
        self.slices = {}
        start = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = (start, size)
            start += size
        self.size = start

    def pack(self, values: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(values[k], dtype=np.float64).reshape(-1) for k in self.shapes])

    def unpack(self, x: DiffArray) -> dict[str, DiffArray]:
        out = {}
        for name, (start, size) in self.slices.items():
            part = nx.take(x, np.arange(start, start + size))
            out[name] = nx.reshape(part, self.shapes[name])
        return out


def _project(out: DiffArray, weights: np.ndarray) -> DiffArray:
    """Scalar ``sum(out * weights)``."""
    return nx.sum_(nx.mul(out, nx.const(weights.reshape(out.shape))))


def _away_from_kink(values: np.ndarray, kinks: Sequence[float] = (0.0,)) -> bool:
    v = np.asarray(values, dtype=np.float64)
    return all(np.min(np.abs(v - k)) > KINK_GAP for k in kinks) if v.size else True


def _off_lattice(coords: np.ndarray) -> bool:
    c = np.asarray(coords, dtype=np.float64)
    return bool(np.min(np.abs(c - np.round(c))) > KINK_GAP) if c.size else True


def _unary(fn, sampler, kinks=None) -> Case:
    def case(rng):
        x0 = sampler(rng)
        if kinks is not None and not _away_from_kink(x0, kinks):
            return None
        w = rng.standard_normal(fn(nx.const(x0)).shape)
        return (lambda x: _project(fn(x), w)), x0

    return case


def _multi(shapes: dict[str, tuple[int, ...]], fn, sampler=None) -> Case:
    packer = Packer(shapes)

    def case(rng):
        vals = sampler(rng) if sampler else {k: rng.standard_normal(s) for k, s in shapes.items()}
        x0 = packer.pack(vals)
        w = rng.standard_normal(fn(**{k: nx.const(v) for k, v in vals.items()}).shape)
        return (lambda x: _project(fn(**packer.unpack(x)), w)), x0

    return case


# -- numerics ---------------------------------------------------------------------------


def _normal(*shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(*shape, lo=0.2, hi=2.0):
    return lambda rng: rng.uniform(lo, hi, shape)


NUMERICS: dict[str, Case] = {
    "matmul": _multi({"a": (3, 4), "b": (4, 2)}, lambda a, b: nx.matmul(a, b)),
    "add": _multi({"a": (3, 4), "b": (3, 4)}, lambda a, b: nx.add(a, b)),
    "sub": _multi({"a": (3, 4), "b": (3, 4)}, lambda a, b: nx.sub(a, b)),
    "mul": _multi({"a": (3, 4), "b": (3, 4)}, lambda a, b: nx.mul(a, b)),
    "neg": _unary(nx.neg, _normal(3, 4)),
    "scale": _multi({"x": (3, 4), "s": (1,)}, lambda x, s: nx.scale(x, s)),
    "relu": _unary(nx.relu, _normal(3, 4), kinks=(0.0,)),
    "log": _unary(nx.log, _positive(3, 4)),
    "exp": _unary(nx.exp, _normal(3, 4)),
    "power": _unary(lambda x: nx.power(x, 2.5), _positive(3, 4)),
    "clip": _unary(lambda x: nx.clip(x, -0.5, 0.5), _normal(3, 4), kinks=(-0.5, 0.5)),
    "abs": _unary(nx.abs_, _normal(3, 4), kinks=(0.0,)),
    "smooth_l1": _unary(nx.smooth_l1, lambda rng: 2.0 * rng.standard_normal((3, 4)), kinks=(-1.0, 1.0)),
    "sigmoid": _unary(nx.sigmoid, _normal(3, 4)),
    "reshape": _unary(lambda x: nx.reshape(x, (4, 3)), _normal(3, 4)),
    "sum": _unary(lambda x: nx.sum_(x, axis=1), _normal(3, 4)),
    "mean": _unary(nx.mean, _normal(3, 4)),
    "concat_channels": _multi({"a": (3, 2), "b": (3, 3)}, lambda a, b: nx.concat_channels(a, b)),
    "scale_by": _multi({"x": (3, 4, 2), "s": (3, 4)}, lambda x, s: nx.scale_by(x, s)),
    "bias_add": _multi({"x": (3, 4), "b": (4,)}, lambda x, b: nx.bias_add(x, b)),
    "batched_vecmat": _multi({"v": (2, 3, 4), "m": (2, 3, 4, 2)}, lambda v, m: nx.batched_vecmat(v, m)),
    "logsumexp": _unary(lambda x: nx.logsumexp(x, axis=1), lambda rng: 3.0 * rng.standard_normal((3, 5))),
    "take": _unary(lambda x: nx.take(x, [2, 0, 2], axis=1), _normal(3, 4)),
    "scatter_mean": _unary(lambda x: nx.scatter_mean(x, np.array([0, 2, 2, -1, 0]), 4), _normal(5, 3)),
}


# -- geometry ---------------------------------------------------------------------------


def _bilinear_case(rng):
    H, W, C, N = 4, 5, 3, 6
    fmap = rng.standard_normal((H, W, C))
    # include positions past the border so zero padding is exercised
    coords = np.column_stack([rng.uniform(-1.0, W, N), rng.uniform(-1.0, H, N)])
    if not _off_lattice(coords):
        return None
    packer = Packer({"fmap": (H, W, C), "coords": (N, 2)})
    w = rng.standard_normal((N, C))

    def f(x):
        v = packer.unpack(x)
        return _project(bilinear_sample(v["fmap"], v["coords"]), w)

    return f, packer.pack({"fmap": fmap, "coords": coords})


GEOMETRY: dict[str, Case] = {"bilinear_sample": _bilinear_case}


# -- cdmp -------------------------------------------------------------------------------


@dataclass
class _CdmpSetup:
    n: int = 5
    c: int = 2
    c_img: int = 2
    k: int = 4
    levels: int = 1
    height: int = 6
    width: int = 7
    filter_mode: str = "diagonal"
    update_mode: str = "residual"
    steps: int = 1
    variant: str | None = None  # None: message only


def _level_shapes(s: _CdmpSetup) -> list[tuple[int, int, int]]:
    return [(-(-s.height // 2**l), -(-s.width // 2**l), s.c_img) for l in range(s.levels)]


def _param_shapes(s: _CdmpSetup) -> dict[str, tuple[int, ...]]:
    F = s.c if s.filter_mode == "diagonal" else s.c * s.c
    shapes: dict[str, tuple[int, ...]] = {"h": (s.n, s.c)}
    for l, shp in enumerate(_level_shapes(s)):
        shapes[f"map{l}"] = shp
    shapes["walk_W"] = (s.c, 2 * s.k)
    shapes["walk_b"] = (2 * s.k,)
    for l in range(s.levels):
        shapes[f"iwalk_W{l}"] = (s.c_img, 2 * s.k)
        shapes[f"iwalk_b{l}"] = (2 * s.k,)
        shapes[f"aff_W{l}"] = (s.c_img, 1 + F)
        shapes[f"aff_b{l}"] = (1 + F,)
    shapes["alpha"] = (1,)
    shapes["beta"] = (s.levels,)
    if s.variant == "cdmp_1x4":
        shapes["mix_W"] = (s.levels * s.c, s.c)
        shapes["mix_b"] = (s.c,)
    return shapes


def _assemble(s: _CdmpSetup, v: dict[str, DiffArray], positions: np.ndarray):
    point = FeatureGraph(v["h"], positions)
    image = FeatureGraph.from_image([v[f"map{l}"] for l in range(s.levels)])
    params = PropagationParams(
        k=s.k,
        walk_W=v["walk_W"],
        walk_b=v["walk_b"],
        image_walk_W=[v[f"iwalk_W{l}"] for l in range(s.levels)],
        image_walk_b=[v[f"iwalk_b{l}"] for l in range(s.levels)],
        affinity_W=[v[f"aff_W{l}"] for l in range(s.levels)],
        affinity_b=[v[f"aff_b{l}"] for l in range(s.levels)],
        alpha=v["alpha"],
        beta=v["beta"],
        steps=s.steps,
        filter_mode=s.filter_mode,
        update_mode=s.update_mode,
        mix_W=v.get("mix_W"),
        mix_b=v.get("mix_b"),
    )
    return point, image, params


def _cdmp_run(s: _CdmpSetup, point, image, params) -> DiffArray:
    if s.variant is None:
        return calculate_message(point, image, params)
    return propagate(point, image, params, s.variant)


def _cdmp_clear_of_kinks(s: _CdmpSetup, point, image, params) -> bool:
    """Replays the forward pass checking sample coordinates and relu inputs."""
    graph, h = point, point.latents
    for _ in range(params.steps if s.variant else 1):
        smp = neighbor_sampling(graph, image, params)
        for lvl in range(params.levels):
            stride = image.strides[lvl]
            base = to_level(graph.positions, stride)[:, None, :] + smp.base[None]
            if not (_off_lattice(base + smp.walks.data) and _off_lattice(base + smp.image_walks[lvl].data)):
                return False
        if s.variant is None:
            return True
        if s.variant == "cdmp_1x1":
            m = calculate_message(graph, image, params, smp)
        else:
            grouped = nx.concat(level_messages(graph, image, params, smp), axis=-1)
            m = nx.bias_add(nx.matmul(grouped, params.mix_W), params.mix_b)
        scaled = m.data * params.alpha.data[0]
        pre = h.data + scaled if s.update_mode == "residual" else np.hstack([h.data, scaled])
        if not _away_from_kink(pre):
            return False
        h = update_latents(h, m, params.alpha, s.update_mode)
        graph = graph.with_latents(h)
    return True


def _cdmp_case(setup: _CdmpSetup) -> Case:
    shapes = _param_shapes(setup)
    packer = Packer(shapes)

    def case(rng):
        vals = {}
        for name, shp in shapes.items():
            if name == "h":
                vals[name] = rng.uniform(0.2, 1.5, shp)
            elif name.startswith(("walk", "iwalk")):
                vals[name] = 0.4 * rng.standard_normal(shp)
            elif name == "alpha":
                vals[name] = rng.uniform(0.3, 1.0, shp)
            elif name == "beta":
                vals[name] = rng.uniform(0.2, 1.0, shp)
            else:
                vals[name] = rng.standard_normal(shp)
        positions = np.column_stack([rng.uniform(0.0, setup.width - 1, setup.n),
                                     rng.uniform(0.0, setup.height - 1, setup.n)])
        consts = {k: nx.const(v) for k, v in vals.items()}
        if not _cdmp_clear_of_kinks(setup, *_assemble(setup, consts, positions)):
            return None
        out_shape = _cdmp_run(setup, *_assemble(setup, consts, positions)).shape
        w = rng.standard_normal(out_shape)
        return (lambda x: _project(_cdmp_run(setup, *_assemble(setup, packer.unpack(x), positions)), w)), packer.pack(vals)

    return case


def _walk_case(rng):
    return _multi({"h": (5, 3), "W": (3, 8), "b": (8,)}, lambda h, W, b: predict_walks(h, W, b, 4))(rng)


def _affinity_case(mode: str) -> Case:
    F = 3 if mode == "diagonal" else 9
    return _multi(
        {"v": (4, 5, 2), "W": (2, 1 + F), "b": (1 + F,)},
        lambda v, W, b: _flat_pair(predict_affinity_filters(v, W, b, mode, 3)),
    )


def _flat_pair(pair) -> DiffArray:
    A, w = pair
    return nx.concat([nx.reshape(A, (A.size,)), nx.reshape(w, (w.size,))], axis=0)


def _scatter_case(rng):
    pos = np.column_stack([rng.uniform(0, 6, 7), rng.uniform(0, 4, 7)])
    return _unary(lambda h: scatter_to_grid(h, pos, (3, 4), 2.0), _normal(7, 3))(rng)


def _update_case(mode: str) -> Case:
    def case(rng):
        h = rng.standard_normal((4, 3))
        m = rng.standard_normal((4, 3))
        alpha = rng.uniform(0.2, 1.5, (4,))
        pre = h + alpha[:, None] * m if mode == "residual" else np.hstack([h, alpha[:, None] * m])
        if not _away_from_kink(pre):
            return None
        return _multi({"h": (4, 3), "m": (4, 3), "alpha": (4,)},
                      lambda h, m, alpha: update_latents(h, m, alpha, mode),
                      sampler=lambda _: {"h": h, "m": m, "alpha": alpha})(rng)

    return case


CDMP: dict[str, Case] = {
    "predict_walks": _walk_case,
    "affinity_filters_diagonal": _affinity_case("diagonal"),
    "affinity_filters_dense": _affinity_case("dense"),
    "scatter_to_grid": _scatter_case,
    "update_residual": _update_case("residual"),
    "update_concat": _update_case("concat"),
    "message_diagonal": _cdmp_case(_CdmpSetup()),
    "message_dense": _cdmp_case(_CdmpSetup(filter_mode="dense")),
    "propagate_1x1": _cdmp_case(_CdmpSetup(variant="cdmp_1x1", steps=2)),
    "propagate_1x4": _cdmp_case(_CdmpSetup(variant="cdmp_1x4", levels=4, k=2, update_mode="concat", height=4, width=5)),
}


# -- set detection and losses -------------------------------------------------------------


def _match_head_case(rng):
    labels = (rng.random(12) < 0.3).astype(np.float64)
    return _unary(lambda s: match_head_loss(s, labels), lambda r: r.uniform(0.02, 0.98, 12))(rng)


def _match_logistic_case(rng):
    X = rng.standard_normal((16, 5))
    labels = (rng.random(16) < 0.3).astype(np.float64)
    return (lambda t: match_head_loss(nx.sigmoid(nx.reshape(nx.matmul(nx.const(X), nx.reshape(t, (5, 1))), (16,))), labels),
            rng.standard_normal(5))


SETDET: dict[str, Case] = {"match_head_loss": _match_head_case, "match_head_logistic": _match_logistic_case}


def _focal_case(rng):
    labels = (rng.random(10) < 0.4).astype(np.float64)
    cfg = LossConfig(alpha=float(rng.uniform(0.1, 0.9)), gamma=float(rng.uniform(0.0, 3.0)))
    return _unary(lambda p: focal_cls_loss(p, labels, cfg), lambda r: r.uniform(0.02, 0.98, 10))(rng)


def _ce_case(rng):
    idx = rng.integers(0, 6, 4)
    return _unary(lambda z: cross_entropy(z, idx), lambda r: 2.0 * r.standard_normal((4, 6)))(rng)


def _smooth_l1_loss_case(rng):
    target = rng.standard_normal((3, 7))
    x0 = target + 2.0 * rng.standard_normal((3, 7))
    if not _away_from_kink(x0 - target, (-1.0, 1.0)):
        return None
    return (lambda p: smooth_l1_loss(p, target)), x0


def _random_box(rng) -> Box3D:
    return Box3D(rng.uniform(-2, 2), rng.uniform(0.5, 1.5), rng.uniform(-2, 2),
                 rng.uniform(1.3, 1.8), rng.uniform(1.4, 1.9), rng.uniform(3.2, 4.6), rng.uniform(-3.1, 3.1))


def _bin_reg_case(rng):
    cfg = BinConfig()
    b = 3
    targets = [encode_bins(_random_box(rng), np.zeros(3), cfg) for _ in range(b)]
    counts = cfg.bin_count
    shapes = {dim: (b, counts[dim]) for dim in ("x", "z", "theta")}
    shapes["res"] = (b, 7)
    packer = Packer(shapes)
    vals = {k: rng.standard_normal(s) for k, s in shapes.items()}
    goal = np.array([[t.residual[d] for d in ("x", "y", "z", "h", "w", "l", "theta")] for t in targets])
    if not _away_from_kink(vals["res"] - goal, (-1.0, 1.0)):
        return None

    def f(x):
        v = packer.unpack(x)
        return bin_reg_loss({d: v[d] for d in ("x", "z", "theta")}, v["res"], targets)

    return f, packer.pack(vals)


def _total_case(rng):
    lam = float(rng.uniform(0.1, 2.0))
    cfg = LossConfig(lambda_sd=lam)
    return (lambda x: total_loss([nx.take(x, [0]), nx.take(x, [1])], [nx.take(x, [2]), nx.take(x, [3])],
                                 nx.take(x, [4]), cfg)), rng.uniform(0.1, 2.0, 5)


LOSSES: dict[str, Case] = {
    "focal_cls_loss": _focal_case,
    "cross_entropy": _ce_case,
    "smooth_l1_loss": _smooth_l1_loss_case,
    "bin_reg_loss": _bin_reg_case,
    "total_loss": _total_case,
}

SUITES: dict[str, dict[str, Case]] = {
    "numerics": NUMERICS,
    "geometry": GEOMETRY,
    "cdmp": CDMP,
    "setdet": SETDET,
    "losses": LOSSES,
}


@dataclass
class CheckResult:
    suite: str
    op: str
    max_error: float
    points: int
    seconds: float

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_error < tol


def check_op(suite: str, op: str, case: Case, seed: int = 0, points: int = DEFAULT_POINTS,
             max_draws: int = 200) -> CheckResult:
    rng = make_rng(seed, *(ord(ch) for ch in f"{suite}/{op}"))
    start = time.perf_counter()
    worst, done, draws = 0.0, 0, 0
    while done < points:
        draws += 1
        if draws > max_draws:
            raise RuntimeError(f"{suite}/{op}: could not draw {points} points clear of kinks")
        drawn = case(rng)
        if drawn is None:
            continue
        f, x0 = drawn
        worst = max(worst, nx.finite_diff_check(f, x0))
        done += 1
    return CheckResult(suite, op, worst, done, time.perf_counter() - start)


def run_suites(seed: int = 0, points: int = DEFAULT_POINTS, only: Sequence[str] | None = None) -> list[CheckResult]:
    names = list(SUITES) if not only else list(only)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; known: {list(SUITES)}")
    return [check_op(s, op, case, seed, points) for s in names for op, case in SUITES[s].items()]
