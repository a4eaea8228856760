"""Independent reference computations shared by the tests."""
from __future__ import annotations

import itertools
import math
from pathlib import Path

import numpy as np

from fusedet.geometry import Box3D


def random_box(rng: np.random.Generator, spread: float = 4.0) -> Box3D:
    return Box3D(
        rng.uniform(-spread, spread), rng.uniform(-1.0, 2.0), rng.uniform(5.0, 5.0 + 2 * spread),
        rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.8, 5.0), rng.uniform(-math.pi, math.pi),
    )


def nearby_box(rng: np.random.Generator, base: Box3D) -> Box3D:
    """A box overlapping ``base`` with a good chance."""
    return Box3D(
        base.x + rng.normal(0, 0.6), base.y + rng.normal(0, 0.4), base.z + rng.normal(0, 0.6),
        base.h * rng.uniform(0.6, 1.5), base.w * rng.uniform(0.6, 1.5), base.l * rng.uniform(0.6, 1.5),
        base.theta + rng.normal(0, 0.7),
    )


def _local(points_xz: np.ndarray, box: Box3D) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates along the heading and across it; heading is (cos t, -sin t) in (x, z)."""
    d = points_xz - np.array([box.x, box.z])
    c, s = math.cos(box.theta), math.sin(box.theta)
    return d @ np.array([c, -s]), d @ np.array([s, c])


def monte_carlo_iou(a: Box3D, b: Box3D, kind: str, samples: int, rng: np.random.Generator) -> float:
    """Sample uniformly inside the smaller box and count hits in the other."""
    if kind == "bev":
        vol_a, vol_b = a.l * a.w, b.l * b.w
    else:
        vol_a, vol_b = a.l * a.w * a.h, b.l * b.w * b.h
    src, dst = (a, b) if vol_a <= vol_b else (b, a)
    u = (rng.random(samples) - 0.5) * src.l
    v = (rng.random(samples) - 0.5) * src.w
    c, s = math.cos(src.theta), math.sin(src.theta)
    x = src.x + u * c + v * s
    z = src.z - u * s + v * c
    along, across = _local(np.column_stack([x, z]), dst)
    hit = (np.abs(along) <= dst.l / 2) & (np.abs(across) <= dst.w / 2)
    if kind == "3d":
        y = src.y + (rng.random(samples) - 0.5) * src.h
        hit &= np.abs(y - dst.y) <= dst.h / 2
    inter = min(vol_a, vol_b) * hit.mean()
    return inter / (vol_a + vol_b - inter)


def brute_force_min_cost(cost: np.ndarray) -> tuple[int, float]:
    """(max number of finite pairs, min cost among those) over every injection, plain itertools."""
    n, m = cost.shape
    best = (0, 0.0)
    key_best = None
    for perm in itertools.permutations(range(m), n):
        count, total = 0, 0.0
        for r in range(n):
            val = cost[r, perm[r]]
            if math.isfinite(val):
                count += 1
                total += val
        key = (-count, total)
        if key_best is None or key < key_best:
            key_best, best = key, (count, total)
    return best


def tree_bytes(root) -> dict[str, bytes]:
    """Relative path -> file contents for every file below ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# one small invocation per CLI command, shared by the CLI and acceptance tests
CLI_RUNS = {
    "gradcheck": ["gradcheck", "--only", "numerics,losses,setdet", "--points", "3"],
    "match-demo": ["match-demo", "--scenes", "8"],
    "compare-nms": ["compare-nms", "--scenes", "6", "--train-scenes", "4", "--workers", "2"],
    "propagate": ["propagate", "--scenes", "3", "--max-nodes", "128"],
    "gen-scenes": ["gen-scenes", "--scenes", "2"],
}


def _decimal(rng, lo, hi):
    """A canonical decimal string with two to six fractional digits."""
    digits = int(rng.integers(2, 7))
    whole = int(rng.integers(lo, hi))
    frac = "".join(str(d) for d in rng.integers(0, 10, digits))
    if digits > 2 and frac[-1] == "0":
        frac = frac[:-1] + "7"
    sign = "-" if whole < 0 or (whole == 0 and rng.random() < 0.3) else ""
    text = f"{sign}{abs(whole)}.{frac}"
    return "0.00" if float(text) == 0.0 else text


def crafted_label_file(rng):
    lines = []
    for _ in range(int(rng.integers(1, 6))):
        cat = ["Car", "Pedestrian", "Cyclist", "Van"][int(rng.integers(4))]
        f = [_decimal(rng, 0, 1), str(int(rng.integers(0, 4))), _decimal(rng, -2, 3)]
        f += [_decimal(rng, 0, 1200) for _ in range(4)]
        f += [_decimal(rng, 1, 5) for _ in range(3)]
        f += [_decimal(rng, -20, 20), _decimal(rng, 0, 3), _decimal(rng, 2, 70), _decimal(rng, -2, 3)]
        lines.append(" ".join([cat] + f))
    return "\n".join(lines) + "\n"


def crafted_calib_file(rng):
    keys = ["P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam", "Tr_imu_to_velo"]
    counts = {"R0_rect": 9}
    return "".join(
        f"{k}: " + " ".join(_decimal(rng, -800, 800) for _ in range(counts.get(k, 12))) + "\n" for k in keys
    )
