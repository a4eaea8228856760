"""Projection, bilinear sampling, oriented boxes, IoU and bin encoding.

Frames follow the KITTI camera convention: x right, y down, z forward.  A box
footprint lives in the x-z ground plane with its length axis along the
heading ``theta`` (rotation about y), and its vertical extent is
``[y - h/2, y + h/2]``.  Image coordinates are ``(u, v)`` = (column, row)
with texel centres at integer positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DiffArray, DimensionError, apply_op, as_diff


class OutOfRangeError(ValueError):
    """A box cannot be encoded relative to the given anchor."""


def wrap_angle(theta: float) -> float:
    """Map an angle onto [-pi, pi)."""
    out = theta - 2.0 * math.pi * math.floor((theta + math.pi) / (2.0 * math.pi))
    if out >= math.pi:  # rounding can land exactly on +pi
        out -= 2.0 * math.pi
    return out


# -- calibration and projection -------------------------------------------------


@dataclass(frozen=True)
class CalibMatrix:
    """Composed 3x4 projection from LiDAR points to image-plane homogeneous coords.

    ``velo_to_cam`` (4x4, rectified camera frame) is optional and only needed
    when crop ranges are given in camera coordinates.  The raw KITTI matrices
    are kept when the calibration came from a file so it can be written back.
    """

    P: np.ndarray
    image_size: tuple[int, int]
    velo_to_cam: np.ndarray | None = None
    raw: dict[str, np.ndarray] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (3, 4):
            raise DimensionError(f"projection matrix must be 3x4, got {P.shape}")
        if not np.any(P[2]):
            raise ValueError("projection matrix has an all-zero third row")
        w, h = self.image_size
        if int(w) != w or int(h) != h or w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive integers, got {self.image_size}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if self.velo_to_cam is not None:
            T = np.array(self.velo_to_cam, dtype=np.float64)
            if T.shape != (4, 4):
                raise DimensionError(f"velo_to_cam must be 4x4, got {T.shape}")
            object.__setattr__(self, "velo_to_cam", T)

    def lidar_to_camera(self, points: np.ndarray) -> np.ndarray:
        if self.velo_to_cam is None:
            raise ValueError("calibration carries no LiDAR-to-camera transform")
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        return pts @ self.velo_to_cam[:3, :3].T + self.velo_to_cam[:3, 3]

    def camera_to_lidar(self, points: np.ndarray) -> np.ndarray:
        if self.velo_to_cam is None:
            raise ValueError("calibration carries no LiDAR-to-camera transform")
        inv = np.linalg.inv(self.velo_to_cam)
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        return pts @ inv[:3, :3].T + inv[:3, 3]


def project_points(points, calib: CalibMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Project N x 3 LiDAR points to ``(uv, mask)``.

    ``mask`` is true where the homogeneous depth is positive and ``(u, v)``
    falls in ``[0, W) x [0, H)``.  Points with zero depth get NaN coordinates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ calib.P.T
    depth = hom[:, 2]
    uv = np.full((len(pts), 2), np.nan)
    nz = depth != 0.0
    uv[nz] = hom[nz, :2] / depth[nz, None]
    w, h = calib.image_size
    with np.errstate(invalid="ignore"):
        mask = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return uv, mask


# -- bilinear sampling -------------------------------------------------------


def bilinear_sample(feature_map, coords) -> DiffArray:
    """Sample an H x W x C map at N continuous ``(u, v)`` positions.

    Four-neighbour interpolation; neighbours outside the map read as zero.
    Gradients flow to both the map and the coordinates.
    """
    fmap, xy = as_diff(feature_map), as_diff(coords)
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be H x W x C, got {fmap.shape}")
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise DimensionError(f"coords must be N x 2, got {xy.shape}")
    F = fmap.data
    H, W, C = F.shape
    u, v = xy.data[:, 0], xy.data[:, 1]
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    fu, fv = u - u0, v - v0

    # corner order: (v0,u0), (v0,u0+1), (v0+1,u0), (v0+1,u0+1)
    rows = np.stack([v0, v0, v0 + 1, v0 + 1], axis=1)
    cols = np.stack([u0, u0 + 1, u0, u0 + 1], axis=1)
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    r = np.where(valid, rows, 0)
    c = np.where(valid, cols, 0)
    vals = F[r, c] * valid[..., None]  # N x 4 x C
    wts = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], axis=1)
    out = np.einsum("nk,nkc->nc", wts, vals)

    def vjp(g):
        gmap = np.zeros_like(F)
        contrib = wts[..., None] * g[:, None, :] * valid[..., None]
        np.add.at(gmap, (r.reshape(-1), c.reshape(-1)), contrib.reshape(-1, C))
        f00, f01, f10, f11 = vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3]
        du = (1 - fv)[:, None] * (f01 - f00) + fv[:, None] * (f11 - f10)
        dv = (1 - fu)[:, None] * (f10 - f00) + fu[:, None] * (f11 - f01)
        gxy = np.stack([np.sum(du * g, axis=1), np.sum(dv * g, axis=1)], axis=1)
        return gmap, gxy

    return apply_op("bilinear_sample", out, (fmap, xy), vjp)


# -- oriented boxes ----------------------------------------------------------


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "h", "w", "l", "theta"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"Box3D.{name} is not finite")
            object.__setattr__(self, name, val)
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"box dimensions must be positive, got h={self.h} w={self.w} l={self.l}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.theta])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Box3D:
        return cls(*(float(v) for v in a[:7]))

    def footprint(self) -> np.ndarray:
        """Counter-clockwise 4 x 2 polygon of (x, z) ground-plane corners."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        along = np.array([c, -s]) * (self.l / 2)
        across = np.array([s, c]) * (self.w / 2)
        ctr = np.array([self.x, self.z])
        poly = np.array([ctr + along + across, ctr - along + across, ctr - along - across, ctr + along - across])
        return poly if _signed_area(poly) > 0 else poly[::-1].copy()

    def corners(self) -> np.ndarray:
        """8 x 3 corners: footprint at the top face then at the bottom face."""
        fp = self.footprint()
        top = np.column_stack([fp[:, 0], np.full(4, self.y - self.h / 2), fp[:, 1]])
        bot = np.column_stack([fp[:, 0], np.full(4, self.y + self.h / 2), fp[:, 1]])
        return np.vstack([top, bot])

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of camera-frame points inside the box (closed, grown by ``margin``)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = math.cos(self.theta), math.sin(self.theta)
        along = p[:, 0] * c - p[:, 2] * s
        across = p[:, 0] * s + p[:, 2] * c
        return (
            (np.abs(along) <= self.l / 2 + margin)
            & (np.abs(across) <= self.w / 2 + margin)
            & (np.abs(p[:, 1]) <= self.h / 2 + margin)
        )

    def bev_radius(self) -> float:
        return 0.5 * math.hypot(self.l, self.w)


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; fewer than three vertices is zero."""
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(np.asarray(poly)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        prev = src[-1]
        sp = side(prev)
        for cur in src:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if math.hypot(a.x - b.x, a.z - b.z) > a.bev_radius() + b.bev_radius():
        return 0.0
    return polygon_area(clip_polygon(a.footprint(), b.footprint()))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, max(0.0, inter / union))


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.y - a.h / 2, b.y - b.h / 2)
    hi = min(a.y + a.h / 2, b.y + b.h / 2)
    return max(0.0, hi - lo)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dy = vertical_overlap(a, b)
    if dy <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dy
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return min(1.0, max(0.0, inter / union))


IOU_KINDS = {"bev": iou_bev, "3d": iou_3d}


def iou(a: Box3D, b: Box3D, kind: str = "3d") -> float:
    try:
        return IOU_KINDS[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown IoU kind {kind!r}; expected 'bev' or '3d'") from None


def iou_matrix(rows: Sequence[Box3D], cols: Sequence[Box3D], kind: str = "3d") -> np.ndarray:
    fn = IOU_KINDS[kind]
    out = np.zeros((len(rows), len(cols)))
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            out[i, j] = fn(a, b)
    return out


# -- bin encoding --------------------------------------------------------------

BINNED = ("x", "z", "theta")
RESIDUAL_DIMS = ("x", "y", "z", "h", "w", "l", "theta")


@dataclass(frozen=True)
class BinConfig:
    """Bin layout around an anchor point.

    x and z are binned over ``[-half_range, half_range]`` relative to the
    anchor; theta over the full circle.  Sizes regress against ``mean_size``.
    """

    half_range_x: float = 3.0
    bin_width_x: float = 0.5
    half_range_z: float = 3.0
    bin_width_z: float = 0.5
    theta_bins: int = 12
    mean_size: tuple[float, float, float] = (1.52, 1.63, 3.88)  # h, w, l

    def __post_init__(self):
        for name in ("x", "z"):
            half, width = getattr(self, f"half_range_{name}"), getattr(self, f"bin_width_{name}")
            if width <= 0 or half <= 0:
                raise ValueError(f"bin layout for {name} must be positive")
            ratio = 2 * half / width
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"2*half_range_{name} must be a multiple of bin_width_{name}")
        if self.theta_bins < 1:
            raise ValueError("theta_bins must be >= 1")

    @property
    def bin_count(self) -> dict[str, int]:
        return {
            "x": int(round(2 * self.half_range_x / self.bin_width_x)),
            "z": int(round(2 * self.half_range_z / self.bin_width_z)),
            "theta": self.theta_bins,
        }

    @property
    def bin_width(self) -> dict[str, float]:
        return {"x": self.bin_width_x, "z": self.bin_width_z, "theta": 2 * math.pi / self.theta_bins}

    def lower_edge(self, dim: str, anchor: np.ndarray) -> float:
        if dim == "x":
            return float(anchor[0]) - self.half_range_x
        if dim == "z":
            return float(anchor[2]) - self.half_range_z
        return -math.pi


@dataclass(frozen=True)
class BinEncoding:
    bin_index: dict[str, int]
    residual: dict[str, float]
    bin_count: dict[str, int]
    bin_width: dict[str, float]


def encode_bins(target: Box3D, anchor_point, config: BinConfig = BinConfig()) -> BinEncoding:
    anchor = np.asarray(anchor_point, dtype=np.float64).reshape(3)
    counts, widths = config.bin_count, config.bin_width
    values = {"x": target.x, "z": target.z, "theta": target.theta}
    bins: dict[str, int] = {}
    res: dict[str, float] = {}
    for dim in BINNED:
        lo = config.lower_edge(dim, anchor)
        shifted = values[dim] - lo
        span = counts[dim] * widths[dim]
        if shifted < 0 or shifted > span:
            raise OutOfRangeError(
                f"{dim}={values[dim]:.6g} lies outside the binned range [{lo:.6g}, {lo + span:.6g}]"
            )
        k = min(int(math.floor(shifted / widths[dim])), counts[dim] - 1)
        bins[dim] = k
        res[dim] = shifted - (k + 0.5) * widths[dim]
    res["y"] = target.y - float(anchor[1])
    mh, mw, ml = config.mean_size
    res["h"], res["w"], res["l"] = target.h - mh, target.w - mw, target.l - ml
    return BinEncoding(bins, {d: res[d] for d in RESIDUAL_DIMS}, counts, widths)


def decode_bins(enc: BinEncoding, anchor_point, config: BinConfig = BinConfig()) -> Box3D:
    anchor = np.asarray(anchor_point, dtype=np.float64).reshape(3)
    vals = {}
    for dim in BINNED:
        k = enc.bin_index[dim]
        if not 0 <= k < enc.bin_count[dim]:
            raise OutOfRangeError(f"bin index {k} for {dim} outside [0, {enc.bin_count[dim]})")
        vals[dim] = config.lower_edge(dim, anchor) + (k + 0.5) * enc.bin_width[dim] + enc.residual[dim]
    mh, mw, ml = config.mean_size
    r = enc.residual
    return Box3D(
        vals["x"], float(anchor[1]) + r["y"], vals["z"],
        mh + r["h"], mw + r["w"], ml + r["l"], vals["theta"],
    )
