"""Scene ingestion: KITTI calibration and labels, point clouds, cropping, synthesis."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box3D, CalibMatrix, bev_intersection, project_points
from .rng import make_rng

CROP_RANGES = ((-40.0, 40.0), (-1.0, 3.0), (0.0, 70.4))  # camera frame x, y, z
TARGET_POINTS = 16384


class ParseError(ValueError):
    pass


class EmptySceneError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


# -- calibration -----------------------------------------------------------------

CALIB_COUNTS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
KITTI_IMAGE_SIZE = (1242, 375)


def _homogeneous(mat: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[: mat.shape[0], : mat.shape[1]] = mat
    return out


def compose_calib(p2: np.ndarray, r0_rect: np.ndarray, tr_velo_to_cam: np.ndarray,
                  image_size: tuple[int, int] = KITTI_IMAGE_SIZE, extra: dict | None = None) -> CalibMatrix:
    """``P = P2 . [R0_rect|0; 0 1] . [Tr_velo_to_cam; 0 0 0 1]``."""
    velo_to_cam = _homogeneous(np.reshape(r0_rect, (3, 3))) @ _homogeneous(np.reshape(tr_velo_to_cam, (3, 4)))
    raw = dict(extra or {})
    raw.update(
        P2=np.reshape(p2, (3, 4)).astype(np.float64),
        R0_rect=np.reshape(r0_rect, (3, 3)).astype(np.float64),
        Tr_velo_to_cam=np.reshape(tr_velo_to_cam, (3, 4)).astype(np.float64),
    )
    return CalibMatrix(np.reshape(p2, (3, 4)) @ velo_to_cam, image_size, velo_to_cam, raw)


def parse_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> CalibMatrix:
    raw: dict[str, np.ndarray] = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise ParseError(f"line {lineno}: expected 'KEY: values', got {line.strip()[:40]!r}")
        key, _, rest = line.partition(":")
        key = key.strip()
        try:
            vals = np.array([float(t) for t in rest.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: key {key!r} has a non-numeric value ({exc})") from None
        raw[key] = vals
        where[key] = lineno
    for key, count in CALIB_COUNTS.items():
        if key not in raw:
            raise ParseError(f"missing key {key!r}")
        if raw[key].size != count:
            raise ParseError(
                f"line {where[key]}: key {key!r} expects {count} values, got {raw[key].size}"
            )
    extra = {k: v for k, v in raw.items() if k not in CALIB_COUNTS}
    return compose_calib(raw["P2"], raw["R0_rect"], raw["Tr_velo_to_cam"], image_size, extra)


def serialize_calib(calib: CalibMatrix) -> str:
    if not all(k in calib.raw for k in CALIB_COUNTS):
        raise ValueError("calibration has no raw KITTI matrices to serialize")
    keys = [k for k in ("P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam", "Tr_imu_to_velo") if k in calib.raw]
    keys += sorted(k for k in calib.raw if k not in keys)
    lines = []
    for k in keys:
        vals = np.asarray(calib.raw[k]).reshape(-1)
        lines.append(f"{k}: " + " ".join(f"{x:.12e}" for x in vals))
    return "\n".join(lines) + "\n"


def scale_calib(calib: CalibMatrix, factor: float) -> CalibMatrix:
    """Calibration for an image resampled by ``factor`` (texel-centre convention)."""
    S = np.array([[factor, 0.0, 0.5 * factor - 0.5], [0.0, factor, 0.5 * factor - 0.5], [0.0, 0.0, 1.0]])
    w, h = calib.image_size
    size = (max(1, int(math.floor(w * factor))), max(1, int(math.floor(h * factor))))
    return CalibMatrix(S @ calib.P, size, calib.velo_to_cam)


# -- labels ------------------------------------------------------------------


@dataclass(frozen=True)
class KittiLabel:
    category: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float

    def __post_init__(self):
        if self.category == "DontCare":
            return
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"{self.category}: dimensions must be positive")
        if not -math.pi <= self.rotation_y <= math.pi:
            raise ValueError(f"{self.category}: rotation_y {self.rotation_y} outside [-pi, pi]")

    def to_box(self) -> Box3D:
        """Label locations are bottom centres; boxes are centred (camera y points down)."""
        return Box3D(self.x, self.y - self.h / 2, self.z, self.h, self.w, self.l, self.rotation_y)

    @classmethod
    def from_box(cls, box: Box3D, category: str, calib: CalibMatrix | None = None) -> KittiLabel:
        bbox = (0.0, 0.0, 0.0, 0.0)
        if calib is not None:
            uv, _ = project_points(calib.camera_to_lidar(box.corners()), calib)
            bbox = (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))
        alpha = box.theta - math.atan2(box.x, box.z)
        alpha = alpha - 2 * math.pi * math.floor((alpha + math.pi) / (2 * math.pi))
        return cls(category, 0.0, 0, alpha, bbox, box.h, box.w, box.l,
                   box.x, box.y + box.h / 2, box.z, box.theta)


def parse_labels(text: str, keep_dontcare: bool = False) -> list[KittiLabel]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 15:
            raise ParseError(f"line {lineno}: expected 15 fields, got {len(fields)}")
        try:
            nums = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        label = KittiLabel(
            fields[0], nums[0], int(nums[1]), nums[2], tuple(nums[3:7]),
            nums[7], nums[8], nums[9], nums[10], nums[11], nums[12], nums[13],
        )
        if label.category == "DontCare" and not keep_dontcare:
            continue
        out.append(label)
    return out


def _fmt(v: float) -> str:
    s = f"{v:.6f}".rstrip("0")
    head, _, tail = s.partition(".")
    s = f"{head}.{tail.ljust(2, '0')}"
    return "0.00" if s == "-0.00" else s


def serialize_labels(labels: Sequence[KittiLabel]) -> str:
    lines = []
    for lb in labels:
        nums = [lb.truncation, lb.occlusion, lb.alpha, *lb.bbox2d, lb.h, lb.w, lb.l, lb.x, lb.y, lb.z, lb.rotation_y]
        parts = [lb.category] + [str(lb.occlusion) if i == 1 else _fmt(n) for i, n in enumerate(nums)]
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


# -- point clouds -----------------------------------------------------------------


def read_bin(path) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size % 4:
        raise ParseError(f"{path}: size is not a multiple of four float32 values")
    return data.reshape(-1, 4).astype(np.float64)


def write_bin(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    pts.astype("<f4").tofile(path)


def read_csv_points(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and not _is_number(row[0])):
                continue
            if len(row) not in (3, 4):
                raise ParseError(f"{path}: line {lineno} has {len(row)} columns, expected 3 or 4")
            vals = [float(v) for v in row]
            rows.append(vals + [0.0] * (4 - len(vals)))
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_csv_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "intensity"][: pts.shape[1]])
        for row in pts:
            w.writerow([f"{v:.6f}" for v in row])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def in_ranges(points_cam: np.ndarray, ranges=CROP_RANGES) -> np.ndarray:
    mask = np.ones(len(points_cam), dtype=bool)
    for d, (lo, hi) in enumerate(ranges):
        mask &= (points_cam[:, d] >= lo) & (points_cam[:, d] <= hi)
    return mask


def crop_and_subsample(points, ranges=CROP_RANGES, target_count: int = TARGET_POINTS,
                       seed: int = 0, calib: CalibMatrix | None = None) -> np.ndarray:
    """Keep points inside the (inclusive) camera-frame ranges, then resample to ``target_count``.

    Larger clouds are subsampled without replacement; smaller ones are padded
    by drawing extra points with replacement.  With ``calib`` the points are
    LiDAR-frame and are mapped to the camera frame for the range test only.
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    pts = np.asarray(points, dtype=np.float64)
    cam = calib.lidar_to_camera(pts) if calib is not None else pts[:, :3]
    kept = pts[in_ranges(cam, ranges)]
    if len(kept) == 0:
        raise EmptySceneError("no points inside the crop ranges")
    if len(kept) == target_count:
        return kept
    rng = make_rng(seed)
    if len(kept) > target_count:
        idx = np.sort(rng.choice(len(kept), size=target_count, replace=False))
        return kept[idx]
    extra = rng.choice(len(kept), size=target_count - len(kept), replace=True)
    return np.vstack([kept, kept[extra]])


# -- synthetic scenes ---------------------------------------------------------

CATEGORY_SIZES = {  # mean (h, w, l) in metres
    "Car": (1.52, 1.63, 3.88),
    "Pedestrian": (1.76, 0.66, 0.84),
    "Cyclist": (1.74, 0.60, 1.76),
}
GROUND_Y = 1.65  # camera height above the ground plane


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene knobs.  Keys of the flat ``key = value`` config file:

    objects, categories (comma list), size_jitter, point_noise, feature_noise,
    points_per_object, clutter_points, z_min, z_max, image_width,
    image_height, focal, levels, max_retries, seed.
    """

    objects: int = 4
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    size_jitter: float = 0.1
    point_noise: float = 0.02
    feature_noise: float = 0.1
    points_per_object: int = 150
    clutter_points: int = 1500
    z_min: float = 10.0
    z_max: float = 45.0
    image_width: int = 160
    image_height: int = 48
    focal: float = 90.0
    levels: int = 4
    max_retries: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.objects < 0:
            raise ValueError("objects must be >= 0")
        unknown = [c for c in self.categories if c not in CATEGORY_SIZES]
        if unknown or not self.categories:
            raise ValueError(f"unsupported categories {unknown or '(none)'}; known: {sorted(CATEGORY_SIZES)}")
        if not 0 < self.z_min < self.z_max <= CROP_RANGES[2][1]:
            raise ValueError("need 0 < z_min < z_max <= 70.4")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def channels(self) -> int:
        return len(self.categories) + 1


def parse_scene_config(text: str) -> SceneConfig:
    types = {f.name: f.type for f in dataclasses.fields(SceneConfig)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in types:
            raise ParseError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "categories":
                kwargs[key] = tuple(c.strip() for c in value.split(",") if c.strip())
            elif types[key] in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except ValueError:
            raise ParseError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    try:
        return SceneConfig(**kwargs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def synthetic_calib(config: SceneConfig = SceneConfig()) -> CalibMatrix:
    """Pinhole camera plus a KITTI-like LiDAR mounting (x forward, y left, z up)."""
    f = config.focal
    p2 = np.array([[f, 0, config.image_width / 2, 0], [0, f, config.image_height / 2, 0], [0, 0, 1, 0]], dtype=np.float64)
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return compose_calib(p2, np.eye(3), tr, (config.image_width, config.image_height))


@dataclass
class SceneSample:
    points: np.ndarray  # N x 4 LiDAR frame (x, y, z, intensity)
    image_features: list[np.ndarray]  # per level, H_l x W_l x C
    calib: CalibMatrix
    gt_boxes: list[Box3D]
    categories: list[str]
    rng_seed: int | None = None
    strides: list[float] = field(default_factory=list)

    def points_camera(self) -> np.ndarray:
        return self.calib.lidar_to_camera(self.points)


def _box_projects_inside(box: Box3D, calib: CalibMatrix) -> bool:
    _, mask = project_points(calib.camera_to_lidar(box.corners()), calib)
    return bool(mask.all())


def _sample_surface(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the six faces of a box (camera frame)."""
    dims = np.array([box.l, box.h, box.w])  # local along, vertical, across
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
    face_axis = rng.choice(3, size=count, p=areas / areas.sum())
    local = (rng.random((count, 3)) - 0.5) * dims
    sign = np.where(rng.random(count) < 0.5, -0.5, 0.5)
    local[np.arange(count), face_axis] = sign * dims[face_axis]
    c, s = math.cos(box.theta), math.sin(box.theta)
    x = box.x + c * local[:, 0] + s * local[:, 2]
    z = box.z - s * local[:, 0] + c * local[:, 2]
    return np.column_stack([x, box.y + local[:, 1], z])


def render_features(boxes: Sequence[Box3D], labels: Sequence[int], calib: CalibMatrix,
                    channels: int, levels: int, noise: float, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Per-level category maps: channel ``1 + label`` inside each projected box, channel 0 elsewhere."""
    W, H = calib.image_size
    rects = []
    for box, lab in zip(boxes, labels):
        uv, _ = project_points(calib.camera_to_lidar(box.corners()), calib)
        rects.append((box.z, lab, uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()))
    rects.sort(key=lambda r: -r[0])  # far to near, nearer objects overwrite
    maps = []
    for lvl in range(levels):
        s = 2**lvl
        hl, wl = -(-H // s), -(-W // s)
        vv, uu = np.meshgrid((np.arange(hl) + 0.5) * s - 0.5, (np.arange(wl) + 0.5) * s - 0.5, indexing="ij")
        fmap = np.zeros((hl, wl, channels))
        fmap[..., 0] = 1.0
        for _, lab, u0, v0, u1, v1 in rects:
            inside = (uu >= u0) & (uu <= u1) & (vv >= v0) & (vv <= v1)
            fmap[inside] = 0.0
            fmap[inside, 1 + lab] = 1.0
        if noise > 0 and rng is not None:
            fmap = fmap + noise * rng.standard_normal(fmap.shape)
        maps.append(fmap)
    return maps


def generate_scene(config: SceneConfig = SceneConfig(), seed: int | None = None) -> SceneSample:
    seed = config.seed if seed is None else seed
    rng = make_rng(seed, 0)
    calib = synthetic_calib(config)
    half_fov = (config.image_width / 2) / config.focal
    boxes: list[Box3D] = []
    labels: list[int] = []
    for _ in range(config.objects):
        for _attempt in range(config.max_retries):
            lab = int(rng.integers(len(config.categories)))
            mh, mw, ml = CATEGORY_SIZES[config.categories[lab]]
            jit = 1.0 + config.size_jitter * (2 * rng.random(3) - 1)
            h, w, l = mh * jit[0], mw * jit[1], ml * jit[2]
            z = rng.uniform(config.z_min, config.z_max)
            x = rng.uniform(-half_fov * z, half_fov * z)
            cand = Box3D(x, GROUND_Y - h / 2, z, h, w, l, rng.uniform(-math.pi, math.pi))
            grown = Box3D(cand.x, cand.y, cand.z, cand.h, cand.w + 0.4, cand.l + 0.4, cand.theta)
            if not _box_projects_inside(cand, calib):
                continue
            if any(bev_intersection(grown, b) > 0.0 for b in boxes):
                continue
            boxes.append(cand)
            labels.append(lab)
            break
        else:
            raise GenerationError(
                f"could not place object {len(boxes) + 1} without overlap after {config.max_retries} tries"
            )

    parts = [np.zeros((0, 3))]
    for box in boxes:
        pts = _sample_surface(box, config.points_per_object, rng)
        if config.point_noise > 0:
            pts = pts + config.point_noise * rng.standard_normal(pts.shape)
        parts.append(pts)
    (x0, x1), _, (z0, z1) = CROP_RANGES
    n_ground = config.clutter_points * 4 // 5
    ground = np.column_stack([
        rng.uniform(x0, x1, n_ground),
        GROUND_Y + config.point_noise * rng.standard_normal(n_ground),
        rng.uniform(z0, z1, n_ground),
    ])
    n_float = config.clutter_points - n_ground
    floating = np.column_stack([
        rng.uniform(x0, x1, n_float), rng.uniform(-1.0, GROUND_Y, n_float), rng.uniform(z0, z1, n_float)
    ])
    clutter = np.vstack([ground, floating])
    for box in boxes:
        clutter = clutter[~box.contains(clutter, margin=0.1)]
    parts.append(clutter)
    cam = np.vstack(parts)
    cam = cam[in_ranges(cam)]
    lidar = calib.camera_to_lidar(cam)
    points = np.column_stack([lidar, rng.random(len(lidar))])

    maps = render_features(boxes, labels, calib, config.channels, config.levels, config.feature_noise, rng)
    return SceneSample(
        points=points,
        image_features=maps,
        calib=calib,
        gt_boxes=boxes,
        categories=[config.categories[i] for i in labels],
        rng_seed=seed,
        strides=[float(2**lvl) for lvl in range(config.levels)],
    )


def load_kitti_frame(kitti_dir, frame: str, feature_scale: float = 0.125, levels: int = 4,
                     categories: Sequence[str] = ("Car", "Pedestrian", "Cyclist")) -> SceneSample:
    """Read ``calib/``, ``label_2/`` and (if present) ``velodyne/`` for one frame.

    Image pixels are not decoded: level maps are rendered from the labels at
    ``feature_scale`` of the camera resolution, like the synthetic scenes.
    """
    root = Path(kitti_dir)
    calib_path = root / "calib" / f"{frame}.txt"
    label_path = root / "label_2" / f"{frame}.txt"
    try:
        calib = parse_calib(calib_path.read_text())
        labels = parse_labels(label_path.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read KITTI frame {frame}: {exc}") from None
    labels = [lb for lb in labels if lb.category in categories]
    boxes = [lb.to_box() for lb in labels]
    velo = root / "velodyne" / f"{frame}.bin"
    points = read_bin(velo) if velo.exists() else np.zeros((0, 4))
    small = scale_calib(calib, feature_scale)
    maps = render_features(boxes, [list(categories).index(lb.category) for lb in labels], small,
                           len(categories) + 1, levels, 0.0, None)
    return SceneSample(points, maps, small, boxes, [lb.category for lb in labels], None,
                       [float(2**lvl) for lvl in range(levels)])


def list_kitti_frames(kitti_dir) -> list[str]:
    return sorted(p.stem for p in (Path(kitti_dir) / "label_2").glob("*.txt"))
