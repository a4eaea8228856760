"""Command-line front end: ``fusedet <command> [options]``.

Every command derives all randomness from ``--seed`` and writes its
artifacts under ``--out``.  CSV files always start with a header row.  Exit
status is 0 only when every internal check of the command passed.
"""
from __future__ import annotations

import argparse
import csv
import functools
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck, harness
from .scene import (
    KittiLabel,
    SceneConfig,
    list_kitti_frames,
    load_kitti_frame,
    parse_scene_config,
    serialize_calib,
    serialize_labels,
    write_bin,
)
from .setdet import DEFAULT_BOX_CAP
from .plot import line_chart

DEFAULT_V_GRID = tuple(round(0.1 * i, 1) for i in range(10))

# CSV schemas, kept in one place so they stay stable
GRADCHECK_COLUMNS = ("suite", "op", "max_rel_error", "points", "passed")
MATCH_COLUMNS = ("scene", "gt_count", "pred_count", "optimal_cost", "oracle_cost", "equal")
RATIO_COLUMNS = ("selector", "v", "positives", "above_v", "ratio", "vacuous")
INVARIANCE_COLUMNS = ("scene", "gt_count", "unchanged_by_nms")
PROBE_COLUMNS = ("scene", "nodes", "foreground", "r2_plain", "r2_fused", "fused_ge_plain")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    scenes: int = 0
    out: Path = Path("fusedet-out")
    workers: int = 1
    tau: float = 0.7
    v_grid: tuple[float, ...] = DEFAULT_V_GRID
    iou: str = "3d"
    k: int = 9
    t_steps: int = 1
    box_cap: int = DEFAULT_BOX_CAP
    only: tuple[str, ...] = ()
    kitti_dir: Path | None = None
    tol: float = gradcheck.DEFAULT_TOL
    points: int = gradcheck.DEFAULT_POINTS
    nms_iou: float = 0.7
    train_scenes: int = 20
    oracle_preds: bool = False
    plot: bool = True
    variant: str = "cdmp_1x4"
    update: str = "concat"
    max_nodes: int = 512
    identity: bool = False
    scene_config: Path | None = None

    def validate(self) -> RunConfig:
        self.out = Path(self.out).resolve()
        if self.kitti_dir is not None:
            self.kitti_dir = Path(self.kitti_dir).resolve()
            if not (self.kitti_dir / "label_2").is_dir():
                raise ValueError(f"{self.kitti_dir}: no label_2/ directory")
        if self.scene_config is not None:
            self.scene_config = Path(self.scene_config).resolve()
        checks = [
            (self.scenes >= 0, "--scenes must be >= 0"),
            (self.workers >= 1, "--workers must be >= 1"),
            (0.0 <= self.tau <= 1.0, "--tau must lie in [0, 1]"),
            (all(0.0 <= v <= 1.0 for v in self.v_grid), "--v-grid values must lie in [0, 1]"),
            (self.k >= 1, "--k must be >= 1"),
            (self.t_steps >= 1, "--t-steps must be >= 1"),
            (self.box_cap >= 1, "--box-cap must be >= 1"),
            (self.tol > 0.0, "--tol must be positive"),
            (self.points >= 1, "--points must be >= 1"),
            (0.0 <= self.nms_iou <= 1.0, "--nms-iou must lie in [0, 1]"),
            (self.train_scenes >= 1, "--train-scenes must be >= 1"),
            (self.max_nodes >= 1, "--max-nodes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self


def _num(x: float | None) -> str:
    """Shortest repr that round-trips; blank for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _kitti_scene(kitti_dir: str, frames: tuple[str, ...], index: int):
    return load_kitti_frame(kitti_dir, frames[index])


def _scene_source(cfg: RunConfig, default_count: int):
    """``(scene_fn or None, count)``; scene_fn is picklable for the worker pool."""
    if cfg.kitti_dir is None:
        return None, cfg.scenes or default_count
    frames = tuple(list_kitti_frames(cfg.kitti_dir))
    count = min(len(frames), cfg.scenes) if cfg.scenes else len(frames)
    return functools.partial(_kitti_scene, str(cfg.kitti_dir), frames), count


# -- commands ----------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradcheck.run_suites(cfg.seed, cfg.points, cfg.only or None)
    failed = []
    for r in results:
        ok = r.passed(cfg.tol)
        print(f"{r.suite:9s} {r.op:28s} max_rel_err={r.max_error:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(f"{r.suite}/{r.op}")
    _write_csv(cfg.out / "gradcheck.csv", GRADCHECK_COLUMNS,
               [(r.suite, r.op, f"{r.max_error:.6e}", r.points, str(r.passed(cfg.tol)).lower()) for r in results])
    if failed:
        print(f"{len(failed)} of {len(results)} checks above tolerance {cfg.tol:g}: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks below tolerance {cfg.tol:g}")
    return 0


def cmd_match_demo(cfg: RunConfig) -> int:
    scene_fn, count = _scene_source(cfg, 50)
    sim = harness.SimConfig(count=cfg.box_cap, iou_kind=cfg.iou)
    rows = harness.run_ordered(harness.match_demo_scene,
                               [(cfg.seed, i, sim, 8, scene_fn) for i in range(count)], cfg.workers)
    _write_csv(cfg.out / "match_demo.csv", MATCH_COLUMNS, [
        (r.scene, r.gt_count, r.pred_count, _num(r.optimal_cost), _num(r.oracle_cost),
         "" if r.equal is None else str(r.equal).lower())
        for r in rows
    ])
    compared = [r for r in rows if r.equal is not None]
    mismatched = [r.scene for r in compared if not r.equal]
    print(f"{len(rows)} scenes, {len(compared)} checked against the exhaustive oracle, "
          f"{len(mismatched)} mismatches")
    if mismatched:
        print(f"mismatching scenes: {mismatched}")
        return 1
    return 0


def cmd_compare_nms(cfg: RunConfig) -> int:
    scene_fn, count = _scene_source(cfg, 100)
    sim = harness.SimConfig(count=cfg.box_cap, iou_kind=cfg.iou, oracle=cfg.oracle_preds)
    theta = np.zeros(5)
    if not cfg.oracle_preds:
        theta = harness.train_match_head(cfg.seed, cfg.train_scenes, sim, cfg.workers).theta
    scenes = harness.run_ordered(
        harness.compare_scene, [(cfg.seed, i, sim, theta, cfg.nms_iou, scene_fn) for i in range(count)], cfg.workers
    )
    rows = harness.consistency_curves(scenes, cfg.v_grid, cfg.tau)
    _write_csv(cfg.out / "consistency_ratio.csv", RATIO_COLUMNS, [
        (r.selector, _num(r.v), r.positives, r.above, _num(r.ratio), str(r.positives == 0).lower()) for r in rows
    ])
    _write_csv(cfg.out / "nms_invariance.csv", INVARIANCE_COLUMNS,
               [(s.index, s.gt_count, str(s.nms_invariant).lower()) for s in scenes])
    if cfg.plot:
        series = {
            name: ([r.v for r in rows if r.selector == name], [r.ratio for r in rows if r.selector == name])
            for name in harness.SELECTORS
        }
        svg = line_chart(series, title=f"consistency ratio, tau = {cfg.tau:g}",
                         xlabel="confidence threshold v", ylabel="R", ylim=(0.0, 1.0))
        (cfg.out / "consistency_ratio.svg").write_text(svg)

    problems = []
    for name in harness.SELECTORS:
        curve = [r.ratio for r in rows if r.selector == name]
        if any(not 0.0 <= x <= 1.0 for x in curve):
            problems.append(f"{name}: ratio outside [0, 1]")
        grid = [r.v for r in rows if r.selector == name]
        order = np.argsort(grid, kind="stable")
        if any(curve[order[i]] < curve[order[i + 1]] for i in range(len(order) - 1)):
            problems.append(f"{name}: ratio increases with v")
    for name in harness.SELECTORS:
        pos = next((r.positives for r in rows if r.selector == name), 0)
        print(f"{name:10s} positives={pos:5d}  R=" + " ".join(f"{r.ratio:.3f}" for r in rows if r.selector == name))
    unchanged = sum(s.nms_invariant for s in scenes)
    print(f"set-based >= nms-on-cls at every v: strict={harness.dominates(rows)} "
          f"within 2 s.e.={harness.dominates(rows, sigmas=2.0)}")
    print(f"set-based output unchanged by NMS@{cfg.nms_iou:g}: {unchanged}/{len(scenes)} scenes")
    for p in problems:
        print(f"check failed: {p}")
    return 1 if problems else 0


def cmd_propagate(cfg: RunConfig) -> int:
    scene_fn, count = _scene_source(cfg, 100)
    jobs = [(cfg.seed, i, cfg.k, cfg.t_steps, cfg.variant, cfg.update, cfg.max_nodes, cfg.identity, scene_fn)
            for i in range(count)]
    results = harness.run_ordered(harness.propagate_scene, jobs, cfg.workers)
    latent_dir = cfg.out / "latents"
    problems = []
    rows = []
    for r in results:
        cols = r.refined.shape[1]
        _write_csv(latent_dir / f"scene_{r.scene:04d}.csv", ("node", "u", "v", "foreground", *[f"f{j}" for j in range(cols)]), [
            (i, _num(r.positions[i, 0]), _num(r.positions[i, 1]), int(r.labels[i]), *[_num(x) for x in r.refined[i]])
            for i in range(len(r.labels))
        ])
        both = not (math.isnan(r.r2_plain) or math.isnan(r.r2_fused))
        ge = both and r.r2_fused >= r.r2_plain - 1e-9
        rows.append((r.scene, r.nodes, r.foreground, _num(r.r2_plain), _num(r.r2_fused), str(ge).lower() if both else ""))
        if cfg.identity and cfg.update == "concat":
            C = r.refined.shape[1] // 2
            if np.any(r.refined[:, C:] != 0.0):
                problems.append(f"scene {r.scene}: identity configuration produced a non-zero message")
        if cfg.update == "concat" and both and not ge:
            problems.append(f"scene {r.scene}: fused probe score below the plain one")
    _write_csv(cfg.out / "probe.csv", PROBE_COLUMNS, rows)
    plain = [r.r2_plain for r in results if not math.isnan(r.r2_plain)]
    fused = [r.r2_fused for r in results if not math.isnan(r.r2_fused)]
    if plain:
        print(f"{len(results)} scenes: mean probe R^2 plain={np.mean(plain):.4f} fused={np.mean(fused):.4f}")
    for p in problems:
        print(f"check failed: {p}")
    return 1 if problems else 0


def cmd_gen_scenes(cfg: RunConfig) -> int:
    base = SceneConfig()
    if cfg.scene_config is not None:
        try:
            base = parse_scene_config(cfg.scene_config.read_text())
        except OSError as exc:
            raise OSError(f"cannot read {cfg.scene_config}: {exc.strerror}") from None
    count = cfg.scenes or 10
    for sub in ("calib", "label_2", "velodyne", "features"):
        (cfg.out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(count):
        sc = harness.seeded_scene(cfg.seed, 0, i, min_objects=base.objects, max_objects=base.objects, config=base)
        name = f"{i:06d}"
        (cfg.out / "calib" / f"{name}.txt").write_text(serialize_calib(sc.calib))
        labels = [KittiLabel.from_box(b, c, sc.calib) for b, c in zip(sc.gt_boxes, sc.categories)]
        (cfg.out / "label_2" / f"{name}.txt").write_text(serialize_labels(labels))
        write_bin(cfg.out / "velodyne" / f"{name}.bin", sc.points)
        for lvl, fmap in enumerate(sc.image_features):
            np.save(cfg.out / "features" / f"{name}_l{lvl}.npy", fmap)
    print(f"wrote {count} scenes to {cfg.out}")
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "match-demo": cmd_match_demo,
    "compare-nms": cmd_compare_nms,
    "propagate": cmd_propagate,
    "gen-scenes": cmd_gen_scenes,
}


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusedet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenes_default: int | None = None):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("fusedet-out"))
        p.add_argument("--workers", type=int, default=1, help="parallel scene workers")
        if scenes_default is not None:
            p.add_argument("--scenes", type=int, default=0, help=f"scene count (default {scenes_default})")

    def scenes_opts(p):
        p.add_argument("--kitti-dir", type=Path, help="read calib/, label_2/, velodyne/ instead of synthesising")
        p.add_argument("--iou", choices=("bev", "3d"), default="3d")
        p.add_argument("--box-cap", type=int, default=DEFAULT_BOX_CAP, help="candidate boxes per scene")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(p)
    p.add_argument("--only", action="append", default=[], help="suite name; repeat or comma-separate")
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--points", type=int, default=gradcheck.DEFAULT_POINTS)

    p = sub.add_parser("match-demo", help="Hungarian matching against an exhaustive oracle")
    common(p, 50)
    scenes_opts(p)

    p = sub.add_parser("compare-nms", help="consistency ratio of set-based and NMS selectors")
    common(p, 100)
    scenes_opts(p)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--v-grid", type=_float_list, default=DEFAULT_V_GRID)
    p.add_argument("--nms-iou", type=float, default=0.7)
    p.add_argument("--train-scenes", type=int, default=20)
    p.add_argument("--oracle-preds", action="store_true", help="exact ground-truth copies with c = 1")
    p.add_argument("--no-plot", dest="plot", action="store_false")

    p = sub.add_parser("propagate", help="run message propagation and a linear probe")
    common(p, 100)
    p.add_argument("--kitti-dir", type=Path)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--t-steps", type=int, default=1)
    p.add_argument("--variant", choices=("cdmp_1x1", "cdmp_1x4"), default="cdmp_1x4")
    p.add_argument("--update", choices=("residual", "concat"), default="concat")
    p.add_argument("--max-nodes", type=int, default=512)
    p.add_argument("--identity", action="store_true", help="zero walks, unit affinity, alpha = 0")

    p = sub.add_parser("gen-scenes", help="write synthetic scenes in KITTI layout")
    common(p, 10)
    p.add_argument("--config", dest="scene_config", type=Path, help="key = value scene config file")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    values = {k: v for k, v in vars(ns).items() if v is not None}
    if "only" in values:
        values["only"] = tuple(s.strip() for item in values["only"] for s in item.split(",") if s.strip())
    if "v_grid" in values:
        values["v_grid"] = tuple(values["v_grid"])
    return RunConfig(**values).validate()


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
