from __future__ import annotations

import math

import numpy as np
import pytest

from fusedet.geometry import Box3D, iou_bev, project_points
from fusedet.scene import (
    CROP_RANGES,
    GROUND_Y,
    EmptySceneError,
    GenerationError,
    KittiLabel,
    ParseError,
    SceneConfig,
    crop_and_subsample,
    generate_scene,
    parse_calib,
    parse_labels,
    parse_scene_config,
    read_bin,
    read_csv_points,
    serialize_calib,
    serialize_labels,
    write_bin,
    write_csv_points,
)

from helpers import crafted_calib_file, crafted_label_file

IDENTITY_R0 = "1 0 0 0 1 0 0 0 1"
IDENTITY_TR = "1 0 0 0 0 1 0 0 0 0 1 0"


def calib_text(p2, r0=IDENTITY_R0, tr=IDENTITY_TR):
    return f"P0: {' '.join(['0'] * 12)}\nP2: {p2}\nR0_rect: {r0}\nTr_velo_to_cam: {tr}\n"


def test_calib_row_major_and_identity_composition():
    calib = parse_calib(calib_text(" ".join(str(i) for i in range(1, 13))))
    assert np.array_equal(calib.raw["P2"], np.arange(1, 13, dtype=float).reshape(3, 4))
    assert np.array_equal(calib.P, calib.raw["P2"])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def test_calib_matches_matrix_chain_oracle():
    p2 = np.array([[700.0, 0, 600, 45], [0, 700, 180, -0.3], [0, 0, 1, 0.005]])
    r0 = _rot_y(0.01)
    rot = np.array([[0.0, -1, 0], [0, 0, -1], [1, 0, 0]]) @ _rot_y(0.02).T
    t = np.array([0.1, -0.08, -0.27])
    tr = np.hstack([rot, t[:, None]])
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
    calib = parse_calib(calib_text(fmt(p2), fmt(r0), fmt(tr)))
    pts = np.random.default_rng(0).uniform([5, -10, -2], [50, 10, 2], (30, 3))
    uv, _ = project_points(pts, calib)
    for p, got in zip(pts, uv):
        cam = r0 @ (rot @ p + t)
        hom = p2[:, :3] @ cam + p2[:, 3]
        assert np.allclose(got, hom[:2] / hom[2], rtol=1e-12)


def test_calib_errors():
    with pytest.raises(ParseError, match="missing key 'R0_rect'"):
        parse_calib(f"P2: {' '.join(['1'] * 12)}\nTr_velo_to_cam: {IDENTITY_TR}\n")
    with pytest.raises(ParseError, match=r"line 2: key 'P2' expects 12 values, got 9"):
        parse_calib(calib_text(" ".join(["1"] * 9)))
    with pytest.raises(ParseError, match="line 1"):
        parse_calib("P2 1 2 3\n")


LABEL = "Car 0.00 0 -1.57 614.24 181.78 727.31 284.77 1.57 1.73 4.15 1.00 1.75 13.22 -1.62\n"


def test_labels_examples():
    assert parse_labels("") == []
    (car,) = parse_labels(LABEL)
    assert car.category == "Car" and car.occlusion == 0
    assert (car.h, car.w, car.l) == (1.57, 1.73, 4.15)
    assert (car.x, car.y, car.z, car.rotation_y) == (1.0, 1.75, 13.22, -1.62)
    box = car.to_box()
    assert box.y == pytest.approx(1.75 - 1.57 / 2) and box.theta == -1.62
    dontcare = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
    assert len(parse_labels(LABEL + dontcare)) == 1
    assert len(parse_labels(LABEL + dontcare, keep_dontcare=True)) == 2


def test_labels_field_count_error_names_line():
    with pytest.raises(ParseError, match="line 2: expected 15 fields, got 14"):
        parse_labels(LABEL + "Car 0.00 0 -1.57 614.24 181.78 727.31 284.77 1.57 1.73 4.15 1.00 1.75 13.22\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_labels(LABEL.replace("1.57", "abc", 1))


def test_round_trips_on_crafted_files():
    rng = np.random.default_rng(42)
    for _ in range(20):
        text = crafted_label_file(rng)
        labels = parse_labels(text)
        assert serialize_labels(labels) == text
        assert parse_labels(serialize_labels(labels)) == labels

        ctext = crafted_calib_file(rng)
        calib = parse_calib(ctext)
        again = parse_calib(serialize_calib(calib))
        assert set(again.raw) == set(calib.raw)
        for key, vals in calib.raw.items():
            assert np.array_equal(again.raw[key], vals)
            assert np.array_equal(np.round(again.raw[key], 6), vals)
        assert np.array_equal(again.P, calib.P)


def test_label_from_box_round_trip():
    box = Box3D(2.0, 1.0, 20.0, 1.5, 1.6, 3.9, 0.3)
    lb = KittiLabel.from_box(box, "Car")
    assert lb.y == pytest.approx(1.75)
    assert np.allclose(lb.to_box().as_array(), box.as_array(), atol=1e-15)


def test_crop_boundaries_and_count():
    (x0, x1), (y0, y1), (z0, z1) = CROP_RANGES
    pts = np.array([[x0, y0, z0, 0.1], [x1, y1, z1, 0.2], [41.0, 0.0, 10.0, 0.3], [0.0, 0.0, -0.5, 0.4]])
    out = crop_and_subsample(pts, target_count=2)
    assert np.array_equal(out, pts[:2])
    rng = np.random.default_rng(1)
    cloud = np.column_stack([rng.uniform(-30, 30, 500), rng.uniform(-1, 3, 500), rng.uniform(0, 70, 500), rng.random(500)])
    assert crop_and_subsample(cloud, target_count=200, seed=3).shape == (200, 4)
    padded = crop_and_subsample(cloud, target_count=800, seed=3)
    assert padded.shape == (800, 4) and np.array_equal(padded[:500], cloud)
    assert np.array_equal(crop_and_subsample(cloud, target_count=200, seed=3),
                          crop_and_subsample(cloud, target_count=200, seed=3))
    with pytest.raises(EmptySceneError):
        crop_and_subsample(np.array([[100.0, 0.0, 0.0, 0.0]]))


def test_generate_scene_empty_and_deterministic():
    empty = generate_scene(SceneConfig(objects=0), seed=1)
    assert empty.gt_boxes == [] and len(empty.points) > 0
    a, b = generate_scene(SceneConfig(), seed=7), generate_scene(SceneConfig(), seed=7)
    assert np.array_equal(a.points, b.points)
    assert all(np.array_equal(x, y) for x, y in zip(a.image_features, b.image_features))
    assert a.gt_boxes == b.gt_boxes and a.categories == b.categories
    c = generate_scene(SceneConfig(), seed=8)
    assert not np.array_equal(a.points, c.points)


def test_generate_scene_noise_free_points_lie_on_box():
    cfg = SceneConfig(objects=1, point_noise=0.0, clutter_points=0)
    for seed in range(5):
        scene = generate_scene(cfg, seed=seed)
        (box,) = scene.gt_boxes
        cam = scene.points_camera()
        assert len(cam) == cfg.points_per_object
        assert box.contains(cam, margin=1e-9).all()


def test_generate_scene_layout():
    cfg = SceneConfig(objects=6)
    for seed in range(5):
        scene = generate_scene(cfg, seed=seed)
        boxes = scene.gt_boxes
        for i, a in enumerate(boxes):
            assert a.y + a.h / 2 == pytest.approx(GROUND_Y)
            _, mask = project_points(scene.calib.camera_to_lidar(a.corners()), scene.calib)
            assert mask.all()
            for b in boxes[i + 1:]:
                assert iou_bev(a, b) == 0.0
        assert [m.shape[:2] for m in scene.image_features] == [(48, 160), (24, 80), (12, 40), (6, 20)]


def test_generate_scene_gives_up_when_crowded():
    with pytest.raises(GenerationError):
        generate_scene(SceneConfig(objects=40, z_min=10.0, z_max=11.0, max_retries=20), seed=0)


def test_scene_config_parsing():
    cfg = parse_scene_config("objects = 3  # three\ncategories = Car, Cyclist\nfocal = 80\n")
    assert cfg.objects == 3 and cfg.categories == ("Car", "Cyclist") and cfg.focal == 80.0
    with pytest.raises(ParseError, match="unknown key 'colour'"):
        parse_scene_config("colour = red\n")
    with pytest.raises(ParseError):
        parse_scene_config("objects = many\n")
    with pytest.raises(ParseError):
        parse_scene_config("categories = Truck\n")


def test_point_io(tmp_path):
    pts = np.random.default_rng(2).uniform(-10, 10, (50, 4)).astype(np.float32).astype(np.float64)
    write_bin(tmp_path / "a.bin", pts)
    assert np.array_equal(read_bin(tmp_path / "a.bin"), pts)
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 12)
    with pytest.raises(ParseError):
        read_bin(tmp_path / "bad.bin")
    write_csv_points(tmp_path / "a.csv", pts)
    assert np.allclose(read_csv_points(tmp_path / "a.csv"), pts, atol=5e-7)
