import math
import os

import numpy as np
import pytest

from cotda import pointcloud as pc
from cotda import render
from cotda.errors import ContractError


def quadruple(base):
    """Close a point set under exact quarter-turn rotation (x, y) -> (-y, x)."""
    pts = []
    for x, y, z in base:
        pts += [(x, y, z), (-y, x, z), (-x, -y, z), (y, -x, z)]
    return pc.PointCloud(np.array(pts, dtype=np.float32))


def test_disc_rect_area_closed_forms():
    r = 0.01
    full = render.disc_rect_area(0, 0, r, -1, 1, -1, 1)
    assert abs(full - math.pi * r * r) <= 1e-15
    half = render.disc_rect_area(0, 0, r, 0, 1, -1, 1)
    assert abs(half - math.pi * r * r / 2) <= 1e-15
    quarter = render.disc_rect_area(0, 0, r, 0, 1, 0, 1)
    assert abs(quarter - math.pi * r * r / 4) <= 1e-15
    outside = render.disc_rect_area(0, 0, r, 0.5, 1, 0.5, 1)
    assert outside == 0.0


def test_disc_rect_area_additive_over_pixel_split():
    # disc straddling a pixel border: the two halves must sum to the disc
    r, cx = 0.02, 0.5
    left = render.disc_rect_area(cx, 0.3, r, 0.0, 0.5, 0.0, 1.0)
    right = render.disc_rect_area(cx, 0.3, r, 0.5, 1.0, 0.0, 1.0)
    assert abs(left + right - math.pi * r * r) <= 1e-15


def test_single_point_at_origin_centers_on_odd_grid():
    cloud = pc.PointCloud(np.zeros((1, 3), dtype=np.float32))
    img = render.render_view(cloud, 0.0, 0.0, render.RenderParams(image_size=33))
    lit = np.argwhere(img > 0)
    assert lit.tolist() == [[16, 16]]
    want = math.pi * 0.008**2 / (2.0 / 33) ** 2
    assert abs(float(img[16, 16]) - want) <= 1e-6


def test_points_outside_frame_render_black():
    cloud = pc.PointCloud(np.array([[5.0, 5.0, 0.0], [-3.0, 2.0, 9.0]], np.float32))
    img = render.render_view(cloud, 0.3, 0.1, render.RenderParams())
    assert img.max() == 0.0


def test_intensity_clamped_to_one():
    pts = np.zeros((64, 3), dtype=np.float32)
    cloud = pc.PointCloud(pts)
    img = render.render_view(
        cloud, 0.0, 0.0, render.RenderParams(image_size=9, point_radius=0.3, points_per_pixel=64)
    )
    assert img.max() <= 1.0
    assert img[4, 4] == 1.0


def test_nearest_points_win_at_depth_cap():
    # two coincident-in-image points; with points_per_pixel=1 only the
    # nearer one contributes
    pts = np.array([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0]], np.float32)
    cloud = pc.PointCloud(pts)
    p1 = render.RenderParams(image_size=33, points_per_pixel=1)
    p2 = render.RenderParams(image_size=33, points_per_pixel=2)
    one = render.render_view(cloud, 0.0, 0.0, p1)
    two = render.render_view(cloud, 0.0, 0.0, p2)
    assert abs(two[16, 16] - 2 * one[16, 16]) <= 1e-6


def test_lit_pixels_monotone_in_radius():
    rng = np.random.default_rng(0)
    cloud = pc.PointCloud(rng.normal(size=(30, 3)).astype(np.float32) * 0.4)
    prev = -1
    for radius in (0.004, 0.008, 0.02, 0.05):
        img = render.render_view(cloud, 0.4, 0.2, render.RenderParams(point_radius=radius))
        lit = int((img > 0).sum())
        assert lit >= prev
        prev = lit


def test_rig_spacing_is_exact():
    rig = render.CameraRig(num_views=12)
    az = rig.azimuths
    assert len(az) == 12 and az[0] == 0.0
    step = 2.0 * math.pi / 12
    assert all(az[i] == i * step for i in range(12))


def test_fourfold_symmetric_cloud_renders_identically():
    rng = np.random.default_rng(1)
    base = [(float(x), float(y), float(z)) for x, y, z in rng.normal(size=(6, 3)) * 0.35]
    cloud = quadruple(base)
    stack = render.render_multiview(
        cloud, render.CameraRig(num_views=4, elevation=0.25), render.RenderParams(point_radius=0.03)
    )
    for i in range(1, 4):
        assert np.array_equal(stack.images[0], stack.images[i])


def test_multiview_thread_count_does_not_change_bits(monkeypatch):
    rng = np.random.default_rng(2)
    cloud = pc.PointCloud(rng.normal(size=(40, 3)).astype(np.float32) * 0.4)
    rig = render.CameraRig(num_views=6, elevation=0.3)
    prm = render.RenderParams(point_radius=0.02)
    monkeypatch.setenv("COT_THREADS", "1")
    seq = render.render_multiview(cloud, rig, prm).images
    monkeypatch.setenv("COT_THREADS", "4")
    par = render.render_multiview(cloud, rig, prm).images
    assert np.array_equal(seq, par)


def test_repeat_renders_are_bit_identical():
    rng = np.random.default_rng(3)
    cloud = pc.PointCloud(rng.normal(size=(25, 3)).astype(np.float32) * 0.4)
    prm = render.RenderParams()
    a = render.render_view(cloud, 1.1, 0.2, prm)
    b = render.render_view(cloud, 1.1, 0.2, prm)
    assert a.tobytes() == b.tobytes()


def test_pgm_roundtrip_and_header(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.random((5, 7)).astype(np.float32)
    path = tmp_path / "v.pgm"
    render.write_pgm(img, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
    assert len(raw) == len(b"P5\n7 5\n255\n") + 35
    back = render.load_pgm(path)
    np.testing.assert_array_equal(back, np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8))


def test_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ContractError):
        render.load_pgm(path)


def test_param_validation():
    with pytest.raises(ContractError):
        render.RenderParams(image_size=0)
    with pytest.raises(ContractError):
        render.RenderParams(point_radius=0.0)
    with pytest.raises(ContractError):
        render.CameraRig(num_views=0)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("COT_THREADS", "3")
    assert render.worker_count() == 3
    monkeypatch.setenv("COT_THREADS", "junk")
    assert render.worker_count() >= 1
    monkeypatch.delenv("COT_THREADS")
    assert render.worker_count() >= 1
