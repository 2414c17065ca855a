"""Orthographic multi-view splatting of point clouds to grayscale images.

Each point is drawn as a disc of fixed world radius. A pixel's intensity
is the summed exact coverage of the discs nearest in depth (up to
points_per_pixel of them), clamped to 1. Coverage uses the closed-form
circle/rectangle intersection area, so images are a deterministic pure
function of the cloud and camera, independent of any thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def worker_count():
    """Parallelism cap: COT_THREADS when set and positive, else cpu count."""
    raw = os.environ.get("COT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        return n
    return os.cpu_count() or 1


@dataclass
class RenderParams:
    image_size: int = 32
    point_radius: float = 0.008
    points_per_pixel: int = 2

    def __post_init__(self):
        if self.image_size < 1:
            raise ContractError("image_size must be positive")
        if self.point_radius <= 0:
            raise ContractError("point_radius must be positive")
        if self.points_per_pixel < 1:
            raise ContractError("points_per_pixel must be at least 1")


@dataclass
class CameraRig:
    """Equally spaced orbit of orthographic cameras at one elevation."""

    num_views: int = 12
    elevation: float = 0.0

    def __post_init__(self):
        if self.num_views < 1:
            raise ContractError("num_views must be positive")

    @property
    def azimuths(self):
        step = 2.0 * math.pi / self.num_views
        return [i * step for i in range(self.num_views)]


@dataclass
class ImageStack:
    images: np.ndarray  # (num_views, H, W) float32 in [0, 1]
    azimuths: list
    elevation: float


def _turns_trig(frac):
    """(sin, cos) of frac full turns, exact at quarter-turn multiples.

    Reducing the fraction rather than the radian value keeps symmetric
    camera placements (like 4 views at 90 degrees) numerically identical,
    which in turn makes renders of symmetric clouds bitwise equal.
    """
    t = math.fmod(frac, 1.0)
    if t < 0.0:
        t += 1.0
    r = math.fmod(t, 0.25)
    q = int(round((t - r) / 0.25)) % 4
    if r == 0.0:
        s0, c0 = 0.0, 1.0
    else:
        s0, c0 = math.sin(2.0 * math.pi * r), math.cos(2.0 * math.pi * r)
    if q == 0:
        s, c = s0, c0
    elif q == 1:
        s, c = c0, -s0
    elif q == 2:
        s, c = -s0, -c0
    else:
        s, c = -c0, s0
    # + 0.0 folds negative zero into plain zero
    return s + 0.0, c + 0.0


def _camera_basis(sa, ca, se, ce):
    right = np.array([-sa, ca, 0.0])
    fwd = np.array([-ce * ca, -ce * sa, -se])
    up = np.cross(right, fwd)
    return right, up, fwd


def _seg(x, r):
    """Integral of sqrt(r^2 - t^2) from 0 to x, with x clamped to [-r, r]."""
    x = max(-r, min(r, x))
    return 0.5 * (x * math.sqrt(max(r * r - x * x, 0.0)) + r * r * math.asin(x / r))


def _halfstrip(a, b, c, r):
    """Area of { a <= u <= b, 0 <= w <= min(c, sqrt(r^2 - u^2)) } for c >= 0."""
    if c <= 0.0:
        return 0.0
    a = max(a, -r)
    b = min(b, r)
    if b <= a:
        return 0.0
    if c >= r:
        return _seg(b, r) - _seg(a, r)
    t = math.sqrt(r * r - c * c)
    area = 0.0
    hi = min(b, -t)
    if hi > a:
        area += _seg(hi, r) - _seg(a, r)
    lo, hi = max(a, -t), min(b, t)
    if hi > lo:
        area += c * (hi - lo)
    lo = max(a, t)
    if b > lo:
        area += _seg(b, r) - _seg(lo, r)
    return area


def disc_rect_area(cx, cy, r, x_lo, x_hi, y_lo, y_hi):
    """Exact area of the disc ((cx, cy), r) clipped to an axis-aligned box.

    Written as G(top) - G(bot) where G(c) is the signed area of the disc
    below height c; both halves reduce to the half-strip primitive.
    """
    a, b = x_lo - cx, x_hi - cx
    top, bot = y_hi - cy, y_lo - cy

    def g(c):
        if c >= 0.0:
            return _halfstrip(a, b, c, r)
        return -_halfstrip(a, b, -c, r)

    return max(g(top) - g(bot), 0.0)


def render_view(cloud, azimuth, elevation, params):
    """Project along one orthographic camera and splat to an image.

    The camera looks at the origin; image x runs along the azimuth
    tangent, image y along the elevated up vector, both spanning [-1, 1].
    Ties in depth resolve by point index, so equal inputs give bitwise
    equal images.
    """
    basis = _camera_basis(
        math.sin(azimuth), math.cos(azimuth), math.sin(elevation), math.cos(elevation)
    )
    return _render_projected(cloud, basis, params)


def _render_projected(cloud, basis, params):
    size = params.image_size
    pts = cloud.points.astype(np.float64)
    right, up, fwd = basis

    u = pts @ right
    v = pts @ up
    depth = pts @ fwd
    pw = 2.0 / size
    rad = params.point_radius
    pixel_area = pw * pw

    buckets: dict[tuple, list] = {}
    for idx in range(pts.shape[0]):
        cu, cv, d = u[idx], v[idx], depth[idx]
        c_lo = max(int(math.floor((cu - rad + 1.0) / pw)), 0)
        c_hi = min(int(math.floor((cu + rad + 1.0) / pw)), size - 1)
        r_lo = max(int(math.floor((1.0 - (cv + rad)) / pw)), 0)
        r_hi = min(int(math.floor((1.0 - (cv - rad)) / pw)), size - 1)
        for row in range(r_lo, r_hi + 1):
            y_hi = 1.0 - row * pw
            y_lo = y_hi - pw
            for col in range(c_lo, c_hi + 1):
                x_lo = -1.0 + col * pw
                cov = disc_rect_area(cu, cv, rad, x_lo, x_lo + pw, y_lo, y_hi)
                if cov > 0.0:
                    buckets.setdefault((row, col), []).append((d, idx, cov / pixel_area))

    img = np.zeros((size, size), dtype=np.float32)
    for (row, col), hits in buckets.items():
        hits.sort(key=lambda h: (h[0], h[1]))
        total = sum(h[2] for h in hits[: params.points_per_pixel])
        img[row, col] = min(1.0, total)
    return img


def render_multiview(cloud, rig, params):
    """Render every rig camera; views are farmed out to a thread pool but
    each image depends only on its own camera, so the stack is identical
    for any worker count. Per-view sin/cos come from the exact view
    fraction i/m, so symmetric rigs see symmetric clouds identically."""
    m = rig.num_views
    se, ce = math.sin(rig.elevation), math.cos(rig.elevation)
    bases = []
    for i in range(m):
        sa, ca = _turns_trig(i / m)
        bases.append(_camera_basis(sa, ca, se, ce))
    workers = min(worker_count(), m)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(lambda b: _render_projected(cloud, b, params), bases))
    else:
        images = [_render_projected(cloud, b, params) for b in bases]
    return ImageStack(np.stack(images), rig.azimuths, rig.elevation)


# ---------------------------------------------------------------------------
# PGM files


def write_pgm(image, path):
    """Binary 8-bit PGM: P5 header then rows of rounded 0..255 bytes."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"PGM wants a 2D image, got shape {img.shape}")
    h, w = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ContractError(f"{path}: not an 8-bit binary PGM")
    try:
        w, h = (int(t) for t in parts[1].split())
    except ValueError:
        raise ContractError(f"{path}: malformed PGM size line") from None
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w)
    return pixels.reshape(h, w).copy()
