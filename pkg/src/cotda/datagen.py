"""Synthetic two-domain shape benchmark.

Five surface families (sphere, box, cylinder, cone, torus) are sampled
uniformly by area with per-instance shape parameters, jittered, and
normalized. A DomainSpec then distorts each cloud: additive noise, a
directional crop, and resampling to the domain's density, optionally with
a sampling bias toward one side. Source and target instances come from
disjoint seed streams, and target datasets are produced with their labels
sealed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .pointcloud import (
    Dataset,
    PointCloud,
    farthest_point_sample,
    normalize_unit_sphere,
    save_manifest,
    save_xyz,
)

SHAPE_CLASSES = ("sphere", "box", "cylinder", "cone", "torus")


@dataclass
class DomainSpec:
    """Distortion profile of one domain."""

    shift_noise_sigma: float = 0.0
    crop_fraction: float = 0.0
    density: int = 256
    sampling_bias: float = 0.0

    def __post_init__(self):
        if self.shift_noise_sigma < 0:
            raise ContractError("shift_noise_sigma must be nonnegative")
        if not 0.0 <= self.crop_fraction <= 0.5:
            raise ContractError("crop_fraction must lie in [0, 0.5]")
        if self.density < 32:
            raise ContractError("density must be at least 32")


# ---------------------------------------------------------------------------
# surface samplers (one rng draw pattern per class, uniform by area)


def _sample_sphere(rng, n):
    rx, ry, rz = rng.uniform(0.7, 1.0, size=3)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.array([rx, ry, rz])


def _sample_box(rng, n):
    half = rng.uniform(0.35, 0.9, size=3)
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for i in range(n):
        u, v = uv[i]
        f = face[i]
        if f < 2:
            pts[i] = ((1 if f == 0 else -1) * hx, u * hy, v * hz)
        elif f < 4:
            pts[i] = (u * hx, (1 if f == 2 else -1) * hy, v * hz)
        else:
            pts[i] = (u * hx, v * hy, (1 if f == 4 else -1) * hz)
    return pts


def _sample_cylinder(rng, n):
    radius = rng.uniform(0.3, 0.6)
    height = rng.uniform(0.9, 1.6)
    lateral = 2.0 * math.pi * radius * height
    cap = math.pi * radius * radius
    t = rng.uniform(0.0, lateral + 2 * cap, size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if t[i] < lateral:
            z = (t[i] / lateral - 0.5) * height
            pts[i] = (radius * math.cos(theta[i]), radius * math.sin(theta[i]), z)
        else:
            rr = radius * math.sqrt(rng.uniform())
            z = height / 2 if (t[i] - lateral) < cap else -height / 2
            pts[i] = (rr * math.cos(theta[i]), rr * math.sin(theta[i]), z)
    return pts


def _sample_cone(rng, n):
    radius = rng.uniform(0.4, 0.7)
    height = rng.uniform(0.9, 1.5)
    slant = math.sqrt(radius * radius + height * height)
    lateral = math.pi * radius * slant
    base = math.pi * radius * radius
    pick = rng.uniform(0.0, lateral + base, size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if pick[i] < lateral:
            frac = math.sqrt(rng.uniform())  # area grows with distance from apex
            rr = radius * frac
            pts[i] = (rr * math.cos(theta[i]), rr * math.sin(theta[i]), height * (1.0 - frac))
        else:
            rr = radius * math.sqrt(rng.uniform())
            pts[i] = (rr * math.cos(theta[i]), rr * math.sin(theta[i]), 0.0)
    return pts - np.array([0.0, 0.0, height / 3.0])


def _sample_torus(rng, n):
    big = rng.uniform(0.55, 0.8)
    small = rng.uniform(0.15, 0.3)
    ratio = small / big
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    theta = np.empty(n)
    for i in range(n):
        while True:  # rejection keeps the outer rim from being undersampled
            cand = rng.uniform(0.0, 2.0 * math.pi)
            if rng.uniform() <= (1.0 + ratio * math.cos(cand)) / (1.0 + ratio):
                theta[i] = cand
                break
    ring = big + small * np.cos(theta)
    return np.stack(
        [ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)], axis=1
    )


_SAMPLERS = (_sample_sphere, _sample_box, _sample_cylinder, _sample_cone, _sample_torus)


def generate_shape(class_id, n_points, rng, jitter_sigma=0.01):
    """One normalized instance of a shape class with its own parameters."""
    if not 0 <= class_id < len(SHAPE_CLASSES):
        raise ContractError(f"class_id must lie in [0, {len(SHAPE_CLASSES)}), got {class_id}")
    if n_points < 8:
        raise ContractError("n_points must be at least 8")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    pts = _SAMPLERS[class_id](rng, n_points)
    pts = pts + rng.normal(0.0, jitter_sigma, size=pts.shape)
    cloud = PointCloud(pts.astype(np.float32), label=class_id)
    return normalize_unit_sphere(cloud)


# ---------------------------------------------------------------------------
# domain shift


def _directional_crop(pts, fraction, rng):
    """Remove the ceil(fraction * n) points deepest along a random direction."""
    if fraction <= 0.0:
        return pts
    n = pts.shape[0]
    n_cut = min(int(math.ceil(fraction * n)), n - 8)
    if n_cut <= 0:
        return pts
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-12)
    depth = pts @ direction
    keep = np.argsort(depth, kind="stable")[n_cut:]
    return pts[np.sort(keep)]


def _resample(pts, density, bias, rng):
    n = pts.shape[0]
    if bias != 0.0:
        w = np.exp(bias * pts[:, 2].astype(np.float64))
        w /= w.sum()
        idx = rng.choice(n, size=density, replace=True, p=w)
        return pts[np.sort(idx)]
    if n == density:
        return pts
    if n > density:
        return farthest_point_sample(PointCloud(pts), density).points
    extra = rng.choice(n, size=density - n, replace=True)
    return np.concatenate([pts, pts[extra]], axis=0)


def apply_domain_shift(cloud, spec, rng):
    """noise -> crop -> resample to the domain density, then renormalize."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    pts = cloud.points.astype(np.float64)
    if spec.shift_noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.shift_noise_sigma, size=pts.shape)
    pts = _directional_crop(pts, spec.crop_fraction, rng)
    pts = _resample(pts.astype(np.float32), spec.density, spec.sampling_bias, rng)
    out = PointCloud(np.asarray(pts, dtype=np.float32), label=cloud.label, domain=cloud.domain)
    return normalize_unit_sphere(out)


# ---------------------------------------------------------------------------
# dataset assembly


def _make_cloud(seed, domain_idx, split_idx, class_id, item, spec, domain_name):
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), domain_idx, split_idx, class_id, item])
    )
    cloud = generate_shape(class_id, spec.density, rng)
    cloud = apply_domain_shift(cloud, spec, rng)
    cloud.domain = domain_name
    return cloud


def _build_split(seed, domain_idx, split_idx, per_class, spec, domain_name, seal):
    clouds, labels = [], []
    for class_id in range(len(SHAPE_CLASSES)):
        for item in range(per_class):
            cloud = _make_cloud(seed, domain_idx, split_idx, class_id, item, spec, domain_name)
            labels.append(class_id)
            if seal:
                cloud.label = None
            clouds.append(cloud)
    sealed = np.array(labels, dtype=np.int64) if seal else None
    name = f"{domain_name}/{'train' if split_idx == 0 else 'test'}"
    return Dataset(clouds, len(SHAPE_CLASSES), sealed_labels=sealed, name=name)


def generate_benchmark(spec_source, spec_target, per_class_train, per_class_test, seed):
    """Class-balanced four-way benchmark keyed by (domain, split).

    Target splits are sealed: their clouds carry no labels and the ground
    truth is only reachable through Dataset.eval_labels outside adaptation.
    """
    if per_class_train < 1 or per_class_test < 0:
        raise ContractError("per-class counts must be positive")
    return {
        ("source", "train"): _build_split(seed, 0, 0, per_class_train, spec_source, "source", False),
        ("source", "test"): _build_split(seed, 0, 1, per_class_test, spec_source, "source", False)
        if per_class_test
        else None,
        ("target", "train"): _build_split(seed, 1, 0, per_class_train, spec_target, "target", True),
        ("target", "test"): _build_split(seed, 1, 1, per_class_test, spec_target, "target", True)
        if per_class_test
        else None,
    }


def generate_domain_pair(spec_source, spec_target, per_class, seed):
    """The training halves only: a labeled source and a sealed target."""
    bench = generate_benchmark(spec_source, spec_target, per_class, 0, seed)
    return bench[("source", "train")], bench[("target", "train")]


def save_benchmark(bench, out_dir):
    """Write every split as XYZ files plus one manifest at the root.

    The manifest keeps true labels for target rows as well: sealing is a
    loading-time decision (load_dataset(seal_labels=True)), while scoring
    needs the ground truth to survive on disk.
    """
    rows = []
    for key, ds in bench.items():
        if ds is None:
            continue
        domain, split = key
        sub = os.path.join(out_dir, domain, split)
        os.makedirs(sub, exist_ok=True)
        labels = ds._sealed if ds._sealed is not None else [c.label for c in ds.clouds]
        for i, cloud in enumerate(ds.clouds):
            label = int(labels[i])
            rel = os.path.join(domain, split, f"{SHAPE_CLASSES[label]}_{i:04d}.xyz")
            save_xyz(cloud, os.path.join(out_dir, rel))
            rows.append((rel, label, domain, split))
    manifest = os.path.join(out_dir, "manifest.csv")
    save_manifest(rows, manifest)
    return manifest
