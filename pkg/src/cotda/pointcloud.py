"""Point cloud containers, geometry utilities, augmentation, and file formats."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, LabelAccessError


@dataclass
class PointCloud:
    """n points in 3D with an optional class label and a domain tag."""

    points: np.ndarray
    label: int | None = None
    domain: str = "source"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ContractError(f"points must be (n, 3) with n >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractError("points contain non-finite values")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


class _AdaptationGuard:
    """While entered, held-back evaluation labels refuse to be read.

    Training code wraps every adaptation phase in this guard; the only
    reader of sealed target labels is evaluation, which runs outside it.
    """

    def __init__(self):
        self._depth = 0

    @property
    def active(self):
        return self._depth > 0

    def __enter__(self):
        self._depth += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        self._depth -= 1
        return False


adaptation_guard = _AdaptationGuard()


class Dataset:
    """A list of clouds plus the class count.

    For target-domain data the true labels are sealed: clouds carry
    label=None and the ground truth is only reachable through
    eval_labels(), which raises if adaptation is in progress.
    """

    def __init__(self, clouds, num_classes, sealed_labels=None, name=""):
        self.clouds = list(clouds)
        self.num_classes = int(num_classes)
        self.name = name
        if sealed_labels is not None:
            sealed_labels = np.asarray(sealed_labels, dtype=np.int64)
            if sealed_labels.shape != (len(self.clouds),):
                raise ContractError("sealed label count does not match clouds")
        self._sealed = sealed_labels

    def __len__(self):
        return len(self.clouds)

    def __getitem__(self, i):
        return self.clouds[i]

    @property
    def labeled(self):
        return all(c.label is not None for c in self.clouds)

    def eval_labels(self):
        """Ground-truth labels for scoring. Off limits during adaptation."""
        if adaptation_guard.active:
            raise LabelAccessError(
                "evaluation labels were requested while adaptation is running"
            )
        if self._sealed is not None:
            return self._sealed.copy()
        if not self.labeled:
            raise ContractError("dataset has no labels to evaluate against")
        return np.array([c.label for c in self.clouds], dtype=np.int64)


# ---------------------------------------------------------------------------
# geometry


def normalize_unit_sphere(cloud):
    """Center on the centroid and scale the farthest point onto the unit sphere.

    A degenerate cloud (all points coincident) maps to all zeros. Applying
    the map twice moves nothing by more than 1e-5.
    """
    pts = cloud.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    radius = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if radius < 1e-12:
        out = np.zeros_like(centered)
    else:
        out = centered / radius
    return replace(cloud, points=out.astype(np.float32))


def farthest_point_sample(cloud, n_out, start_index=0):
    """Greedy max-min subsampling: repeatedly take the point farthest from
    the already chosen set. Distance ties resolve to the lowest index, so
    the selection is a pure function of (points, n_out, start_index)."""
    n = len(cloud)
    if not 1 <= n_out <= n:
        raise ContractError(f"n_out must lie in [1, {n}], got {n_out}")
    if not 0 <= start_index < n:
        raise ContractError(f"start_index out of range: {start_index}")
    pts = cloud.points.astype(np.float64)
    chosen = [start_index]
    d2 = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for _ in range(n_out - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return replace(cloud, points=cloud.points[chosen].copy())


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationSpec:
    """Ranges for the random transform pipeline.

    The pipeline order is fixed (scale, rotate, translate, jitter, point
    dropout); each affine component is independently switched on or off
    per draw, jitter and dropout always run. Width-zero ranges make every
    stage an exact identity.
    """

    scale_range: tuple = (0.8, 1.2)
    rot_z_max: float = 2.0 * math.pi
    tilt_max: float = math.radians(15.0)
    translate_range: float = 0.1
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    dropout_max_ratio: float = 0.2

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ContractError(f"bad scale range {self.scale_range}")
        if self.rot_z_max < 0 or self.tilt_max < 0:
            raise ContractError("rotation bounds must be nonnegative")
        if self.translate_range < 0:
            raise ContractError("translation range must be nonnegative")
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ContractError("jitter parameters must be nonnegative")
        if not 0 <= self.dropout_max_ratio < 1:
            raise ContractError("dropout ratio must lie in [0, 1)")

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def contrastive(cls):
        """Full pipeline used for the two contrastive views."""
        return cls()

    @classmethod
    def classifier_branch(cls):
        """Label-preserving subset: jitter plus rotation about the up axis."""
        return cls((1.0, 1.0), 2.0 * math.pi, 0.0, 0.0, 0.01, 0.05, 0.0)


def _rotation_about(axis, angle):
    """Rodrigues rotation matrix; angle 0 gives the exact identity."""
    ux, uy, uz = axis
    k = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def augment(cloud, spec, rng):
    """Apply one random draw of the transform pipeline.

    rng may be an integer seed or a numpy Generator; equal seeds on equal
    inputs give bitwise-equal outputs.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    pts = cloud.points.astype(np.float64)

    if rng.random() < 0.5:
        s = rng.uniform(spec.scale_range[0], spec.scale_range[1])
        pts = pts * s
    if rng.random() < 0.5:
        angle_z = rng.uniform(0.0, spec.rot_z_max)
        tilt_dir = rng.normal(size=3)
        tilt_dir /= max(np.linalg.norm(tilt_dir), 1e-12)
        tilt = rng.uniform(0.0, spec.tilt_max)
        rot = _rotation_about(tilt_dir, tilt) @ _rotation_about((0.0, 0.0, 1.0), angle_z)
        pts = pts @ rot.T
    if rng.random() < 0.5:
        t = rng.uniform(-spec.translate_range, spec.translate_range, size=3)
        pts = pts + t

    noise = rng.normal(0.0, spec.jitter_sigma, size=pts.shape) if spec.jitter_sigma > 0 else 0.0
    if spec.jitter_sigma > 0:
        noise = np.clip(noise, -spec.jitter_clip, spec.jitter_clip)
    pts = pts + noise

    ratio = rng.uniform(0.0, spec.dropout_max_ratio)
    n = pts.shape[0]
    n_drop = min(int(math.floor(ratio * n)), n - 1)
    if n_drop > 0:
        keep = np.sort(rng.permutation(n)[: n - n_drop])
        pts = pts[keep]

    return replace(cloud, points=pts.astype(np.float32))


def pcm_mixup(a, b, lam, num_classes, max_exact=64):
    """Mix two clouds point-by-point under a minimum-cost pairing.

    Points of a and b are matched by solving an exact assignment on
    squared Euclidean cost (for clouds up to max_exact points; larger
    clouds are subsampled to max_exact by farthest-point sampling and
    paired in lexicographic coordinate order). Each matched pair is then
    interpolated with weight lam toward b, and the returned soft label
    mixes the one-hot labels the same way.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lam must lie in [0, 1], got {lam}")
    if a.label is None or b.label is None:
        raise ContractError("mixup needs labeled clouds")
    if len(a) != len(b):
        raise ContractError("mixup needs equal cardinality; resample first")
    if not (0 <= a.label < num_classes and 0 <= b.label < num_classes):
        raise ContractError("labels exceed num_classes")

    from . import ot  # local import: ot has no geometry dependencies

    pa = a.points.astype(np.float64)
    pb = b.points.astype(np.float64)
    n = pa.shape[0]
    if n <= max_exact:
        cost = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
        w = np.full(n, 1.0 / n)
        plan = ot.solve_exact(cost, w, w).plan
        perm = np.argmax(plan, axis=1)
        pb = pb[perm]
    else:
        a_s = farthest_point_sample(a, max_exact)
        b_s = farthest_point_sample(b, max_exact)
        pa = a_s.points.astype(np.float64)
        pb = b_s.points.astype(np.float64)
        pa = pa[np.lexsort((pa[:, 2], pa[:, 1], pa[:, 0]))]
        pb = pb[np.lexsort((pb[:, 2], pb[:, 1], pb[:, 0]))]

    mixed = (1.0 - lam) * pa + lam * pb
    soft = np.zeros(num_classes, dtype=np.float64)
    soft[a.label] += 1.0 - lam
    soft[b.label] += lam
    out = PointCloud(mixed.astype(np.float32), label=None, domain=a.domain)
    return out, soft.astype(np.float32)


# ---------------------------------------------------------------------------
# file formats


def save_xyz(cloud, path):
    """One point per line: three decimal coordinates separated by single spaces."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float32)
    with open(path, "w", newline="\n") as fh:
        for p in pts:
            fh.write(
                " ".join(np.format_float_positional(v, unique=True, trim="0") for v in p)
            )
            fh.write("\n")


def load_xyz(path, label=None, domain="source"):
    pts = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 3:
                raise ContractError(f"{path}:{ln}: expected 3 fields, got {len(parts)}")
            try:
                pts.append([float(v) for v in parts])
            except ValueError as exc:
                raise ContractError(f"{path}:{ln}: {exc}") from None
    if not pts:
        raise ContractError(f"{path}: empty cloud")
    return PointCloud(np.array(pts, dtype=np.float32), label=label, domain=domain)


MANIFEST_FIELDS = ("path", "label", "domain", "split")


def save_manifest(rows, path):
    """rows: (relative_path, label_or_None, domain, split) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for rel, label, domain, split in rows:
            w.writerow([rel, -1 if label is None else int(label), domain, split])


def load_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise ContractError(
                f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}"
            )
        rows = []
        for rec in reader:
            if len(rec) != 4:
                raise ContractError(f"{path}: malformed manifest row {rec!r}")
            rows.append(
                {
                    "path": rec[0],
                    "label": int(rec[1]),
                    "domain": rec[2],
                    "split": rec[3],
                }
            )
    return rows


def load_dataset(manifest_path, num_classes, domain=None, split=None, seal_labels=False):
    """Materialize the clouds a manifest points at.

    With seal_labels=True the loaded clouds carry label=None and the
    manifest labels move into the dataset's sealed store (reachable only
    through eval_labels outside adaptation).
    """
    root = os.path.dirname(os.path.abspath(manifest_path))
    rows = [
        r
        for r in load_manifest(manifest_path)
        if (domain is None or r["domain"] == domain)
        and (split is None or r["split"] == split)
    ]
    if not rows:
        raise ContractError(f"{manifest_path}: no rows match domain={domain} split={split}")
    clouds, sealed = [], []
    for r in rows:
        label = None if r["label"] < 0 else r["label"]
        sealed.append(-1 if label is None else label)
        clouds.append(
            load_xyz(
                os.path.join(root, r["path"]),
                label=None if seal_labels else label,
                domain=r["domain"],
            )
        )
    sealed_arr = np.array(sealed, dtype=np.int64) if seal_labels else None
    name = f"{domain or 'all'}/{split or 'all'}"
    return Dataset(clouds, num_classes, sealed_labels=sealed_arr, name=name)
