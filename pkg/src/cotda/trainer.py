"""Joint adaptation training loop.

One optimization step draws a labeled source batch and an unlabeled target
batch, renders nothing (multiview images are cached per cloud up front),
and minimizes the sum of four parts:

  * within-modal contrastive loss over two augmented 3D views,
  * cross-modal contrastive loss tying the averaged 3D views to the image
    branch,
  * a transport-aligned loss over a frozen optimal coupling between the
    source and target feature batches,
  * classification on label-mixed source clouds.

Every random draw comes from a single generator seeded by the config, so
two runs with equal inputs produce bitwise-equal parameters and metrics.
Target ground truth is never read here; sealed datasets stay sealed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ot
from . import tensor as tt
from .errors import ContractError, DivergenceError
from .evaluate import predict_probs
from .losses import loss_3d, loss_cls, loss_mm, loss_total
from .models import ModelBundle, build_models, save_checkpoint
from .pointcloud import AugmentationSpec, adaptation_guard, augment, pcm_mixup
from .render import CameraRig, RenderParams, render_multiview

METRIC_FIELDS = ("step", "epoch", "loss_3d", "loss_mm", "loss_ot", "loss_cls", "loss_total", "lr")


@dataclass
class TrainConfig:
    """Flat bag of every knob, shared by data generation, training, self
    training, and evaluation. parse/dump round-trips through a plain
    "key = value" text file."""

    # data generation
    per_class_train: int = 25
    per_class_test: int = 10
    source_noise: float = 0.0
    source_crop: float = 0.0
    source_density: int = 128
    source_bias: float = 0.0
    target_noise: float = 0.02
    target_crop: float = 0.2
    target_density: int = 96
    target_bias: float = 0.0
    # model
    emb_dim: int = 64
    proj_dim: int = 32
    clf_hidden: tuple = (64, 32)
    conv_channels: tuple = (8, 16, 32)
    dropout_rate: float = 0.3
    # rendering
    m_views: int = 12
    image_size: int = 32
    point_radius: float = 0.008
    points_per_pixel: int = 2
    # losses
    tau: float = 0.1
    alpha: float = 0.001
    beta: float = 0.0001
    exclude_self_sim: bool = False
    enable_3d: bool = True
    enable_mm: bool = True
    enable_ot: bool = True
    # contrastive-view augmentation ranges (full z-rotation and the default
    # jitter are always applied; these bound the remaining components)
    aug_scale_lo: float = 0.8
    aug_scale_hi: float = 1.2
    aug_tilt_deg: float = 15.0
    aug_translate: float = 0.1
    aug_dropout_max: float = 0.2
    # optimization
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 5e-5
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.15
    mixup_max_exact: int = 64
    # transport solver
    solver: str = "auto"
    sinkhorn_epsilon: float = 0.05
    exact_size_cap: int = 32
    ot_max_iters: int = 5000
    ot_tol: float = 1e-9
    # self training
    spst_threshold: float = 0.8
    spst_rounds: int = 3
    spst_epochs: int = 10

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be nonnegative")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.spst_threshold <= 1.0:
            raise ContractError("spst_threshold must lie in (0, 1]")
        if self.m_views < 1:
            raise ContractError("m_views must be at least 1")
        self.contrastive_spec()  # AugmentationSpec validates the ranges

    def ot_config(self):
        return ot.OTConfig(
            solver=self.solver,
            exact_size_cap=self.exact_size_cap,
            epsilon=self.sinkhorn_epsilon,
            max_iters=self.ot_max_iters,
            tol=self.ot_tol,
        )

    def contrastive_spec(self):
        return AugmentationSpec(
            scale_range=(self.aug_scale_lo, self.aug_scale_hi),
            rot_z_max=2.0 * math.pi,
            tilt_max=math.radians(self.aug_tilt_deg),
            translate_range=self.aug_translate,
            jitter_sigma=0.01,
            jitter_clip=0.05,
            dropout_max_ratio=self.aug_dropout_max,
        )

    def render_params(self):
        return RenderParams(self.image_size, self.point_radius, self.points_per_pixel)

    def dump(self):
        """Canonical text form, one sorted "key = value" line each."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_file(cls, path):
        """Parse "key = value" lines; '#' starts a comment. Unknown keys
        are rejected by name so typos cannot silently fall back to a
        default."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ContractError(f"{path}:{lineno}: expected 'key = value'")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in fields:
                    raise ContractError(
                        f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                        + ", ".join(sorted(fields))
                    )
                values[key] = _coerce(key, val, fields[key].type, path, lineno)
        return cls(**values)


def _coerce(key, val, ftype, path, lineno):
    try:
        if ftype in ("int", int):
            return int(val)
        if ftype in ("float", float):
            return float(val)
        if ftype in ("bool", bool):
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(val)
        if ftype in ("tuple", tuple):
            return tuple(int(x) for x in val.split(",") if x.strip())
        return val
    except ValueError:
        raise ContractError(f"{path}:{lineno}: cannot parse {val!r} for {key}") from None


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with classic L2 weight decay folded into the gradient.

    Moments are kept in float64 and the update is computed in float64
    before the parameter is truncated back to storage precision; the walk
    is a pure function of the gradient sequence.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - step).astype(np.float32)


def cosine_lr(base, epoch, total_epochs):
    """base * 0.5 * (1 + cos(pi * epoch / total_epochs))."""
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# step machinery


def _stack_rows(rows):
    return tt.concat([tt.reshape(r, (1, -1)) for r in rows], axis=0)


def _one_hot(labels, k):
    out = np.zeros((len(labels), k), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def render_cache(dataset, cfg):
    """Multiview image stacks for each cloud, computed once per dataset.

    Views depend only on the raw cloud, never on augmentation draws, so
    the cache is valid for the whole run.
    """
    rig = CameraRig(num_views=cfg.m_views)
    params = cfg.render_params()
    return [render_multiview(c, rig, params).images for c in dataset.clouds]


def _seed(rng):
    return int(rng.integers(0, 2**63 - 1))


def _embed_batch(bundle, items, spec, rng):
    """Augment twice, run both views and the image stack through the
    encoders. Returns global embeddings of the first view plus the three
    projection batches.

    The transport branch reuses the first view's global features on
    purpose: matching over freshly perturbed views each step keeps the
    plan from locking onto one early (possibly wrong) pairing, the same
    way the contrastive terms never see the same view twice."""
    globals_, p1, p2, pimg = [], [], [], []
    for cloud, images in items:
        v1 = augment(cloud, spec, _seed(rng))
        v2 = augment(cloud, spec, _seed(rng))
        g1, z1 = bundle.enc3d(v1.points)
        _, z2 = bundle.enc3d(v2.points)
        _, zi = bundle.enc2d(images)
        globals_.append(g1)
        p1.append(z1)
        p2.append(z2)
        pimg.append(zi)
    return _stack_rows(globals_), _stack_rows(p1), _stack_rows(p2), _stack_rows(pimg)


def train_step(bundle, opt, src_items, src_labels, tgt_items, cfg, rng, lr):
    """One update. src_items/tgt_items are (cloud, images) pairs; source
    labels arrive separately so sealed target data never carries any."""
    k_classes = bundle.clf.num_classes
    spec = cfg.contrastive_spec()
    cls_spec = AugmentationSpec.classifier_branch()
    zero = tt.Tensor(0.0)
    with tt.Tape() as tape:
        if cfg.enable_3d or cfg.enable_mm or cfg.enable_ot:
            zs, p1s, p2s, pis = _embed_batch(bundle, src_items, spec, rng)
            zt, p1t, p2t, pit = _embed_batch(bundle, tgt_items, spec, rng)

        if cfg.enable_3d:
            l3d = tt.add(
                loss_3d(p1s, p2s, cfg.tau, cfg.exclude_self_sim),
                loss_3d(p1t, p2t, cfg.tau, cfg.exclude_self_sim),
            )
        else:
            l3d = zero
        if cfg.enable_mm:
            lmm = tt.add(
                loss_mm(p1s, p2s, pis, cfg.tau, cfg.exclude_self_sim),
                loss_mm(p1t, p2t, pit, cfg.tau, cfg.exclude_self_sim),
            )
        else:
            lmm = zero

        if cfg.enable_ot:
            ys = _one_hot(src_labels, k_classes)
            with tt.recording_paused():
                g_frozen = bundle.clf(zt.data.copy()).data.astype(np.float64)
            cost = ot.cost_matrix(
                zs.data.astype(np.float64), ys, zt.data.astype(np.float64),
                g_frozen, cfg.alpha, cfg.beta,
            )
            m, n = cost.shape
            plan = ot.solve(cost, np.full(m, 1.0 / m), np.full(n, 1.0 / n), cfg.ot_config())
            g_live = bundle.clf(zt)
            lot = ot.loss_ot(plan.plan, zs, ys, zt, g_live, cfg.alpha, cfg.beta)
        else:
            lot = zero

        perm = rng.permutation(len(src_items))
        lams = rng.random(len(src_items))
        prob_rows, soft_rows = [], []
        for i in range(len(src_items)):
            a = augment(src_items[i][0], cls_spec, _seed(rng))
            b = augment(src_items[perm[i]][0], cls_spec, _seed(rng))
            a.label, b.label = int(src_labels[i]), int(src_labels[perm[i]])
            mixed, soft = pcm_mixup(a, b, float(lams[i]), k_classes, cfg.mixup_max_exact)
            g, _ = bundle.enc3d(mixed.points)
            prob_rows.append(bundle.clf(g, rng=rng))
            soft_rows.append(soft)
        lcls = loss_cls(tt.concat(prob_rows, axis=0), np.stack(soft_rows))

        total = loss_total(l3d, lmm, lot, lcls)
        opt.zero_grad()
        tt.backward(total, tape)
    opt.step(lr)
    return {
        "loss_3d": float(l3d.data),
        "loss_mm": float(lmm.data),
        "loss_ot": float(lot.data),
        "loss_cls": float(lcls.data),
        "loss_total": float(total.data),
    }


# ---------------------------------------------------------------------------
# fit


@dataclass
class TrainState:
    bundle: ModelBundle
    config: TrainConfig
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    final_arrays: dict = field(default_factory=dict)
    best_arrays: dict = field(default_factory=dict)
    metrics_path: str | None = None
    checkpoint_paths: dict = field(default_factory=dict)


def _stratified_split(labels, val_fraction, rng):
    """Per-class validation carve-out; returns (train_idx, val_idx)."""
    labels = np.asarray(labels)
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx))) if val_fraction > 0 else 0
        if val_fraction > 0 and len(idx) > 1:
            n_val = max(1, min(n_val, len(idx) - 1))
        else:
            n_val = 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def _source_accuracy(bundle, clouds, labels):
    if len(clouds) == 0:
        return 0.0
    probs = predict_probs(bundle, clouds)
    return float((probs.argmax(axis=1) == labels).mean())


class _MetricsWriter:
    def __init__(self, path):
        self.path = path
        self.fh = open(path, "w", newline="\n") if path else None
        if self.fh:
            self.fh.write(",".join(METRIC_FIELDS) + "\n")

    def write(self, step, epoch, stats, lr):
        if not self.fh:
            return
        row = [str(step), str(epoch)]
        row += [repr(stats[k]) for k in METRIC_FIELDS[2:-1]]
        row.append(repr(lr))
        self.fh.write(",".join(row) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


def fit(source, target, cfg, out_dir=None):
    """Train from scratch on a labeled source and an unlabeled target.

    Returns a TrainState whose bundle holds the best-validation weights;
    the final weights are kept alongside. When out_dir is set, metrics,
    checkpoints, and the config dump land there. A non-finite loss raises
    DivergenceError carrying the last finished epoch's checkpoint path.
    """
    if not source.labeled:
        raise ContractError("source dataset must be fully labeled")
    if source.num_classes != target.num_classes:
        raise ContractError("datasets disagree on the class count")
    rng = np.random.default_rng(cfg.seed)
    src_labels_all = np.array([c.label for c in source.clouds], dtype=np.int64)
    train_idx, val_idx = _stratified_split(src_labels_all, cfg.val_fraction, rng)
    if len(train_idx) < 2:
        raise ContractError("source dataset too small to train on")

    bundle = build_models(
        source.num_classes,
        emb_dim=cfg.emb_dim,
        proj_dim=cfg.proj_dim,
        image_size=cfg.image_size,
        clf_hidden=cfg.clf_hidden,
        conv_channels=cfg.conv_channels,
        dropout_rate=cfg.dropout_rate,
        seed=cfg.seed,
    )
    src_images = render_cache(source, cfg)
    tgt_images = render_cache(target, cfg)
    opt = Adam(bundle.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", newline="\n") as fh:
            fh.write(cfg.dump())
    metrics = _MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None)

    val_clouds = [source.clouds[i] for i in val_idx]
    val_labels = src_labels_all[val_idx]
    k = min(cfg.batch_size, len(train_idx), len(target))
    steps_per_epoch = max(1, len(train_idx) // k)
    state = TrainState(bundle=bundle, config=cfg, metrics_path=metrics.path)
    state.final_arrays = bundle.state_arrays()  # last-good fallback from step one
    last_ckpt = os.path.join(out_dir, "last.cotc") if out_dir else None

    step_counter = 0
    try:
        with adaptation_guard:
            for epoch in range(cfg.epochs):
                lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
                order = train_idx[rng.permutation(len(train_idx))]
                for s in range(steps_per_epoch):
                    batch = order[s * k : s * k + k]
                    if len(batch) < 2:
                        continue
                    tgt_pick = rng.choice(len(target), size=k, replace=len(target) < k)
                    src_items = [(source.clouds[i], src_images[i]) for i in batch]
                    tgt_items = [(target.clouds[j], tgt_images[j]) for j in tgt_pick]
                    try:
                        stats = train_step(
                            bundle, opt, src_items, src_labels_all[batch],
                            tgt_items, cfg, rng, lr,
                        )
                    except DivergenceError as err:
                        if last_ckpt:
                            save_checkpoint(last_ckpt, state.final_arrays)
                            err.checkpoint_path = last_ckpt
                        raise
                    metrics.write(step_counter, epoch, stats, lr)
                    step_counter += 1
                val_acc = _source_accuracy(bundle, val_clouds, val_labels)
                if val_acc > state.best_val_accuracy or state.best_epoch < 0:
                    state.best_val_accuracy = val_acc
                    state.best_epoch = epoch
                    state.best_arrays = bundle.state_arrays()
                state.final_arrays = bundle.state_arrays()
                if last_ckpt:
                    save_checkpoint(last_ckpt, state.final_arrays)
    finally:
        metrics.close()

    if not state.best_arrays:
        state.best_arrays = bundle.state_arrays()
        state.final_arrays = bundle.state_arrays()
    bundle.load_state_arrays(state.best_arrays)
    if out_dir:
        best_path = os.path.join(out_dir, "best.cotc")
        final_path = os.path.join(out_dir, "final.cotc")
        save_checkpoint(best_path, state.best_arrays)
        save_checkpoint(final_path, state.final_arrays)
        state.checkpoint_paths = {"best": best_path, "final": final_path, "last": last_ckpt}
    return state


# ---------------------------------------------------------------------------
# self-paced self training


def pseudo_label(bundle, target, threshold):
    """Indices, labels, and confidences of target clouds the classifier is
    sure about. Never touches ground truth."""
    probs = predict_probs(bundle, target.clouds)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1).astype(np.int64)
    keep = np.flatnonzero(conf >= threshold)
    return keep, pred[keep], conf[keep]


def spst_finetune(state, source, target, cfg, out_dir=None):
    """Rounds of confidence-gated pseudo-labeling on the target followed by
    classifier fine-tuning on source labels plus accepted pseudo-labels.

    Only the 3D encoder and classifier are updated; the threshold fixes
    which target clouds participate in each round. Returns a new
    TrainState sharing the bundle.
    """
    bundle = state.bundle if isinstance(state, TrainState) else state
    if not source.labeled:
        raise ContractError("source dataset must be fully labeled")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    k_classes = bundle.clf.num_classes
    cls_spec = AugmentationSpec.classifier_branch()
    src_labels_all = np.array([c.label for c in source.clouds], dtype=np.int64)
    split_rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _stratified_split(src_labels_all, cfg.val_fraction, split_rng)
    val_clouds = [source.clouds[i] for i in val_idx]
    val_labels = src_labels_all[val_idx]

    params = [t for name, t in bundle.named_params() if not name.startswith("enc2d")]
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    new_state = TrainState(
        bundle=bundle,
        config=cfg,
        best_val_accuracy=_source_accuracy(bundle, val_clouds, val_labels),
        best_epoch=-1,
        best_arrays=bundle.state_arrays(),
    )
    total_epochs = max(1, cfg.spst_rounds * cfg.spst_epochs)
    metrics_rows = []

    with adaptation_guard:
        for rnd in range(cfg.spst_rounds):
            keep, labels, conf = pseudo_label(bundle, target, cfg.spst_threshold)
            pool_clouds = [source.clouds[i] for i in train_idx] + [target.clouds[i] for i in keep]
            pool_labels = np.concatenate([src_labels_all[train_idx], labels])
            k = min(cfg.batch_size, len(pool_clouds))
            steps = max(1, len(pool_clouds) // k)
            for ep in range(cfg.spst_epochs):
                epoch_global = rnd * cfg.spst_epochs + ep
                lr = cosine_lr(cfg.lr, epoch_global, total_epochs)
                order = rng.permutation(len(pool_clouds))
                for s in range(steps):
                    batch = order[s * k : s * k + k]
                    with tt.Tape() as tape:
                        rows = []
                        for i in batch:
                            aug = augment(pool_clouds[i], cls_spec, _seed(rng))
                            g, _ = bundle.enc3d(aug.points)
                            rows.append(bundle.clf(g, rng=rng))
                        probs = tt.concat(rows, axis=0)
                        soft = _one_hot(pool_labels[batch], k_classes).astype(np.float32)
                        loss = loss_cls(probs, soft)
                        if not np.isfinite(loss.data):
                            raise DivergenceError("self-training loss is not finite")
                        opt.zero_grad()
                        tt.backward(loss, tape)
                    opt.step(lr)
                val_acc = _source_accuracy(bundle, val_clouds, val_labels)
                metrics_rows.append((rnd, ep, len(keep), float(loss.data), val_acc))
                if val_acc > new_state.best_val_accuracy:
                    new_state.best_val_accuracy = val_acc
                    new_state.best_epoch = epoch_global
                    new_state.best_arrays = bundle.state_arrays()
    new_state.final_arrays = bundle.state_arrays()
    bundle.load_state_arrays(new_state.best_arrays)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "spst_metrics.csv")
        with open(path, "w", newline="\n") as fh:
            fh.write("round,epoch,accepted,loss_cls,val_accuracy\n")
            for row in metrics_rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
        ckpt = os.path.join(out_dir, "spst.cotc")
        save_checkpoint(ckpt, new_state.best_arrays)
        new_state.checkpoint_paths = {"spst": ckpt}
        new_state.metrics_path = path
    return new_state
