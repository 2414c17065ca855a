"""Encoders, projection heads, classifier, and checkpoint serialization.

The 3D encoder is a per-point MLP pooled with max over points, so feature
extraction is permutation invariant down to the bit. The 2D encoder runs
a small strided convnet over each rendered view and max-pools the view
embeddings. Both feed a two-layer projection head whose output is L2
normalized onto the unit sphere for the contrastive losses; the classifier
consumes the unprojected global feature only.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as tt
from .errors import ContractError


def _kaiming(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class _Linear:
    def __init__(self, rng, n_in, n_out, name):
        self.w = tt.Tensor(_kaiming(rng, n_in, (n_in, n_out)), requires_grad=True, name=f"{name}.w")
        self.b = tt.Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return tt.add(tt.matmul(x, self.w), self.b)

    def named(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class ProjectionHead:
    """emb -> emb -> proj with a relu between; output is unit length."""

    def __init__(self, rng, emb_dim, proj_dim, name="head"):
        self.fc1 = _Linear(rng, emb_dim, emb_dim, f"{name}.fc1")
        self.fc2 = _Linear(rng, emb_dim, proj_dim, f"{name}.fc2")
        self.proj_dim = proj_dim

    def __call__(self, feature):
        """feature: rank-1 (emb,) tensor. Returns rank-1 (proj,) unit vector."""
        h = tt.relu(self.fc1(tt.reshape(feature, (1, -1))))
        p = self.fc2(h)
        unit = tt.div(p, tt.l2_norm(p))
        return tt.reshape(unit, (self.proj_dim,))

    def named(self):
        return self.fc1.named() + self.fc2.named()


class Encoder3D:
    """Per-point MLP with max pooling; order of points cannot matter."""

    def __init__(self, rng, emb_dim=64, proj_dim=32, widths=(64, 128), name="enc3d"):
        dims = (3, *widths)
        self.hidden = [
            _Linear(rng, dims[i], dims[i + 1], f"{name}.fc{i}") for i in range(len(widths))
        ]
        self.out = _Linear(rng, dims[-1], emb_dim, f"{name}.out")
        self.head = ProjectionHead(rng, emb_dim, proj_dim, f"{name}.head")
        self.emb_dim = emb_dim

    def __call__(self, points):
        """points: (n, 3) array or tensor. Returns (global, projected)."""
        x = points if isinstance(points, tt.Tensor) else tt.Tensor(points)
        if x.data.ndim != 2 or x.data.shape[1] != 3:
            raise ContractError(f"expected (n, 3) points, got {x.data.shape}")
        h = x
        for fc in self.hidden:
            # Standardize each channel across the cloud's points rather than
            # each point across its channels: per-point standardization throws
            # away activation magnitude, which is most of the shape signal.
            h = tt.relu(tt.transpose(tt.feature_norm(tt.transpose(fc(h)))))
        h = self.out(h)
        pooled = tt.max_over_axis(h, axis=0)
        return pooled, self.head(pooled)

    def named(self):
        out = []
        for fc in self.hidden:
            out += fc.named()
        return out + self.out.named() + self.head.named()


class Encoder2D:
    """Strided 3x3 convnet per view, then max pooling across views."""

    def __init__(self, rng, image_size=32, emb_dim=64, proj_dim=32, channels=(8, 16, 32), name="enc2d"):
        if image_size < 4:
            raise ContractError(f"image_size must be at least 4, got {image_size}")
        self.channels = (1, *channels)
        self.convs = []
        size = image_size
        for i in range(len(channels)):
            c_in, c_out = self.channels[i], self.channels[i + 1]
            w = tt.Tensor(
                _kaiming(rng, c_in * 9, (c_in * 9, c_out)),
                requires_grad=True,
                name=f"{name}.conv{i}.w",
            )
            b = tt.Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True, name=f"{name}.conv{i}.b")
            self.convs.append((w, b))
            size = (size + 2 - 3) // 2 + 1
        if size < 1:
            raise ContractError(f"image_size {image_size} too small for the conv stack")
        self.fc = _Linear(rng, self.channels[-1], emb_dim, f"{name}.fc")
        self.head = ProjectionHead(rng, emb_dim, proj_dim, f"{name}.head")
        self.emb_dim = emb_dim

    def _encode_view(self, image):
        x = image if isinstance(image, tt.Tensor) else tt.Tensor(image)
        if x.data.ndim == 2:
            x = tt.reshape(x, (1, *x.data.shape))
        for w, b in self.convs:
            cols = tt.unfold_patches(x, 3, stride=2, pad=1)
            y = tt.relu(tt.add(tt.matmul(cols, w), b))
            c_out = w.data.shape[1]
            side = int(np.sqrt(y.data.shape[0]))
            x = tt.reshape(tt.transpose(y), (c_out, side, side))
        c, h, w_ = x.data.shape
        flat = tt.reshape(x, (c, h * w_))
        pooled = tt.mul(tt.sum_axis(flat, 1), 1.0 / (h * w_))
        return self.fc(tt.reshape(pooled, (1, c)))

    def __call__(self, images):
        """images: (m, H, W) stack of views. Returns (global, projected)."""
        arr = images.images if hasattr(images, "images") else images
        views = [self._encode_view(arr[i]) for i in range(arr.shape[0])]
        stacked = tt.concat(views, axis=0)
        pooled = tt.max_over_axis(stacked, axis=0)
        return pooled, self.head(pooled)

    def named(self):
        out = []
        for w, b in self.convs:
            out += [(w.name, w), (b.name, b)]
        return out + self.fc.named() + self.head.named()


class Classifier:
    """Fully connected probe over the global 3D feature.

    Hidden layers are linear -> feature standardization -> relu -> dropout;
    dropout only fires when an rng is supplied (training passes). With all
    weights zero the logits are zero and the output is exactly uniform.
    """

    def __init__(self, rng, emb_dim, num_classes, hidden=(64, 32), dropout_rate=0.3, name="clf"):
        if not 0.0 <= dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        dims = (emb_dim, *hidden, num_classes)
        self.layers = [
            _Linear(rng, dims[i], dims[i + 1], f"{name}.fc{i}") for i in range(len(dims) - 1)
        ]
        self.dropout_rate = dropout_rate
        self.num_classes = num_classes

    def __call__(self, features, rng=None):
        """features: (k, emb) tensor or array; returns (k, num_classes) probabilities."""
        x = features if isinstance(features, tt.Tensor) else tt.Tensor(features)
        if x.data.ndim == 1:
            x = tt.reshape(x, (1, -1))
        keep = 1.0 - self.dropout_rate
        for fc in self.layers[:-1]:
            x = tt.relu(tt.feature_norm(fc(x)))
            if rng is not None and self.dropout_rate > 0.0:
                mask = (rng.random(x.data.shape) < keep).astype(np.float32)
                x = tt.dropout_mask_apply(x, mask, keep)
        logits = self.layers[-1](x)
        return tt.softmax(logits)

    def named(self):
        out = []
        for fc in self.layers:
            out += fc.named()
        return out


class ModelBundle:
    """The three trainable pieces plus enough metadata to rebuild them."""

    def __init__(self, enc3d, enc2d, clf, meta):
        self.enc3d = enc3d
        self.enc2d = enc2d
        self.clf = clf
        self.meta = dict(meta)

    def named_params(self):
        return self.enc3d.named() + self.enc2d.named() + self.clf.named()

    def params(self):
        return [t for _, t in self.named_params()]

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.named_params()}

    def load_state_arrays(self, arrays):
        own = dict(self.named_params())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ContractError(
                f"checkpoint does not match models (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for name, t in own.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ContractError(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}"
                )
            t.data = arr.copy()


def build_models(
    num_classes,
    emb_dim=64,
    proj_dim=32,
    image_size=32,
    clf_hidden=(64, 32),
    conv_channels=(8, 16, 32),
    dropout_rate=0.3,
    seed=0,
):
    """Deterministically initialize all models from one seed."""
    rng = np.random.default_rng(seed)
    enc3d = Encoder3D(rng, emb_dim, proj_dim)
    enc2d = Encoder2D(rng, image_size, emb_dim, proj_dim, conv_channels)
    clf = Classifier(rng, emb_dim, num_classes, clf_hidden, dropout_rate)
    meta = {
        "num_classes": num_classes,
        "emb_dim": emb_dim,
        "proj_dim": proj_dim,
        "image_size": image_size,
        "clf_hidden": tuple(clf_hidden),
        "conv_channels": tuple(conv_channels),
        "dropout_rate": dropout_rate,
        "seed": seed,
    }
    return ModelBundle(enc3d, enc2d, clf, meta)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"COTC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays):
    """Binary format: magic, version, tensor count, then for each tensor a
    length-prefixed utf-8 name, rank, dims, and little-endian f32 payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            if len(enc) > 0xFFFF:
                raise ContractError(f"tensor name too long: {name[:32]}...")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise ContractError(f"{path}: truncated checkpoint while reading {what}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    off = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_items = int(np.prod(dims)) if rank else 1
        payload = take(4 * n_items, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise ContractError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays
