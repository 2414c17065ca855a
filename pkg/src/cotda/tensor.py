"""Minimal reverse-mode autodiff over float32 numpy arrays.

Values are stored as float32; reductions and gradient accumulation run in
float64 and are truncated back to float32 when stored. Operations record
nodes onto an explicit Tape (a context manager); backward() walks the tape
in reverse append order and sums gradients additively, so a tensor used
twice receives the sum of both contributions. There is no implicit global
graph: code that runs outside a ``with Tape()`` block is pure evaluation.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError

EPS = 1e-8

_TAPE_STACK: list["Tape | None"] = []

# Storage dtype for newly created tensors. Normally float32; check_gradients
# temporarily pushes float64 so its finite-difference probes are not limited
# by single-precision rounding of the loss value (the analytic gradient under
# test is still produced by the ordinary float32 pipeline).
_STORE_DTYPE: list = [np.float32]


def _dt():
    return _STORE_DTYPE[-1]


@contextmanager
def storage_dtype(dtype):
    _STORE_DTYPE.append(dtype)
    try:
        yield
    finally:
        _STORE_DTYPE.pop()


class Tensor:
    """A dense float32 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=_dt())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; every route goes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


class _Node:
    __slots__ = ("kind", "out", "inputs", "pullback")

    def __init__(self, kind, out, inputs, pullback):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.pullback = pullback


class Tape:
    """Append-only record of operations, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def recording_paused():
    """Evaluate without recording, even inside an active Tape block."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _record(kind, out, inputs, pullback):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(kind, out, inputs, pullback))
    return out


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)

    def pull(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), pull)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)

    def pull(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), pull)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def pull(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", out, (a, b), pull)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data)
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)

    def pull(g):
        ga = _unbroadcast(g / bd, a.data.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.data.shape)
        return ga, gb

    return _record("div", out, (a, b), pull)


def neg(a):
    a = _wrap(a)
    out = Tensor(-a.data)

    def pull(g):
        return (-g,)

    return _record("neg", out, (a,), pull)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(
            f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = Tensor(a64 @ b64)

    def pull(g):
        return g @ b64.T, a64.T @ g

    return _record("matmul", out, (a, b), pull)


def transpose(a):
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ContractError(f"transpose expects a rank-2 tensor, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def pull(g):
        return (np.ascontiguousarray(g.T),)

    return _record("transpose", out, (a,), pull)


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def pull(g):
        return (g.reshape(old),)

    return _record("reshape", out, (a,), pull)


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]

    def pull(g):
        pieces = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            pieces.append(g[tuple(sl)])
            start += s
        return tuple(pieces)

    return _record("concat", out, tuple(ts), pull)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0

    def pull(g):
        return (g * mask,)

    return _record("relu", out, (a,), pull)


def exp(a):
    a = _wrap(a)
    y64 = np.exp(a.data.astype(np.float64))
    out = Tensor(y64)

    def pull(g):
        return (g * y64,)

    return _record("exp", out, (a,), pull)


def log(a):
    """Natural log of (x + 1e-8); the shift keeps zero inputs finite."""
    a = _wrap(a)
    x64 = a.data.astype(np.float64) + EPS
    out = Tensor(np.log(x64))

    def pull(g):
        return (g / x64,)

    return _record("log", out, (a,), pull)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a):
    a = _wrap(a)
    out = Tensor(np.sum(a.data, dtype=np.float64))
    shape = a.data.shape

    def pull(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), pull)


def sum_axis(a, axis, keepdims=False):
    a = _wrap(a)
    out64 = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims)
    out = Tensor(out64)
    shape = a.data.shape

    def pull(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum_axis", out, (a,), pull)


def tensor_mean(a):
    a = _wrap(a)
    n = a.data.size
    out = Tensor(np.sum(a.data, dtype=np.float64) / n)
    shape = a.data.shape

    def pull(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", out, (a,), pull)


def max_over_axis(a, axis):
    """Maximum along an axis; ties route the gradient to the lowest index."""
    a = _wrap(a)
    out = Tensor(np.max(a.data, axis=axis))
    idx = np.argmax(a.data, axis=axis)
    shape = a.data.shape

    def pull(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        return (gx,)

    return _record("max_over_axis", out, (a,), pull)


# ---------------------------------------------------------------------------
# norms and similarity


def l2_norm(a, axis=None, keepdims=False):
    """sqrt(sum(x^2) + 1e-8); the epsilon keeps the zero vector differentiable."""
    a = _wrap(a)
    x64 = a.data.astype(np.float64)
    s = np.sum(x64 * x64, axis=axis, keepdims=keepdims)
    n64 = np.sqrt(s + EPS)
    out = Tensor(n64)
    shape = a.data.shape

    def pull(g):
        if axis is None:
            return (g * x64 / n64,)
        gg = g if keepdims else np.expand_dims(g, axis)
        nn = n64 if keepdims else np.expand_dims(n64, axis)
        return (np.broadcast_to(gg / nn, shape) * x64,)

    return _record("l2_norm", out, (a,), pull)


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors, with 1e-8 guarded norms."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ContractError(
            f"cosine_similarity expects two equal-length vectors, got "
            f"{a.data.shape} and {b.data.shape}"
        )
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    nx = math.sqrt(float(np.dot(x, x)) + EPS)
    ny = math.sqrt(float(np.dot(y, y)) + EPS)
    s = float(np.dot(x, y)) / (nx * ny)
    out = Tensor(s)

    def pull(g):
        ga = g * (y / (nx * ny) - s * x / (nx * nx))
        gb = g * (x / (nx * ny) - s * y / (ny * ny))
        return ga, gb

    return _record("cosine_similarity", out, (a, b), pull)


def softmax(a, axis=-1):
    a = _wrap(a)
    x64 = a.data.astype(np.float64)
    shifted = x64 - np.max(x64, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y64)

    def pull(g):
        dot = np.sum(g * y64, axis=axis, keepdims=True)
        return (y64 * (g - dot),)

    return _record("softmax", out, (a,), pull)


def feature_norm(a):
    """Standardize each row over its last axis (zero mean, unit variance).

    A normalization layer with no running statistics: every forward pass,
    training or not, uses only the current activations, which keeps single
    samples and full batches on the identical code path.

    The mean and variance are accumulated over a sorted copy of each row, so
    the statistics are bit-identical under any reordering of the row. That
    matters when the normalized axis holds one value per point of a cloud:
    shuffling the points must not change the output by even one ulp.
    """
    a = _wrap(a)
    x64 = a.data.astype(np.float64)
    mu = np.mean(np.sort(x64, axis=-1), axis=-1, keepdims=True)
    xc = x64 - mu
    var = np.mean(np.sort(xc * xc, axis=-1), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS)
    y64 = xc * inv
    out = Tensor(y64)

    def pull(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gy = np.mean(g * y64, axis=-1, keepdims=True)
        return (inv * (g - gm - y64 * gy),)

    return _record("batchnorm_eval_free_variant", out, (a,), pull)


def dropout_mask_apply(a, mask, keep_prob):
    """Apply a precomputed 0/1 mask with inverted scaling by keep_prob."""
    a = _wrap(a)
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    m = np.asarray(mask, dtype=np.float32)
    if m.shape != a.data.shape:
        raise ContractError(
            f"dropout mask shape {m.shape} does not match input {a.data.shape}"
        )
    out = Tensor(a.data * m * (1.0 / keep_prob))
    m64 = m.astype(np.float64) / keep_prob

    def pull(g):
        return (g * m64,)

    return _record("dropout_mask_apply", out, (a,), pull)


def unfold_patches(a, ksize, stride=1, pad=0):
    """Extract sliding ksize x ksize patches from a (C, H, W) tensor.

    Returns a rank-2 tensor of shape (out_h * out_w, C * ksize * ksize),
    one flattened patch per output position, so a strided convolution is
    just this followed by a matmul.
    """
    a = _wrap(a)
    if a.data.ndim != 3:
        raise ContractError(f"unfold_patches expects (C, H, W), got {a.data.shape}")
    c, h, w = a.data.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < ksize or wp < ksize:
        raise ContractError("patch size exceeds padded input")
    oh = (hp - ksize) // stride + 1
    ow = (wp - ksize) // stride + 1

    xp = np.zeros((c, hp, wp), dtype=a.data.dtype)
    xp[:, pad : pad + h, pad : pad + w] = a.data
    cols = np.empty((c, ksize, ksize, oh, ow), dtype=a.data.dtype)
    for di in range(ksize):
        for dj in range(ksize):
            cols[:, di, dj] = xp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
    out = Tensor(
        np.ascontiguousarray(cols.transpose(3, 4, 0, 1, 2).reshape(oh * ow, c * ksize * ksize))
    )

    def pull(g):
        gcols = g.reshape(oh, ow, c, ksize, ksize).transpose(2, 3, 4, 0, 1)
        gxp = np.zeros((c, hp, wp), dtype=np.float64)
        for di in range(ksize):
            for dj in range(ksize):
                gxp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += gcols[
                    :, di, dj
                ]
        return (gxp[:, pad : pad + h, pad : pad + w],)

    return _record("unfold_patches", out, (a,), pull)


# ---------------------------------------------------------------------------
# dispatch table and backward pass

OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": tensor_sum,
    "sum_axis": sum_axis,
    "mean": tensor_mean,
    "max_over_axis": max_over_axis,
    "concat": concat,
    "l2_norm": l2_norm,
    "cosine_similarity": cosine_similarity,
    "softmax": softmax,
    "batchnorm_eval_free_variant": feature_norm,
    "dropout_mask_apply": dropout_mask_apply,
    "transpose": transpose,
    "reshape": reshape,
    "unfold_patches": unfold_patches,
}

OP_KINDS = tuple(OPS)


def forward_op(kind, inputs, **attrs):
    """Dispatch an operation by name. Unknown kinds are a contract error."""
    fn = OPS.get(kind)
    if fn is None:
        raise ContractError(f"unknown op kind {kind!r}; valid kinds: {sorted(OPS)}")
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    The tape is walked once in reverse append order. Leaves that the loss
    does not depend on are left untouched (their grad stays None or keeps
    whatever zeros the caller put there). Repeated use of a tensor sums.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.shape != ():
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.pullback(g)):
            if gt is None or not t.requires_grad:
                continue
            gt = np.asarray(gt, dtype=np.float64)
            tid = id(t)
            prev = grads.get(tid)
            grads[tid] = gt if prev is None else prev + gt
            holders[tid] = t

    for tid, g in grads.items():
        if tid in produced:
            continue
        t = holders[tid]
        gf = g.astype(np.float32)
        t.grad = gf if t.grad is None else t.grad + gf


def check_gradients(f, x, h=1e-3):
    """Compare the taped gradient of f at x against central differences.

    f maps a Tensor to a scalar Tensor. Returns the maximum elementwise
    relative error max |analytic - numeric| / max(1, |analytic|). The
    analytic side runs through the ordinary float32 pipeline; the numeric
    probes evaluate f in float64 so the difference quotient is not drowned
    by single-precision rounding of the loss value.
    """
    if not isinstance(x, Tensor):
        raise ContractError("check_gradients needs a Tensor input")
    x.requires_grad = True
    x.grad = None
    tape = Tape()
    with tape:
        out = f(x)
    if out.data.shape != ():
        raise ContractError("check_gradients requires f to return a scalar")
    backward(out, tape)
    analytic = (
        np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    ).astype(np.float64)

    saved = x.data
    x.data = saved.astype(np.float64)
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    try:
        with recording_paused(), storage_dtype(np.float64):
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data)
                flat[i] = orig - h
                fm = float(f(x).data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
                worst = max(worst, err)
    finally:
        x.data = saved
    return worst


def op_gradient_probe(kind, rng, h=3e-3):
    """Finite-difference error for one op kind on small random inputs.

    Each probe wraps the op in a scalar loss and runs check_gradients;
    constants riding along (weights, masks) are drawn once up front so the
    probed function is the same at every evaluation point.
    """
    if kind not in OPS:
        raise ContractError(f"unknown op kind {kind!r}; valid kinds: {sorted(OPS)}")
    w = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    m = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    v = Tensor(rng.normal(size=(7,)).astype(np.float32))
    mask = (rng.random((5, 6)) < 0.7).astype(np.float32)
    tw = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    cw = Tensor(rng.normal(size=(4 * 9, 3)).astype(np.float32) * 0.2)

    probes = {
        "matmul": (lambda t: tensor_sum(matmul(t, w)), (5, 6)),
        "add": (lambda t: tensor_sum(mul(add(t, m), m)), (5, 4)),
        "sub": (lambda t: tensor_sum(mul(sub(t, m), m)), (5, 4)),
        "mul": (lambda t: tensor_sum(mul(t, t)), (5, 6)),
        "div": (lambda t: tensor_sum(div(m, add(mul(t, t), 0.5))), (5, 4)),
        "neg": (lambda t: tensor_sum(mul(neg(t), m)), (5, 4)),
        "relu": (lambda t: tensor_mean(relu(matmul(t, w))), (5, 6)),
        "exp": (lambda t: tensor_sum(exp(mul(t, 0.3))), (4, 3)),
        "log": (lambda t: tensor_sum(log(add(mul(t, t), 0.5))), (4, 3)),
        "sum": (lambda t: tensor_sum(mul(t, t)), (5, 6)),
        "sum_axis": (lambda t: tensor_mean(sum_axis(mul(t, t), 0, keepdims=True)), (4, 3)),
        "mean": (lambda t: tensor_mean(mul(t, t)), (5, 6)),
        "max_over_axis": (lambda t: tensor_sum(max_over_axis(t, 1)), (5, 6)),
        "concat": (lambda t: tensor_sum(concat([t, mul(t, 2.0)], axis=0)), (3, 2)),
        "l2_norm": (lambda t: tensor_sum(l2_norm(t, axis=1)), (4, 3)),
        "cosine_similarity": (lambda t: cosine_similarity(t, v), (7,)),
        "softmax": (lambda t: tensor_sum(mul(softmax(t), m)), (5, 4)),
        "batchnorm_eval_free_variant": (
            lambda t: tensor_sum(mul(feature_norm(t), m)), (5, 4)),
        "dropout_mask_apply": (
            lambda t: tensor_sum(dropout_mask_apply(t, mask, 0.7)), (5, 6)),
        "transpose": (lambda t: tensor_sum(matmul(transpose(t), tw)), (4, 5)),
        "reshape": (lambda t: tensor_sum(mul(reshape(t, (6, 2)), 1.5)), (3, 4)),
        "unfold_patches": (
            lambda t: tensor_mean(relu(matmul(unfold_patches(t, 3, stride=2, pad=1), cw))),
            (4, 6, 6),
        ),
    }
    fn, shape = probes[kind]
    x = Tensor(rng.normal(size=shape).astype(np.float32), requires_grad=True)
    return check_gradients(fn, x, h=h)
