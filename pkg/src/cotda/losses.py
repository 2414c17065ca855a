"""Contrastive, classification, and combined training objectives.

Both contrastive losses share one shape: for anchor i the numerator is
the exponentiated scaled similarity to its positive partner, and the
denominator sums similarities to every batch element under both views of
the pair, the i=j terms included (a flag switches to the convention that
drops the anchor's own-view self term). Each anchor contributes
-log(numerator / denominator) and the batch average is returned.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import ContractError, DivergenceError


def _check_tau(tau):
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")


def sim_exp(z_i, z_j, tau):
    """exp(cos(z_i, z_j) / tau) for a single vector pair."""
    _check_tau(tau)
    return tt.exp(tt.mul(tt.cosine_similarity(z_i, z_j), 1.0 / tau))


def _rows_unit(z):
    return tt.div(z, tt.l2_norm(z, axis=1, keepdims=True))


def _check_batch(z, name):
    if not isinstance(z, tt.Tensor):
        z = tt.Tensor(z)
    if z.data.ndim != 2 or z.data.shape[0] < 1:
        raise ContractError(f"{name} must be a (k, d) batch, got {z.data.shape}")
    return z


def _nce(anchors, positives, others, tau, exclude_self):
    """Shared InfoNCE core over row-normalized batches.

    anchors/positives are matched row for row; the denominator pools
    similarities to `anchors` (own view) and `others` (partner view).
    """
    a = _rows_unit(anchors)
    o = _rows_unit(others)
    matched = tt.exp(tt.mul(tt.sum_axis(tt.mul(a, _rows_unit(positives)), 1), 1.0 / tau))

    e_own = tt.exp(tt.mul(tt.matmul(a, tt.transpose(a)), 1.0 / tau))
    e_other = tt.exp(tt.mul(tt.matmul(a, tt.transpose(o)), 1.0 / tau))
    den = tt.add(tt.sum_axis(e_own, 1), tt.sum_axis(e_other, 1))
    if exclude_self:
        self_own = tt.exp(tt.mul(tt.sum_axis(tt.mul(a, a), 1), 1.0 / tau))
        den = tt.sub(den, self_own)
    per_anchor = tt.neg(tt.log(tt.div(matched, den)))
    return tt.tensor_mean(per_anchor)


def loss_3d(z_t1, z_t2, tau, exclude_self_sim=False):
    """Contrast two augmented views of the same clouds against the batch."""
    _check_tau(tau)
    z1 = _check_batch(z_t1, "z_t1")
    z2 = _check_batch(z_t2, "z_t2")
    if z1.data.shape != z2.data.shape:
        raise ContractError("view batches must have equal shape")
    return _nce(z1, z2, z2, tau, exclude_self_sim)


def loss_mm(z_t1, z_t2, z_img, tau, exclude_self_sim=False):
    """Contrast the averaged 3D embedding against the rendered-image embedding.

    The anchor is the renormalized mean of the two augmented views; the
    positive is the multi-view image embedding of the same cloud.
    """
    _check_tau(tau)
    z1 = _check_batch(z_t1, "z_t1")
    z2 = _check_batch(z_t2, "z_t2")
    zi = _check_batch(z_img, "z_img")
    if z1.data.shape != z2.data.shape:
        raise ContractError("view batches must have equal shape")
    if zi.data.shape != z1.data.shape:
        raise ContractError("image batch must match the view batches")
    z_avg = _rows_unit(tt.mul(tt.add(z1, z2), 0.5))
    return _nce(z_avg, zi, zi, tau, exclude_self_sim)


def loss_cls(probs, soft_labels):
    """Mean cross-entropy against (possibly mixed) soft label rows."""
    p = _check_batch(probs, "probs")
    y = np.asarray(
        soft_labels.data if isinstance(soft_labels, tt.Tensor) else soft_labels,
        dtype=np.float32,
    )
    if y.shape != p.data.shape:
        raise ContractError(f"label shape {y.shape} does not match probs {p.data.shape}")
    if (y < 0).any() or np.abs(y.sum(axis=1) - 1.0).max() > 1e-5:
        raise ContractError("soft labels must be nonnegative rows summing to 1")
    per_row = tt.sum_axis(tt.mul(tt.Tensor(y), tt.log(p)), 1)
    return tt.neg(tt.tensor_mean(per_row))


def loss_total(l_3d, l_mm, l_ot, l_cls):
    """Unweighted sum of the four objectives; non-finite parts abort."""
    parts = {"loss_3d": l_3d, "loss_mm": l_mm, "loss_ot": l_ot, "loss_cls": l_cls}
    for name, part in parts.items():
        if not isinstance(part, tt.Tensor) or part.data.shape != ():
            raise ContractError(f"{name} must be a scalar tensor")
        if not np.isfinite(part.data):
            raise DivergenceError(f"{name} became non-finite")
    return tt.add(tt.add(l_3d, l_mm), tt.add(l_ot, l_cls))
