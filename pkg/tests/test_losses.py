import math

import numpy as np
import pytest

from cotda import losses
from cotda import tensor as T
from cotda.errors import ContractError, DivergenceError


def guarded_cos(x, y):
    nx = math.sqrt(float(np.dot(x, x)) + 1e-8)
    ny = math.sqrt(float(np.dot(y, y)) + 1e-8)
    return float(np.dot(x, y)) / (nx * ny)


def naive_nce(anchors, positives, others, tau):
    """Literal per-pair reference built from scalar similarities."""
    k = anchors.shape[0]
    total = 0.0
    for i in range(k):
        num = math.exp(guarded_cos(anchors[i], positives[i]) / tau)
        den = sum(
            math.exp(guarded_cos(anchors[i], anchors[j]) / tau)
            + math.exp(guarded_cos(anchors[i], others[j]) / tau)
            for j in range(k)
        )
        total += -math.log(num / den + 1e-8)
    return total / k


def test_sim_exp_matches_formula_and_validates_tau():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    got = losses.sim_exp(T.Tensor(a), T.Tensor(b), 0.1).item()
    want = math.exp(guarded_cos(a.astype(np.float32), b.astype(np.float32)) / 0.1)
    assert abs(got - want) / want <= 1e-5
    with pytest.raises(ContractError):
        losses.sim_exp(T.Tensor(a), T.Tensor(b), 0.0)
    with pytest.raises(ContractError):
        losses.sim_exp(T.Tensor(a), T.Tensor(b), -0.5)


@pytest.mark.parametrize("k,d", [(2, 8), (5, 16), (8, 32)])
def test_loss_3d_matches_naive_double_loop(k, d):
    rng = np.random.default_rng(k * 31 + d)
    a = rng.normal(size=(k, d)).astype(np.float32)
    b = rng.normal(size=(k, d)).astype(np.float32)
    got = losses.loss_3d(T.Tensor(a), T.Tensor(b), 0.1).item()
    assert abs(got - naive_nce(a, b, b, 0.1)) <= 1e-5


@pytest.mark.parametrize("k,d", [(3, 8), (6, 16)])
def test_loss_mm_matches_naive_double_loop(k, d):
    rng = np.random.default_rng(k * 17 + d)
    a = rng.normal(size=(k, d)).astype(np.float32)
    b = rng.normal(size=(k, d)).astype(np.float32)
    img = rng.normal(size=(k, d)).astype(np.float32)
    got = losses.loss_mm(T.Tensor(a), T.Tensor(b), T.Tensor(img), 0.1).item()
    avg = (a.astype(np.float64) + b.astype(np.float64)) * 0.5
    assert abs(got - naive_nce(avg, img, img, 0.1)) <= 1e-5


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_identical_batches_give_log_2k(k):
    rng = np.random.default_rng(3)
    row = rng.normal(size=(1, 32)).astype(np.float32)
    z = T.Tensor(np.repeat(row, k, axis=0))
    assert abs(losses.loss_3d(z, z, 0.1).item() - math.log(2 * k)) <= 1e-6
    assert abs(losses.loss_mm(z, z, z, 0.1).item() - math.log(2 * k)) <= 1e-6


def test_batch_order_invariance():
    rng = np.random.default_rng(4)
    k = 6
    a = rng.normal(size=(k, 16)).astype(np.float32)
    b = rng.normal(size=(k, 16)).astype(np.float32)
    perm = rng.permutation(k)
    before = losses.loss_3d(T.Tensor(a), T.Tensor(b), 0.1).item()
    after = losses.loss_3d(T.Tensor(a[perm]), T.Tensor(b[perm]), 0.1).item()
    assert abs(before - after) <= 1e-6


def test_exclude_self_sim_drops_own_view_term():
    rng = np.random.default_rng(5)
    k = 4
    a = rng.normal(size=(k, 8)).astype(np.float32)
    b = rng.normal(size=(k, 8)).astype(np.float32)
    default = losses.loss_3d(T.Tensor(a), T.Tensor(b), 0.1).item()
    trimmed = losses.loss_3d(T.Tensor(a), T.Tensor(b), 0.1, exclude_self_sim=True).item()
    # removing the dominant self term shrinks the denominator
    assert trimmed < default

    total = 0.0
    for i in range(k):
        num = math.exp(guarded_cos(a[i], b[i]) / 0.1)
        den = sum(
            math.exp(guarded_cos(a[i], a[j]) / 0.1) for j in range(k) if j != i
        ) + sum(math.exp(guarded_cos(a[i], b[j]) / 0.1) for j in range(k))
        total += -math.log(num / den + 1e-8)
    assert abs(trimmed - total / k) <= 1e-5


def test_contrastive_losses_are_differentiable():
    rng = np.random.default_rng(6)
    k, d = 4, 8
    b = T.Tensor(rng.normal(size=(k, d)).astype(np.float32))
    c = T.Tensor(rng.normal(size=(k, d)).astype(np.float32))
    x = T.Tensor(rng.normal(size=(k, d)).astype(np.float32))
    assert T.check_gradients(lambda t: losses.loss_3d(t, b, 0.1), x, h=1e-3) <= 1e-4
    x2 = T.Tensor(rng.normal(size=(k, d)).astype(np.float32))
    assert T.check_gradients(lambda t: losses.loss_mm(t, b, c, 0.1), x2, h=1e-3) <= 1e-4


def test_loss_cls_matches_naive_and_checks_labels():
    rng = np.random.default_rng(7)
    probs = rng.random((5, 4)).astype(np.float32) + 0.1
    probs /= probs.sum(axis=1, keepdims=True)
    y = np.eye(4, dtype=np.float32)[[0, 2, 1, 3, 2]]
    got = losses.loss_cls(T.Tensor(probs), y).item()
    want = np.mean(
        [-np.sum(y[i] * np.log(probs[i].astype(np.float64) + 1e-8)) for i in range(5)]
    )
    assert abs(got - want) <= 1e-5

    soft = np.full((5, 4), 0.25, dtype=np.float32)
    assert losses.loss_cls(T.Tensor(probs), soft).item() > 0

    with pytest.raises(ContractError):
        losses.loss_cls(T.Tensor(probs), y * 2.0)
    with pytest.raises(ContractError):
        losses.loss_cls(T.Tensor(probs), y[:, :3])


def test_loss_cls_gradient():
    rng = np.random.default_rng(8)
    y = np.eye(3, dtype=np.float32)[[0, 1, 2, 1]]
    logits = rng.normal(size=(4, 3)).astype(np.float32)
    err = T.check_gradients(
        lambda t: losses.loss_cls(T.softmax(t), y), T.Tensor(logits), h=1e-3
    )
    assert err <= 1e-4


def test_loss_total_sums_and_guards():
    parts = [T.Tensor(np.float32(v)) for v in (1.0, 2.0, 0.5, 0.25)]
    assert abs(losses.loss_total(*parts).item() - 3.75) <= 1e-6
    bad = T.Tensor(np.float32(np.nan))
    with pytest.raises(DivergenceError):
        losses.loss_total(bad, parts[1], parts[2], parts[3])
    with pytest.raises(ContractError):
        losses.loss_total(T.Tensor(np.ones(3)), parts[1], parts[2], parts[3])
