import numpy as np
import pytest

from cotda import tensor as tt
from cotda.errors import ContractError
from cotda.models import (
    Classifier,
    Encoder2D,
    Encoder3D,
    build_models,
    load_checkpoint,
    save_checkpoint,
)


def test_encoder3d_is_permutation_invariant_bitwise():
    enc = Encoder3D(np.random.default_rng(0))
    pts = np.random.default_rng(1).normal(size=(40, 3)).astype(np.float32)
    g1, p1 = enc(pts)
    perm = np.random.default_rng(2).permutation(40)
    g2, p2 = enc(pts[perm])
    assert np.array_equal(g1.data, g2.data)
    assert np.array_equal(p1.data, p2.data)


def test_projection_output_is_unit_norm():
    enc = Encoder3D(np.random.default_rng(3))
    for seed in range(4):
        pts = np.random.default_rng(seed).normal(size=(16, 3)).astype(np.float32)
        _, proj = enc(pts)
        assert proj.data.ndim == 1
        n = float(np.linalg.norm(proj.data.astype(np.float64)))
        assert abs(n - 1.0) < 1e-5


def test_encoder3d_rejects_bad_shape():
    enc = Encoder3D(np.random.default_rng(0))
    with pytest.raises(ContractError):
        enc(np.zeros((5, 2), dtype=np.float32))


def test_encoder2d_handles_view_stack_and_checks_size():
    enc = Encoder2D(np.random.default_rng(0), image_size=32)
    imgs = np.random.default_rng(1).random((4, 32, 32)).astype(np.float32)
    g, p = enc(imgs)
    assert g.data.shape == (enc.emb_dim,)
    assert abs(float(np.linalg.norm(p.data.astype(np.float64))) - 1.0) < 1e-5
    with pytest.raises(ContractError):
        Encoder2D(np.random.default_rng(0), image_size=2)


def test_encoder2d_view_order_invariant():
    enc = Encoder2D(np.random.default_rng(5), image_size=32)
    imgs = np.random.default_rng(6).random((6, 32, 32)).astype(np.float32)
    g1, _ = enc(imgs)
    g2, _ = enc(imgs[::-1].copy())
    assert np.array_equal(g1.data, g2.data)


def test_classifier_uniform_at_zero_weights():
    clf = Classifier(np.random.default_rng(0), emb_dim=8, num_classes=5, hidden=(6,))
    for _, t in clf.named():
        t.data = np.zeros_like(t.data)
    probs = clf(np.random.default_rng(1).normal(size=(3, 8)).astype(np.float32))
    assert np.allclose(probs.data, 0.2, atol=1e-7)
    assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def test_classifier_dropout_only_with_rng():
    clf = Classifier(np.random.default_rng(2), emb_dim=8, num_classes=4, dropout_rate=0.5)
    x = np.random.default_rng(3).normal(size=(4, 8)).astype(np.float32)
    a = clf(x)
    b = clf(x)
    assert np.array_equal(a.data, b.data)
    c = clf(x, rng=np.random.default_rng(7))
    d = clf(x, rng=np.random.default_rng(7))
    e = clf(x, rng=np.random.default_rng(8))
    assert np.array_equal(c.data, d.data)
    assert not np.array_equal(c.data, e.data)


def test_build_models_deterministic():
    a = build_models(5, seed=12)
    b = build_models(5, seed=12)
    for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    c = build_models(5, seed=13)
    assert any(
        not np.array_equal(ta.data, tc.data)
        for (_, ta), (_, tc) in zip(a.named_params(), c.named_params())
    )


def test_checkpoint_round_trip_bit_exact(tmp_path):
    bundle = build_models(5, seed=4)
    path = str(tmp_path / "m.cotc")
    save_checkpoint(path, bundle.state_arrays())
    back = load_checkpoint(path)
    fresh = build_models(5, seed=99)
    fresh.load_state_arrays(back)
    for (n1, t1), (n2, t2) in zip(bundle.named_params(), fresh.named_params()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)


def test_checkpoint_rejects_corruption(tmp_path):
    bundle = build_models(3, seed=0)
    path = str(tmp_path / "m.cotc")
    save_checkpoint(path, bundle.state_arrays())
    raw = open(path, "rb").read()
    with open(str(tmp_path / "trunc.cotc"), "wb") as fh:
        fh.write(raw[:-5])
    with pytest.raises(ContractError, match="truncated"):
        load_checkpoint(str(tmp_path / "trunc.cotc"))
    with open(str(tmp_path / "magic.cotc"), "wb") as fh:
        fh.write(b"XXXX" + raw[4:])
    with pytest.raises(ContractError, match="magic"):
        load_checkpoint(str(tmp_path / "magic.cotc"))
    with open(str(tmp_path / "trail.cotc"), "wb") as fh:
        fh.write(raw + b"\x00")
    with pytest.raises(ContractError, match="trailing"):
        load_checkpoint(str(tmp_path / "trail.cotc"))


def test_load_state_mismatch_errors():
    bundle = build_models(4, seed=1)
    state = bundle.state_arrays()
    missing = dict(state)
    missing.pop(next(iter(missing)))
    with pytest.raises(ContractError, match="missing"):
        bundle.load_state_arrays(missing)
    extra = dict(state)
    extra["ghost"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ContractError, match="unexpected"):
        bundle.load_state_arrays(extra)
    bad = dict(state)
    k = next(iter(bad))
    bad[k] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ContractError, match="shape"):
        bundle.load_state_arrays(bad)


def test_gradients_reach_every_trainable_tensor():
    bundle = build_models(3, emb_dim=16, proj_dim=8, image_size=32,
                          clf_hidden=(8,), conv_channels=(4, 8), seed=6)
    pts = np.random.default_rng(0).normal(size=(20, 3)).astype(np.float32)
    imgs = np.random.default_rng(1).random((2, 32, 32)).astype(np.float32)
    with tt.Tape() as tape:
        g, p3 = bundle.enc3d(pts)
        _, p2 = bundle.enc2d(imgs)
        probs = bundle.clf(g)
        loss = tt.tensor_sum(
            tt.add(tt.add(tt.mul(p3, p3), tt.mul(p2, p2)), tt.tensor_sum(tt.mul(probs, probs)))
        )
        tt.backward(loss, tape)
    for name, t in bundle.named_params():
        assert np.isfinite(t.grad).all(), name
        assert np.any(t.grad != 0.0), f"no gradient reached {name}"
