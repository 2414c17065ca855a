import math

import numpy as np
import pytest

from cotda import evaluate as ev
from cotda.datagen import DomainSpec, generate_domain_pair
from cotda.errors import ContractError, LabelAccessError
from cotda.models import build_models
from cotda.pointcloud import adaptation_guard


def tiny_bundle():
    return build_models(5, emb_dim=16, proj_dim=8, image_size=16,
                        clf_hidden=(12,), conv_channels=(4,), seed=0)


def tiny_data(seed=0, per_class=2):
    spec = DomainSpec(density=40)
    return generate_domain_pair(spec, spec, per_class, seed)


def mmd_quadruple_loop(x, y, sigma):
    """Direct four-sum definition of the biased estimate."""
    gamma = 1.0 / (2.0 * sigma * sigma)

    def k(a, b):
        return math.exp(-gamma * float(((a - b) ** 2).sum()))

    n, m = len(x), len(y)
    kxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n)) / (n * n)
    kyy = sum(k(y[i], y[j]) for i in range(m) for j in range(m)) / (m * m)
    kxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return math.sqrt(max(kxx + kyy - 2 * kxy, 0.0))


def test_rbf_mmd_matches_quadruple_loop():
    rng = np.random.default_rng(0)
    for trial in range(5):
        x = rng.normal(size=(6, 4))
        y = rng.normal(size=(5, 4)) + 0.5
        sigma = 0.5 + rng.random()
        assert ev.rbf_mmd(x, y, sigma) == pytest.approx(
            mmd_quadruple_loop(x, y, sigma), abs=1e-9
        )


def test_mmd_identical_samples_is_zero():
    x = np.random.default_rng(1).normal(size=(8, 3))
    assert ev.rbf_mmd(x, x.copy(), 1.0) == 0.0


def test_mmd_grows_with_shift():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    near = ev.rbf_mmd(x, x + 0.05, 1.0)
    far = ev.rbf_mmd(x, x + 3.0, 1.0)
    assert far > near > 0.0


def test_median_heuristic_hand_check():
    x = np.array([[0.0], [1.0]])
    y = np.array([[2.0]])
    # pooled pairwise distances: 1, 2, 1 -> median 1
    assert ev.median_heuristic_bandwidth(x, y) == pytest.approx(1.0)


def test_mmd_validation():
    with pytest.raises(ContractError):
        ev.rbf_mmd(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        ev.rbf_mmd(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ContractError):
        ev.rbf_mmd(np.zeros((2, 2)), np.zeros((2, 2)), bandwidth=0.0)


def test_evaluate_confusion_is_consistent():
    bundle = tiny_bundle()
    src, _ = tiny_data()
    rep = ev.evaluate(bundle, src)
    assert rep.confusion.sum() == len(src)
    preds = ev.predict_probs(bundle, src.clouds).argmax(axis=1)
    assert np.array_equal(rep.predictions, preds)
    truth = src.eval_labels()
    assert rep.accuracy == pytest.approx(float((preds == truth).mean()))
    for t in range(5):
        for p in range(5):
            assert rep.confusion[t, p] == int(((truth == t) & (preds == p)).sum())


def test_evaluate_blocked_during_adaptation():
    bundle = tiny_bundle()
    _, tgt = tiny_data()
    with adaptation_guard:
        with pytest.raises(LabelAccessError):
            ev.evaluate(bundle, tgt)
    assert ev.evaluate(bundle, tgt).confusion.shape == (5, 5)


def test_classwise_mmd_shape_and_self_distance():
    bundle = tiny_bundle()
    src, tgt = tiny_data(per_class=3)
    m = ev.classwise_mmd(bundle, src, tgt)
    assert m.shape == (5, 5)
    assert np.isfinite(m).all()
    same = ev.classwise_mmd(bundle, src, src)
    assert np.allclose(np.diag(same), 0.0, atol=1e-12)


def test_export_embeddings_round_trip(tmp_path):
    bundle = tiny_bundle()
    src, tgt = tiny_data()
    path = str(tmp_path / "emb.csv")
    ev.export_embeddings(bundle, [("src", src), ("tgt", tgt)], path)
    ids, domains, truth, preds, feats = ev.load_embeddings(path)
    assert len(ids) == len(src) + len(tgt)
    assert set(domains) == {"source", "target"}
    direct = np.vstack([
        ev.embed_global(bundle, src.clouds),
        ev.embed_global(bundle, tgt.clouds),
    ])
    assert np.array_equal(feats, direct)
    assert np.array_equal(truth[: len(src)], src.eval_labels())
    assert np.array_equal(truth[len(src):], tgt.eval_labels())


def test_load_embeddings_rejects_other_files(tmp_path):
    p = tmp_path / "junk.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ContractError):
        ev.load_embeddings(str(p))


def test_write_report_files(tmp_path):
    bundle = tiny_bundle()
    src, tgt = tiny_data()
    reps = [("source_test", ev.evaluate(bundle, src)), ("target_test", ev.evaluate(bundle, tgt))]
    mmd = ev.classwise_mmd(bundle, src, tgt)
    paths = ev.write_report(str(tmp_path), reps, mmd)
    assert [p.split("/")[-1] for p in paths] == ["accuracy.csv", "confusion.csv", "mmd.csv"]
    acc_lines = (tmp_path / "accuracy.csv").read_text().splitlines()
    assert acc_lines[0] == "dataset,accuracy"
    assert len(acc_lines) == 3
    mmd_lines = (tmp_path / "mmd.csv").read_text().splitlines()
    assert mmd_lines[0] == "source_class,target_class,mmd"
    assert len(mmd_lines) == 26
