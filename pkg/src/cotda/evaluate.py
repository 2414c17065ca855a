"""Scoring, distribution-distance diagnostics, and embedding export.

Everything here runs outside adaptation: sealed datasets expose their
ground truth through eval_labels(), predictions come from the classifier
over the global 3D feature with dropout off and no gradient tape.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError


def embed_global(bundle, clouds):
    """(n, emb_dim) float32 matrix of pooled encoder features."""
    out = np.empty((len(clouds), bundle.enc3d.emb_dim), dtype=np.float32)
    with tt.recording_paused():
        for i, cloud in enumerate(clouds):
            pooled, _ = bundle.enc3d(cloud.points)
            out[i] = pooled.data
    return out


def predict_probs(bundle, clouds):
    """(n, num_classes) class probabilities, deterministic (no dropout)."""
    feats = embed_global(bundle, clouds)
    with tt.recording_paused():
        probs = bundle.clf(feats)
    return probs.data.copy()


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray  # (K,) recall per true class
    confusion: np.ndarray  # (K, K) rows true, columns predicted
    predictions: np.ndarray  # (n,) argmax labels


def evaluate(bundle, dataset):
    """Accuracy of argmax predictions against the dataset's ground truth."""
    labels = dataset.eval_labels()
    probs = predict_probs(bundle, dataset.clouds)
    preds = probs.argmax(axis=1).astype(np.int64)
    k = dataset.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    row_totals = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion),
        row_totals,
        out=np.zeros(k, dtype=np.float64),
        where=row_totals > 0,
    )
    accuracy = float(np.trace(confusion)) / max(1, len(labels))
    return EvalReport(accuracy, per_class, confusion, preds)


# ---------------------------------------------------------------------------
# maximum mean discrepancy


def median_heuristic_bandwidth(x, y):
    """Median pairwise distance over the pooled sample (strictly upper pairs)."""
    z = np.vstack([np.asarray(x, np.float64), np.asarray(y, np.float64)])
    sq = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
    upper = sq[np.triu_indices(len(z), k=1)]
    med = float(np.sqrt(np.median(upper))) if upper.size else 0.0
    return med if med > 0 else 1.0


def rbf_mmd(x, y, bandwidth=None):
    """Biased (V-statistic) MMD with a Gaussian kernel.

    bandwidth is the kernel sigma; when omitted the median heuristic over
    the pooled sample decides it. The squared estimate is clamped at zero
    before the square root, so tiny negative rounding cannot leak out.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ContractError("mmd expects two (n, d) matrices over the same d")
    if len(x) == 0 or len(y) == 0:
        raise ContractError("mmd needs at least one sample on each side")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(x, y)
    if bandwidth <= 0:
        raise ContractError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)

    def kmean(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return float(np.exp(-gamma * sq).mean())

    mmd2 = kmean(x, x) + kmean(y, y) - 2.0 * kmean(x, y)
    return float(np.sqrt(max(mmd2, 0.0)))


def classwise_mmd(bundle, source_ds, target_ds, bandwidth=None):
    """(K, K) matrix of feature-space MMDs between source class i and
    target class j. A well-aligned model has a small diagonal."""
    if source_ds.num_classes != target_ds.num_classes:
        raise ContractError("datasets disagree on the class count")
    k = source_ds.num_classes
    fs = embed_global(bundle, source_ds.clouds)
    ft = embed_global(bundle, target_ds.clouds)
    ls = source_ds.eval_labels()
    lt = target_ds.eval_labels()
    out = np.full((k, k), np.nan)
    for i in range(k):
        xs = fs[ls == i]
        if len(xs) == 0:
            continue
        for j in range(k):
            yt = ft[lt == j]
            if len(yt) == 0:
                continue
            out[i, j] = rbf_mmd(xs, yt, bandwidth)
    return out


# ---------------------------------------------------------------------------
# report files


def export_embeddings(bundle, named_datasets, path):
    """CSV of global features: id,domain,true_label,pred_label,f0..f{d-1}.

    Floats are written with repr, so reading the file back reproduces the
    float32 features bit for bit.
    """
    dim = bundle.enc3d.emb_dim
    header = ["id", "domain", "true_label", "pred_label"] + [f"f{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, ds in named_datasets:
            feats = embed_global(bundle, ds.clouds)
            with tt.recording_paused():
                preds = bundle.clf(feats).data.argmax(axis=1)
            try:
                truth = ds.eval_labels()
            except ContractError:
                truth = np.full(len(ds), -1, dtype=np.int64)
            for i in range(len(ds)):
                row = [f"{name}_{i:04d}", ds.clouds[i].domain, int(truth[i]), int(preds[i])]
                row += [repr(float(v)) for v in feats[i]]
                w.writerow(row)
    return path


def load_embeddings(path):
    """Inverse of export_embeddings: (ids, domains, truth, preds, features)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["id", "domain", "true_label", "pred_label"]:
        raise ContractError(f"{path}: not an embedding export")
    ids, domains, truth, preds, feats = [], [], [], [], []
    for row in rows[1:]:
        ids.append(row[0])
        domains.append(row[1])
        truth.append(int(row[2]))
        preds.append(int(row[3]))
        feats.append([np.float32(float(v)) for v in row[4:]])
    return (
        ids,
        domains,
        np.array(truth, dtype=np.int64),
        np.array(preds, dtype=np.int64),
        np.array(feats, dtype=np.float32),
    )


def write_report(out_dir, named_reports, mmd_matrix=None):
    """accuracy.csv and confusion.csv for each (name, EvalReport); mmd.csv
    for an optional classwise matrix. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    acc_path = os.path.join(out_dir, "accuracy.csv")
    with open(acc_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "accuracy"])
        for name, rep in named_reports:
            w.writerow([name, repr(rep.accuracy)])
    paths.append(acc_path)
    conf_path = os.path.join(out_dir, "confusion.csv")
    with open(conf_path, "w", newline="") as fh:
        w = csv.writer(fh)
        if named_reports:
            k = named_reports[0][1].confusion.shape[0]
            w.writerow(["dataset", "true_label"] + [f"pred_{i}" for i in range(k)])
        for name, rep in named_reports:
            for t in range(rep.confusion.shape[0]):
                w.writerow([name, t] + [int(v) for v in rep.confusion[t]])
    paths.append(conf_path)
    if mmd_matrix is not None:
        mmd_path = os.path.join(out_dir, "mmd.csv")
        with open(mmd_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_class", "target_class", "mmd"])
            k = mmd_matrix.shape[0]
            for i in range(k):
                for j in range(k):
                    w.writerow([i, j, repr(float(mmd_matrix[i, j]))])
        paths.append(mmd_path)
    return paths
