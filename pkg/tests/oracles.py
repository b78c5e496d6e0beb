"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written the slow, obvious way (all-pairs
distances, per-pixel counting, central finite differences) so it shares no
code path with the library routines it checks.
"""

import numpy as np
import torch
from scipy.spatial.distance import cdist


def brute_force_sdt(ids, class_of_instance=None, n_thing_classes=1):
    """Normalized instance distance map via all-pairs distances.

    For every pixel of an instance: the minimum Euclidean distance to any
    in-frame pixel outside that instance, divided by the per-instance
    maximum of those minima. Pixels beyond the frame never count as
    complement; an instance covering the whole frame gets constant 1.
    Returns (H, W, n_thing) float32 like the library routine.
    """
    ids = np.asarray(ids)
    h, w = ids.shape
    out = np.zeros((h, w, n_thing_classes), dtype=np.float32)
    coords = np.stack(
        np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1
    ).reshape(-1, 2).astype(np.float64)
    flat = ids.reshape(-1)
    for oid in np.unique(ids):
        if oid <= 0:
            continue
        inside = coords[flat == oid]
        outside = coords[flat != oid]
        if len(outside):
            dmin = cdist(inside, outside).min(axis=1)
        else:
            dmin = np.ones(len(inside), dtype=np.float64)
        vals = (dmin / dmin.max()).astype(np.float32)
        channel = 0 if class_of_instance is None else class_of_instance[int(oid)]
        rows = inside[:, 0].astype(int)
        cols = inside[:, 1].astype(int)
        out[rows, cols, channel] = vals
    return out


def fd_gradient(fn, x, step=1e-4):
    """Central finite-difference gradient of scalar ``fn`` at tensor ``x``.

    ``x`` should be float64; ``fn`` must not mutate it. Returns a tensor of
    the same shape.
    """
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        f_hi = float(fn(x))
        flat[i] = orig - step
        f_lo = float(fn(x))
        flat[i] = orig
        grad[i] = (f_hi - f_lo) / (2.0 * step)
    return grad.reshape(x.shape)


def counting_semantic_metrics(pred, ref, n_classes):
    """Per-class recall/precision/F1, overall accuracy, and mean F1 computed
    by explicit per-pixel counting."""
    pred = np.asarray(pred).ravel().tolist()
    ref = np.asarray(ref).ravel().tolist()
    assert len(pred) == len(ref) and len(pred) > 0
    hits = [0] * n_classes
    ref_count = [0] * n_classes
    pred_count = [0] * n_classes
    for p, r in zip(pred, ref):
        ref_count[r] += 1
        pred_count[p] += 1
        if p == r:
            hits[p] += 1
    recall, precision, f1 = [], [], []
    for c in range(n_classes):
        rec = hits[c] / ref_count[c] if ref_count[c] else 0.0
        prec = hits[c] / pred_count[c] if pred_count[c] else 0.0
        recall.append(rec)
        precision.append(prec)
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return {
        "recall": recall,
        "precision": precision,
        "f1": f1,
        "oa": sum(hits) / len(pred),
        "mf1": sum(f1) / n_classes,
    }
