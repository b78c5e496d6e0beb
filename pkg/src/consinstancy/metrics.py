"""Semantic, instance, and panoptic evaluation.

Semantic rates derive from a single confusion matrix pooled over all
evaluated pixels of all images (micro-average). Instance matching is greedy
by descending overlap at an IoU floor of 0.5 inclusive and respects the
semantic class; matched/unmatched counts and matched IoUs likewise pool
globally before the panoptic-quality and instance-F1 ratios are formed.
Every 0/0 rate is reported as 0, with an explicit flag for the two
instance-level ratios.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .panoptic import PanopticMap
from .representations import THING_CHANNEL_OFFSET, InstanceLabelMap, class_index_from_labels


def _safe_rate(num, den):
    return float(num) / float(den) if den else 0.0


def confusion_matrix(pred, ref, n_classes):
    """Counts[i, j] = pixels with reference class i predicted as class j."""
    pred = np.asarray(pred).ravel()
    ref = np.asarray(ref).ravel()
    if pred.size == 0:
        raise ValueError("empty input: no pixels to evaluate")
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    for name, arr in (("pred", pred), ("ref", ref)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} classes outside [0, {n_classes})")
    flat = ref.astype(np.int64) * n_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def semantic_scores(confusion):
    """Per-class recall/precision/F1 plus overall accuracy and the
    unweighted class-mean F1, all from one confusion matrix."""
    confusion = np.asarray(confusion, dtype=np.int64)
    diag = np.diag(confusion)
    recall = [_safe_rate(diag[c], confusion[c, :].sum()) for c in range(len(diag))]
    precision = [_safe_rate(diag[c], confusion[:, c].sum()) for c in range(len(diag))]
    f1 = [_safe_rate(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return {
        "recall": recall,
        "precision": precision,
        "f1": f1,
        "oa": _safe_rate(diag.sum(), confusion.sum()),
        "mf1": float(np.mean(f1)),
    }


def semantic_metrics(pred, ref, n_classes):
    """Pixel metrics for one or more images of predicted/reference class
    indices (any matching shapes)."""
    return semantic_scores(confusion_matrix(pred, ref, n_classes))


@dataclass
class InstanceMatches:
    """Greedy matching result: matched (pred id, ref id, IoU) triples plus
    the leftover ids on either side."""

    tp: list = field(default_factory=list)
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)

    @property
    def iou_sum(self):
        return float(sum(iou for _, _, iou in self.tp))


def _segment_classes(ids, classes):
    """Map each positive id to the semantic class of its pixels."""
    sel = ids > 0
    out = {}
    for i, c in zip(ids[sel].ravel(), classes[sel].ravel()):
        prev = out.setdefault(int(i), int(c))
        if prev != int(c):
            raise ValueError(f"instance {int(i)} spans multiple classes")
    return out


def match_instances(pred: PanopticMap, ref: InstanceLabelMap, iou_min=0.5) -> InstanceMatches:
    """Greedy one-to-one matching by descending IoU, same-class pairs only,
    accepting IoU >= iou_min."""
    pred_ids = pred.id_of_pixel
    ref_ids = np.asarray(ref.ids)
    if pred_ids.shape != ref_ids.shape:
        raise ValueError(f"shape mismatch: {pred_ids.shape} vs {ref_ids.shape}")

    pred_class = _segment_classes(pred_ids, pred.class_of_pixel)
    ref_class = {
        rid: THING_CHANNEL_OFFSET + ref.thing_class_of(rid) for rid in ref.present_ids()
    }
    pred_area = {
        int(i): int(c)
        for i, c in zip(*np.unique(pred_ids[pred_ids > 0], return_counts=True))
    }
    ref_area = {
        int(i): int(c)
        for i, c in zip(*np.unique(ref_ids[ref_ids > 0], return_counts=True))
    }

    candidates = []
    both = (pred_ids > 0) & (ref_ids > 0)
    if both.any():
        keys = pred_ids[both].astype(np.int64) * (1 << 32) + ref_ids[both].astype(np.int64)
        uniq, counts = np.unique(keys, return_counts=True)
        for key, inter in zip(uniq, counts):
            p, r = int(key >> 32), int(key & 0xFFFFFFFF)
            if pred_class[p] != ref_class[r]:
                continue
            iou = inter / (pred_area[p] + ref_area[r] - inter)
            candidates.append((float(iou), p, r))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    matches = InstanceMatches()
    matched_pred, matched_ref = set(), set()
    for iou, p, r in candidates:
        if iou < iou_min or p in matched_pred or r in matched_ref:
            continue
        matches.tp.append((p, r, iou))
        matched_pred.add(p)
        matched_ref.add(r)
    matches.fp = sorted(set(pred_area) - matched_pred)
    matches.fn = sorted(set(ref_area) - matched_ref)
    return matches


def panoptic_quality(matches: InstanceMatches):
    """(PQ, defined): sum of matched IoUs over |TP| + |FP|/2 + |FN|/2;
    (0.0, False) when nothing exists on either side."""
    denom = len(matches.tp) + 0.5 * (len(matches.fp) + len(matches.fn))
    if denom == 0:
        return 0.0, False
    return matches.iou_sum / denom, True


def instance_f1(matches: InstanceMatches):
    """(F1, defined): 2|TP| / (2|TP| + |FP| + |FN|)."""
    denom = 2 * len(matches.tp) + len(matches.fp) + len(matches.fn)
    if denom == 0:
        return 0.0, False
    return 2 * len(matches.tp) / denom, True


@dataclass
class MetricsReport:
    per_class_recall: list
    per_class_precision: list
    per_class_f1: list
    oa: float
    mf1_seg: float
    pq: float
    f1_inst: float
    tp: int
    fp: int
    fn: int
    n_images: int
    pq_defined: bool = True
    f1_inst_defined: bool = True

    def to_dict(self):
        return {
            "per_class_recall": self.per_class_recall,
            "per_class_precision": self.per_class_precision,
            "per_class_f1": self.per_class_f1,
            "oa": self.oa,
            "mf1_seg": self.mf1_seg,
            "pq": self.pq,
            "f1_inst": self.f1_inst,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_images": self.n_images,
            "pq_defined": self.pq_defined,
            "f1_inst_defined": self.f1_inst_defined,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class MetricsAccumulator:
    """Pools pixels and instance matches over many images, then reports."""

    def __init__(self, n_classes, iou_min=0.5):
        self.n_classes = n_classes
        self.iou_min = iou_min
        self.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.tp = 0
        self.fp = 0
        self.fn = 0
        self.iou_sum = 0.0
        self.n_images = 0

    def add(self, pred: PanopticMap, ref: InstanceLabelMap):
        ref_classes = class_index_from_labels(ref, self.n_classes)
        self.confusion += confusion_matrix(pred.class_of_pixel, ref_classes, self.n_classes)
        matches = match_instances(pred, ref, self.iou_min)
        self.tp += len(matches.tp)
        self.fp += len(matches.fp)
        self.fn += len(matches.fn)
        self.iou_sum += matches.iou_sum
        self.n_images += 1

    def report(self) -> MetricsReport:
        if self.n_images == 0:
            raise ValueError("no images accumulated")
        scores = semantic_scores(self.confusion)
        pq_denom = self.tp + 0.5 * (self.fp + self.fn)
        f1_denom = 2 * self.tp + self.fp + self.fn
        return MetricsReport(
            per_class_recall=scores["recall"],
            per_class_precision=scores["precision"],
            per_class_f1=scores["f1"],
            oa=scores["oa"],
            mf1_seg=scores["mf1"],
            pq=self.iou_sum / pq_denom if pq_denom else 0.0,
            f1_inst=2 * self.tp / f1_denom if f1_denom else 0.0,
            tp=self.tp,
            fp=self.fp,
            fn=self.fn,
            n_images=self.n_images,
            pq_defined=bool(pq_denom),
            f1_inst_defined=bool(f1_denom),
        )
