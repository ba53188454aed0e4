"""Keypoint PCK curves and part-label IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PckCurve", "IouReport", "EmptyEvaluationError", "pck", "iou", "mean_iou", "DEFAULT_THRESHOLDS"]

DEFAULT_THRESHOLDS = np.round(np.arange(0, 11) * 0.01, 2)


class EmptyEvaluationError(ValueError):
    """Nothing to evaluate (no shared keypoints across all pairs)."""


@dataclass
class PckCurve:
    thresholds: np.ndarray
    fraction: np.ndarray
    pair_count: int
    instance_count: int

    def at(self, t: float) -> float:
        hit = np.nonzero(np.isclose(self.thresholds, t))[0]
        if hit.size == 0:
            raise KeyError(f"threshold {t} not on the curve")
        return float(self.fraction[hit[0]])

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds.tolist(), "fraction": self.fraction.tolist(),
                "pair_count": self.pair_count, "instance_count": self.instance_count}


def pck(predicted, ground_truth, thresholds=DEFAULT_THRESHOLDS) -> PckCurve:
    """Fraction of keypoint instances within each distance threshold.

    ``predicted`` and ``ground_truth`` are sequences (one entry per shape pair)
    of ``{keypoint_id: xyz}`` mappings. Only ids present in both are scored;
    pairs with none in common are skipped. All instances are pooled.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError("need one ground-truth mapping per prediction")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be ascending")
    dists = []
    pairs = 0
    for pred, gt in zip(predicted, ground_truth):
        shared = sorted(set(pred) & set(gt))
        if not shared:
            continue
        pairs += 1
        for kid in shared:
            dists.append(float(np.linalg.norm(np.asarray(pred[kid], dtype=np.float64) - np.asarray(gt[kid], dtype=np.float64))))
    if not dists:
        raise EmptyEvaluationError("no keypoint ids shared by any prediction/ground-truth pair")
    d = np.asarray(dists)
    frac = (d[None, :] <= thresholds[:, None]).mean(axis=1)
    return PckCurve(thresholds, frac, pairs, len(d))


@dataclass
class IouReport:
    per_label: dict[int, float]
    mean: float
    pair_count: int = 1
    per_pair: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_label": {str(k): v for k, v in self.per_label.items()}, "mean": self.mean,
                "pair_count": self.pair_count}


def iou(predicted, ground_truth, strict: bool = False, vocabulary=None) -> IouReport:
    """Per-label intersection over union and their mean over labels in the ground truth.

    With ``strict``, labels predicted but absent from the ground truth count as
    IoU 0 in the mean. ``vocabulary`` (optional) lists the allowed labels.
    """
    pred = np.asarray(predicted)
    gt = np.asarray(ground_truth)
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in length: {pred.shape} vs {gt.shape}")
    if vocabulary is not None:
        vocab = set(int(v) for v in vocabulary)
        extra = (set(np.unique(pred).tolist()) | set(np.unique(gt).tolist())) - vocab
        if extra:
            raise ValueError(f"labels outside the vocabulary: {sorted(extra)}")
    labels = sorted(set(np.unique(gt).tolist()))
    if strict:
        labels = sorted(set(labels) | set(np.unique(pred).tolist()))
    per_label = {}
    for lab in labels:
        p, g = pred == lab, gt == lab
        union = np.logical_or(p, g).sum()
        per_label[int(lab)] = float(np.logical_and(p, g).sum() / union) if union else 1.0
    mean = float(np.mean(list(per_label.values()))) if per_label else 1.0
    return IouReport(per_label, mean, 1, [mean])


def mean_iou(reports: list[IouReport]) -> IouReport:
    """Average a list of per-pair reports (pairs weighted equally)."""
    if not reports:
        raise EmptyEvaluationError("no pairs to average")
    labels = sorted({k for r in reports for k in r.per_label})
    per_label = {lab: float(np.mean([r.per_label[lab] for r in reports if lab in r.per_label])) for lab in labels}
    means = [r.mean for r in reports]
    return IouReport(per_label, float(np.mean(means)), len(reports), means)
