"""Correspondence inference through the canonical space.

A source point goes through the canonical mapping with the source latent,
then through the inverse mapping with the target latent, and snaps to its
nearest target point. Confidence is ``1 - D`` with D a normalised distance,
clamped to [0, 1].
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import NnIndex, PointCloud
from .tensor import Tensor, no_grad

__all__ = [
    "CorrespondenceMap",
    "UntrainedModelError",
    "IdentityModel",
    "transfer_point",
    "transfer_set",
    "keypoint_transfer",
    "label_transfer",
    "texture_transfer",
    "export_primitive",
    "confidence_heatmap",
    "write_correspondence_csv",
    "DEFAULT_TAU",
]

DEFAULT_TAU = 0.9
KEYPOINT_FAR = 0.1


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class CorrespondenceMap:
    target_index: np.ndarray  # (n,) int
    position: np.ndarray  # (n, 3) decoded target-space position
    confidence: np.ndarray  # (n,) in [0, 1]
    exists: np.ndarray  # (n,) bool, confidence >= tau

    def __len__(self) -> int:
        return len(self.target_index)

    def take(self, index) -> "CorrespondenceMap":
        return CorrespondenceMap(self.target_index[index], self.position[index], self.confidence[index], self.exists[index])


class IdentityModel:
    """Stand-in whose mappings are the identity; routes every point to itself.

    Transfers between a shape and itself are exact, which makes it a perfect
    model for self-pair evaluation plumbing.
    """

    trained = True
    latent_dim = 3

    def eval(self):
        return self

    def encode(self, points):
        pts = points.data if isinstance(points, Tensor) else np.asarray(points)
        return Tensor(pts.mean(axis=-2))

    def canonical_map(self, points, z):
        return Tensor(points.data if isinstance(points, Tensor) else np.asarray(points))

    def inverse_map(self, prim, z):
        return Tensor(prim.data if isinstance(prim, Tensor) else np.asarray(prim))


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x)


def _guard(model, allow_untrained: bool) -> None:
    if not allow_untrained and not getattr(model, "trained", False):
        raise UntrainedModelError("model has not been trained; pass allow_untrained=True to override")


def _codes(model, src: np.ndarray, tgt: np.ndarray):
    model.eval()
    with no_grad():
        za = model.encode(src.astype(np.float32))
        zb = model.encode(tgt.astype(np.float32))
    return za, zb


def _route(model, queries: np.ndarray, za: Tensor, zb: Tensor) -> np.ndarray:
    with no_grad():
        u = model.canonical_map(queries.astype(np.float32), za)
        return np.asarray(model.inverse_map(u, zb).data, dtype=np.float64)


def _confidence(decoded: np.ndarray, snapped: np.ndarray, queries: np.ndarray, radius: float, mode: str) -> np.ndarray:
    if mode == "residual":
        d = np.linalg.norm(decoded - snapped, axis=-1)
    elif mode == "literal":
        d = np.linalg.norm(queries - snapped, axis=-1)
    else:
        raise ValueError(f"unknown confidence mode {mode!r}")
    return 1.0 - np.clip(d / radius, 0.0, 1.0)


def transfer_set(source, target, model, tau: float = DEFAULT_TAU, queries=None, mode: str = "residual",
                 allow_untrained: bool = False) -> CorrespondenceMap:
    """Correspondences in ``target`` for every query (default: every source point).

    Latent codes are computed once per shape from the full clouds.
    """
    _guard(model, allow_untrained)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    src, tgt = _points(source), _points(target)
    if len(tgt) == 0:
        raise ValueError("target cloud is empty")
    q = src if queries is None else np.atleast_2d(np.asarray(queries, dtype=np.float64))
    za, zb = _codes(model, src, tgt)
    decoded = _route(model, q, za, zb)
    idx, _ = NnIndex(tgt).query(decoded)
    snapped = np.asarray(tgt, dtype=np.float64)[idx]
    radius = float(np.linalg.norm(tgt, axis=1).max()) or 1.0
    conf = _confidence(decoded, snapped, q, radius, mode)
    return CorrespondenceMap(idx, decoded, conf, conf >= tau)


def transfer_point(p_a, source, target, model, tau: float = DEFAULT_TAU, mode: str = "residual",
                   allow_untrained: bool = False) -> tuple[np.ndarray, int, float]:
    """Nearest target point, its index and the confidence for one query."""
    m = transfer_set(source, target, model, tau, queries=np.asarray(p_a)[None, :], mode=mode,
                     allow_untrained=allow_untrained)
    j = int(m.target_index[0])
    return _points(target)[j].copy(), j, float(m.confidence[0])


@dataclass
class TransferredKeypoint:
    position: np.ndarray
    target_index: int
    confidence: float
    far_from_source: bool


def keypoint_transfer(keypoints: dict[int, np.ndarray], source, target, model, tau: float = DEFAULT_TAU,
                      mode: str = "residual", allow_untrained: bool = False) -> dict[int, TransferredKeypoint]:
    """Route each keypoint forward into the target; ids are kept."""
    if not keypoints:
        return {}
    ids = sorted(keypoints)
    q = np.stack([np.asarray(keypoints[i], dtype=np.float64) for i in ids])
    src = _points(source)
    _, gap = NnIndex(src).query(q)
    if (gap > KEYPOINT_FAR).any():
        warnings.warn(f"{int((gap > KEYPOINT_FAR).sum())} keypoints lie more than {KEYPOINT_FAR} from the source cloud")
    m = transfer_set(source, target, model, tau, queries=q, mode=mode, allow_untrained=allow_untrained)
    tgt = _points(target)
    return {
        kid: TransferredKeypoint(tgt[m.target_index[n]].copy(), int(m.target_index[n]), float(m.confidence[n]),
                                 bool(gap[n] > KEYPOINT_FAR))
        for n, kid in enumerate(ids)
    }


def label_transfer(labels: np.ndarray, source, target, model, mode: str = "residual",
                   allow_untrained: bool = False) -> np.ndarray:
    """Label every target point with the label of its correspondent in the source."""
    back = transfer_set(target, source, model, 0.0, mode=mode, allow_untrained=allow_untrained)
    return np.asarray(labels)[back.target_index]


def texture_transfer(colors: np.ndarray, source, target, model, tau: float = DEFAULT_TAU, mode: str = "residual",
                     allow_untrained: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Colour target points from their source correspondents; the mask marks
    points whose correspondence confidence reaches ``tau``."""
    back = transfer_set(target, source, model, tau, mode=mode, allow_untrained=allow_untrained)
    return np.asarray(colors)[back.target_index], back.exists


def export_primitive(source, model, allow_untrained: bool = False) -> PointCloud:
    """The instance primitive as a cloud, index-aligned with the source's annotations.

    Keypoint rows are coloured by keypoint id so semantic parts can be compared
    on the sphere; other rows are grey.
    """
    _guard(model, allow_untrained)
    cloud = source if isinstance(source, PointCloud) else PointCloud(np.asarray(source))
    model.eval()
    with no_grad():
        z = model.encode(cloud.points.astype(np.float32))
        prim = np.asarray(model.canonical_map(cloud.points.astype(np.float32), z).data, dtype=np.float64)
    colors = np.full((len(cloud), 3), 0.6)
    if cloud.keypoints:
        idx, _ = NnIndex(cloud.points).query(np.stack(list(cloud.keypoints.values())))
        palette = _palette(len(idx))
        colors[idx] = palette
    return PointCloud(prim, labels=cloud.labels, colors=colors, corr_ids=cloud.corr_ids, name=cloud.name)


def _palette(n: int) -> np.ndarray:
    hues = np.arange(n) / max(n, 1)
    return np.stack([0.5 + 0.5 * np.cos(2 * np.pi * (hues + s)) for s in (0.0, 1 / 3, 2 / 3)], axis=1)


def confidence_heatmap(source, targets, model, mode: str = "residual", allow_untrained: bool = False) -> list[np.ndarray]:
    """Per target, the confidence that each of its points has a counterpart in the source."""
    return [transfer_set(t, source, model, 0.0, mode=mode, allow_untrained=allow_untrained).confidence
            for t in targets]


def write_correspondence_csv(m: CorrespondenceMap, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_idx", "tgt_idx", "x", "y", "z", "confidence", "exists"])
        for i in range(len(m)):
            w.writerow([i, int(m.target_index[i]), *(repr(float(v)) for v in m.position[i]),
                        repr(float(m.confidence[i])), int(m.exists[i])])


def write_heatmap_csv(points: np.ndarray, confidence: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "c"])
        for p, c in zip(np.asarray(points), confidence):
            w.writerow([*(repr(float(v)) for v in p), repr(float(c))])
