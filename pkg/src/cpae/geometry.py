"""Point-cloud preprocessing, canonical sphere sampling, nearest-neighbour
index, and differentiable distance kernels between point sets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .tensor import Tensor, make_op

__all__ = [
    "PointCloud",
    "NormalizeTransform",
    "DegenerateCloudError",
    "ApproximationError",
    "normalize_cloud",
    "sample_sphere",
    "NnIndex",
    "nearest",
    "chamfer",
    "adaptive_chamfer",
    "emd_exact",
    "emd_approx",
    "emd",
    "rotation_matrix",
    "random_rotation",
    "EMD_EXACT_LIMIT",
    "AUCTION_EPSILONS",
]

EMD_EXACT_LIMIT = 512
AUCTION_EPSILONS = (0.1, 0.03, 0.01, 3e-3, 1e-3)


class DegenerateCloudError(ValueError):
    """The cloud has no spatial extent."""


class ApproximationError(RuntimeError):
    """The auction solver did not converge within its iteration cap."""


@dataclass
class PointCloud:
    """k ordered points plus optional per-point annotations.

    ``corr_ids`` carries ground-truth dense correspondence ids (points with the
    same id on two instances correspond); it is only known for synthetic data.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    colors: np.ndarray | None = None
    keypoints: dict[int, np.ndarray] = field(default_factory=dict)
    corr_ids: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype not in (np.float32, np.float64):
            pts = pts.astype(np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (k, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        self.points = pts
        k = pts.shape[0]
        for attr in ("labels", "colors", "corr_ids"):
            value = getattr(self, attr)
            if value is not None:
                value = np.asarray(value)
                if value.shape[0] != k:
                    raise ValueError(f"{attr} has {value.shape[0]} rows for {k} points")
                setattr(self, attr, value)
        self.keypoints = {int(kid): np.asarray(pos, dtype=np.float64) for kid, pos in self.keypoints.items()}

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, index: np.ndarray) -> "PointCloud":
        """Subset of rows with annotations carried along (keypoints unchanged)."""
        index = np.asarray(index)
        return replace(
            self,
            points=self.points[index],
            labels=None if self.labels is None else self.labels[index],
            colors=None if self.colors is None else self.colors[index],
            corr_ids=None if self.corr_ids is None else self.corr_ids[index],
            keypoints=dict(self.keypoints),
        )

    def with_points(self, points: np.ndarray, keypoints: dict[int, np.ndarray] | None = None) -> "PointCloud":
        return replace(self, points=points, keypoints=self.keypoints if keypoints is None else keypoints)


@dataclass(frozen=True)
class NormalizeTransform:
    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) / self.scale

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.center


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Centre on the centroid and scale the farthest point to radius 1."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    center = pts.mean(axis=0)
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    if radius <= 1e-12 * max(1.0, float(np.abs(center).max())):
        raise DegenerateCloudError("all points coincide; cannot normalise")
    tf = NormalizeTransform(center=center, scale=radius)
    kps = {kid: tf.apply(pos) for kid, pos in cloud.keypoints.items()}
    out = cloud.with_points(tf.apply(pts).astype(cloud.points.dtype), kps)
    return out, tf


def sample_sphere(m: int, seed: int | None = None) -> np.ndarray:
    """Fibonacci lattice of ``m`` unit vectors, optionally rotated by a seeded random rotation."""
    if m < 4:
        raise ValueError(f"sphere sample needs at least 4 points, got {m}")
    i = np.arange(m, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / m
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    theta = golden * i
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if seed is not None:
        pts = pts @ _random_so3(np.random.default_rng(seed)).T
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


class NnIndex:
    """k-d tree over a fixed point set; exact nearest neighbour, ties to the lowest index."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("NnIndex needs a non-empty (n, d) point set")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.int64), dist
        best_d, best_i = dist[:, 0].copy(), idx[:, 0].astype(np.int64)
        for row in np.nonzero(dist[:, 1] <= dist[:, 0])[0]:
            cand = np.array(self._tree.query_ball_point(q[row], best_d[row] * (1 + 1e-9) + 1e-300), dtype=np.int64)
            d = np.sqrt(((self.points[cand] - q[row]) ** 2).sum(axis=1))
            tied = cand[d == d.min()]
            best_i[row] = tied.min()
            best_d[row] = d.min()
        return best_i, best_d


def _sq_dist(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return (q * q).sum(-1)[..., :, None] + (p * p).sum(-1)[..., None, :] - 2.0 * (q @ np.swapaxes(p, -1, -2))


def _exact_sq(q: np.ndarray, p: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = q - np.take_along_axis(p, idx[..., None], axis=-2)
    return (diff * diff).sum(-1)


def nearest(queries: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force nearest neighbour over the last two axes; lowest index wins ties.

    Returns (index, squared distance recomputed exactly from the chosen pair).
    """
    q = np.asarray(queries)
    p = np.asarray(points)
    idx = np.argmin(_sq_dist(q, p), axis=-1)
    return idx, _exact_sq(q, p, idx)


def nearest_both(a: np.ndarray, b: np.ndarray):
    """``nearest(a, b)`` and ``nearest(b, a)`` from a single distance matrix."""
    sq = _sq_dist(a, b)
    ia = np.argmin(sq, axis=-1)
    ib = np.argmin(sq, axis=-2)
    return (ia, _exact_sq(a, b, ia)), (ib, _exact_sq(b, a, ib))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _directed(a: np.ndarray, b: np.ndarray, squared: bool, found=None):
    """Mean over a of distance to nearest b, with d/da and scatter map into b."""
    idx, sq = nearest(a, b) if found is None else found
    diff = a - np.take_along_axis(b, idx[..., None], axis=-2)
    n = a.shape[-2]
    if squared:
        dist = sq
        coef = 2.0 * np.ones_like(sq)
    else:
        dist = np.sqrt(sq)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
    ga = diff * (coef / n)[..., None]
    return dist.mean(axis=-1), ga, idx


def _scatter_neg(ga: np.ndarray, idx: np.ndarray, like: np.ndarray) -> np.ndarray:
    gb = np.zeros_like(like, dtype=ga.dtype)
    if ga.ndim == 2:
        np.add.at(gb, idx, -ga)
    else:
        for i in range(ga.shape[0]):
            np.add.at(gb[i], idx[i], -ga[i])
    return gb


def _batch_mean(values: np.ndarray):
    """Per-pair values -> scalar mean and the gradient weight each pair gets."""
    if values.ndim == 0:
        return values, 1.0
    return values.mean(), 1.0 / values.shape[0]


def chamfer(a, b, squared: bool = False) -> Tensor:
    """Symmetric Chamfer distance with unsquared L2 terms by default.

    Inputs are (n, 3) / (m, 3) or batched (B, n, 3) / (B, m, 3); batched input
    returns the mean over pairs. Gradients flow to both sets.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer needs non-empty point sets")
    near_ab, near_ba = nearest_both(a.data, b.data)
    ab, ga1, ia = _directed(a.data, b.data, squared, near_ab)
    ba, gb2, ib = _directed(b.data, a.data, squared, near_ba)
    value, w = _batch_mean(ab + ba)

    def backward(g):
        scale = g * w
        grad_a = (ga1 + _scatter_neg(gb2, ib, a.data)) * scale
        grad_b = (gb2 + _scatter_neg(ga1, ia, b.data)) * scale
        return grad_a, grad_b

    return make_op(np.asarray(value, dtype=a.dtype), (a, b), backward)


def adaptive_chamfer(u_inst, u_ref, alpha: float, squared: bool = False) -> Tensor:
    """Forward Chamfer term from the instance primitive to the reference sphere
    plus ``alpha`` times the reverse term. The reference gets no gradient."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    u = _as_tensor(u_inst)
    ref = np.asarray(u_ref.data if isinstance(u_ref, Tensor) else u_ref, dtype=u.dtype)
    if u.ndim == 3 and ref.ndim == 2:
        ref = np.broadcast_to(ref, (u.shape[0], *ref.shape))
    if alpha > 0:
        near_fwd, near_rev = nearest_both(u.data, ref)
    else:
        near_fwd, near_rev = nearest(u.data, ref), None
    fwd, g_fwd, _ = _directed(u.data, ref, squared, near_fwd)
    total = fwd
    g_rev = None
    if alpha > 0:
        rev, g_r, i_r = _directed(ref, u.data, squared, near_rev)
        total = fwd + alpha * rev
        g_rev = _scatter_neg(g_r, i_r, u.data) * alpha
    value, w = _batch_mean(total)

    def backward(g):
        grad = g_fwd if g_rev is None else g_fwd + g_rev
        return (grad * (g * w),)

    return make_op(np.asarray(value, dtype=u.dtype), (u,), backward)


def _matched_cost(a: Tensor, b: Tensor, perm: np.ndarray) -> Tensor:
    """Mean L2 distance between a[i] and b[perm[i]], differentiable in both."""
    diff = a.data - b.data[perm]
    dist = np.sqrt((diff * diff).sum(-1))
    n = len(perm)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)

    def backward(g):
        ga = unit * (g / n)
        gb = np.zeros_like(b.data)
        gb[perm] = -ga
        return ga, gb

    return make_op(np.asarray(dist.mean(), dtype=a.dtype), (a, b), backward)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"EMD needs two (n, 3) sets of equal size, got {a.shape} and {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("EMD needs non-empty point sets")


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(np.maximum(_sq_dist(a, b), 0.0))


def emd_exact(a, b, limit: int = EMD_EXACT_LIMIT) -> tuple[Tensor, np.ndarray]:
    """Minimum mean matched L2 distance over bijections (Hungarian solve).

    Returns the differentiable cost and the optimal matching ``perm`` where
    a[i] is matched to b[perm[i]].
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    if a.shape[0] > limit:
        raise ValueError(f"exact EMD limited to n <= {limit}, got {a.shape[0]}")
    rows, cols = linear_sum_assignment(_cost_matrix(a.data, b.data))
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return _matched_cost(a, b, perm), perm


def auction_assignment(cost: np.ndarray, epsilons=AUCTION_EPSILONS, max_rounds: int | None = None) -> np.ndarray:
    """Forward auction with epsilon scaling for a square min-cost assignment.

    Bids are processed Jacobi style: every unassigned row bids at once and
    each column goes to its highest bidder (lowest row index on ties). The
    final assignment's total cost is within ``n * epsilons[-1]`` of optimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    benefit = -cost
    prices = np.zeros(n)
    cap = max_rounds if max_rounds is not None else 200 * n + 10_000
    rounds = 0
    row_of_col = np.full(n, -1, dtype=np.int64)
    col_of_row = np.full(n, -1, dtype=np.int64)
    for eps in epsilons:
        row_of_col[:] = -1
        col_of_row[:] = -1
        free = np.arange(n)
        while free.size:
            rounds += 1
            if rounds > cap:
                raise ApproximationError(f"auction did not converge within {cap} rounds")
            values = benefit[free] - prices
            top2 = np.argpartition(-values, 1, axis=1)[:, :2]
            v_top = np.take_along_axis(values, top2, axis=1)
            order = np.argsort(-v_top, axis=1, kind="stable")
            best = np.take_along_axis(top2, order[:, :1], axis=1)[:, 0]
            v1 = np.take_along_axis(v_top, order[:, :1], axis=1)[:, 0]
            v2 = np.take_along_axis(v_top, order[:, 1:], axis=1)[:, 0]
            bids = prices[best] + (v1 - v2) + eps
            # highest bid per column; ties to the lowest bidding row
            sel = np.lexsort((free, -bids, best))
            first = np.ones(len(sel), dtype=bool)
            first[1:] = best[sel][1:] != best[sel][:-1]
            winners = sel[first]
            cols = best[winners]
            rows = free[winners]
            evicted = row_of_col[cols]
            evicted = evicted[evicted >= 0]
            col_of_row[evicted] = -1
            row_of_col[cols] = rows
            col_of_row[rows] = cols
            prices[cols] = bids[winners]
            free = np.nonzero(col_of_row < 0)[0]
    return col_of_row


def emd_approx(a, b, epsilons=AUCTION_EPSILONS, max_rounds: int | None = None) -> Tensor:
    """Auction-based EMD: a one-to-one matching within ``epsilons[-1]`` per
    point (``k * epsilons[-1]`` in total cost) of the optimum. Gradient is the
    matched-pair unit difference vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    perm = auction_assignment(_cost_matrix(a.data, b.data), epsilons, max_rounds)
    return _matched_cost(a, b, perm)


def emd(a, b, method: str = "exact", limit: int = EMD_EXACT_LIMIT) -> Tensor:
    """EMD for single or batched pairs; batched input averages over pairs.

    ``method`` is "exact", "auction", or "auto" (exact up to ``limit`` points).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2:
        return _emd_single(a, b, method, limit)
    if a.shape != b.shape:
        raise ValueError(f"EMD needs equal shapes, got {a.shape} and {b.shape}")
    perms = [_solve_perm(a.data[i], b.data[i], method, limit) for i in range(a.shape[0])]
    diff = a.data - np.stack([b.data[i][p] for i, p in enumerate(perms)])
    dist = np.sqrt((diff * diff).sum(-1))
    bsz, n = dist.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(dist[..., None] > 0, diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0)

    def backward(g):
        ga = unit * (g / (n * bsz))
        gb = np.zeros_like(b.data)
        for i, p in enumerate(perms):
            gb[i, p] = -ga[i]
        return ga, gb

    return make_op(np.asarray(dist.mean(), dtype=a.dtype), (a, b), backward)


def _solve_perm(a: np.ndarray, b: np.ndarray, method: str, limit: int) -> np.ndarray:
    if method == "auto":
        method = "exact" if len(a) <= limit else "auction"
    cost = _cost_matrix(a, b)
    if method == "exact":
        rows, cols = linear_sum_assignment(cost)
        perm = np.empty(len(rows), dtype=np.int64)
        perm[rows] = cols
        return perm
    if method == "auction":
        return auction_assignment(cost)
    raise ValueError(f"unknown EMD method {method!r}")


def _emd_single(a: Tensor, b: Tensor, method: str, limit: int) -> Tensor:
    _check_pair(a, b)
    return _matched_cost(a, b, _solve_perm(a.data, b.data, method, limit))


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _random_so3(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rotation(cloud: PointCloud, sigma: float, seed, up_axis: int = 2, full_so3: bool = False) -> PointCloud:
    """Rotate about the origin by an angle drawn from N(0, sigma^2).

    The axis is the up axis by default; ``full_so3`` draws a uniformly random
    axis instead. Keypoints rotate with the cloud.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angle = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    if full_so3:
        axis = rng.standard_normal(3)
    else:
        axis = np.eye(3)[up_axis]
    rot = rotation_matrix(axis, angle)
    pts = (np.asarray(cloud.points, dtype=np.float64) @ rot.T).astype(cloud.points.dtype)
    kps = {kid: rot @ pos for kid, pos in cloud.keypoints.items()}
    return cloud.with_points(pts, kps)
