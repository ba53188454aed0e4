"""Two-stage training: pre-training with alpha=1, then fine-tuning with
alpha=0 plus cross-reconstruction between randomly paired shapes."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Dataset
from .geometry import PointCloud, adaptive_chamfer, chamfer, normalize_cloud, random_rotation
from .losses import LossWeights, alpha_schedule, loss_cross, loss_rec
from .model import CpaeModel, ModelConfig
from .tensor import Adam, NonFiniteError, Tensor, TrainingDivergedError, no_grad

__all__ = [
    "TrainConfig",
    "TrainingError",
    "TrainResult",
    "subsample",
    "pair_sampler",
    "train_stage1",
    "train_stage2",
    "train",
    "write_loss_log",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ["stage", "step", "L_ACD", "L_MSE", "L_CD", "L_EMD", "L_cross", "alpha", "total"]


@dataclass
class TrainConfig:
    """Everything that determines a training run. ``seed`` fixes init,
    subsampling, batching, pairing and augmentation."""

    preset: str = "desk"
    k: int = 256
    batch_size: int = 16
    stage1_steps: int = 1500
    stage2_steps: int = 1500
    eval_every: int = 50
    patience: int = 20
    learning_rate: float = 1e-4
    seed: int = 0
    alpha_mode: str = "step"
    emd: str = "auto"
    cross: bool = True
    cross_weight: float = 1.0
    rotation_sigma: float = 0.0
    rotation_so3: bool = False
    resample: bool = False
    mu1: float = 1e3
    mu2: float = 1e1
    mu3: float = 1.0
    val_pairs: int = 30
    latent_dim: int | None = None
    mapping_width: int | None = None
    sphere_points: int | None = None

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        overrides = {"seed": self.seed}
        if self.latent_dim is not None:
            overrides["latent_dim"] = self.latent_dim
        if self.sphere_points is not None:
            overrides["sphere_points"] = self.sphere_points
        cfg = ModelConfig.preset(self.preset, **overrides)
        if self.mapping_width is not None:
            cfg.mapping_widths = tuple(self.mapping_width for _ in cfg.mapping_widths)
        return cfg

    def weights(self, alpha: float) -> LossWeights:
        return LossWeights(self.mu1, self.mu2, self.mu3, alpha)


class TrainingError(RuntimeError):
    """Training diverged; ``model`` holds the last good parameters."""

    def __init__(self, message: str, model: CpaeModel, history: list[dict]):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class TrainResult:
    model: CpaeModel
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def subsample(cloud: PointCloud, k: int, seed) -> PointCloud:
    """Uniform sample of ``k`` points without replacement, annotations carried along."""
    n = len(cloud)
    if n < k:
        raise ValueError(f"cloud has {n} points, cannot sub-sample {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return cloud.take(rng.permutation(n)[:k])


def pair_sampler(n: int, seed) -> Iterator[tuple[int, int]]:
    """Endless stream of uniformly drawn (A, B) index pairs with A != B.

    A single-shape dataset pairs the shape with itself.
    """
    if n < 1:
        raise ValueError("pair sampler needs a non-empty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        a = int(rng.integers(n))
        yield a, partner(a, n, rng)


def partner(a: int, n: int, rng: np.random.Generator) -> int:
    """Uniformly drawn index different from ``a`` (``a`` itself when n == 1)."""
    return a if n == 1 else int((a + rng.integers(1, n)) % n)


class _Batches:
    """Shuffled minibatches of sub-sampled, normalised training clouds."""

    def __init__(self, clouds: list[PointCloud], cfg: TrainConfig, stream: int):
        self.clouds = [normalize_cloud(c)[0] for c in clouds]
        self.cfg = cfg
        self.sub_rng = _rng(cfg.seed, stream)
        self.order_rng = _rng(cfg.seed, stream + 1)
        self.rot_rng = _rng(cfg.seed, stream + 2)
        self.fixed = np.stack([self._sample(c) for c in self.clouds])
        self._queue: list[int] = []

    def _sample(self, cloud: PointCloud) -> np.ndarray:
        return subsample(cloud, self.cfg.k, self.sub_rng).points.astype(np.float32)

    def points(self, idx: list[int]) -> np.ndarray:
        if self.cfg.resample:
            batch = np.stack([self._sample(self.clouds[i]) for i in idx])
        else:
            batch = self.fixed[idx]
        if self.cfg.rotation_sigma > 0:
            batch = np.stack([
                random_rotation(PointCloud(p), self.cfg.rotation_sigma, self.rot_rng,
                                full_so3=self.cfg.rotation_so3).points.astype(np.float32)
                for p in batch
            ])
        return batch

    def next_indices(self) -> list[int]:
        n = len(self.clouds)
        size = min(self.cfg.batch_size, n)
        if len(self._queue) < size:
            self._queue.extend(self.order_rng.permutation(n).tolist())
        idx, self._queue = self._queue[:size], self._queue[size:]
        return idx


def _val_arrays(clouds: list[PointCloud], cfg: TrainConfig) -> np.ndarray | None:
    if not clouds:
        return None
    rng = _rng(cfg.seed, 90)
    return np.stack([subsample(normalize_cloud(c)[0], cfg.k, rng).points.astype(np.float32) for c in clouds])


def _val_pairs(n: int, cfg: TrainConfig) -> np.ndarray:
    """Ordered validation pairs; a lone validation shape is paired with itself."""
    if n == 1:
        return np.zeros((1, 2), dtype=np.int64)
    pairs = np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)
    if len(pairs) > cfg.val_pairs:
        pairs = pairs[_rng(cfg.seed, 91).choice(len(pairs), cfg.val_pairs, replace=False)]
    return pairs


def evaluate(model: CpaeModel, val: np.ndarray | None, pairs: np.ndarray) -> dict[str, float]:
    """Validation sphere adherence and cross-reconstruction Chamfer (inference mode)."""
    if val is None:
        return {}
    was_training = model.training
    model.eval()
    with no_grad():
        z = model.encode(val)
        u = model.canonical_map(val, z)
        out = {"sphere_adherence": float(np.abs(np.linalg.norm(u.data, axis=-1) - 1.0).mean())}
        self_rec = model.inverse_map(u, z)
        out["val_rec_chamfer"] = chamfer(self_rec, Tensor(val)).item()
        if len(pairs):
            za = Tensor(z.data[pairs[:, 1]])
            recon = model.inverse_map(Tensor(u.data[pairs[:, 0]]), za)
            out["val_cross_chamfer"] = chamfer(recon, Tensor(val[pairs[:, 1]])).item()
    model.train(was_training)
    return out


def _probe_loss(model: CpaeModel, probe: np.ndarray, cfg: TrainConfig, alpha: float) -> float:
    was_training = model.training
    model.eval()
    with no_grad():
        x = Tensor(probe)
        _, u, s = model.autoencode(x)
        total = adaptive_chamfer(u, model.sphere, alpha).item()
        total += loss_rec(x, s, cfg.weights(alpha), cfg.emd)[0].item()
    model.train(was_training)
    return total


def _step_stage1(model: CpaeModel, batch: np.ndarray, cfg: TrainConfig, alpha: float):
    x = Tensor(batch)
    _, u, s = model.autoencode(x)
    acd = adaptive_chamfer(u, model.sphere, alpha)
    rec, parts = loss_rec(x, s, cfg.weights(alpha), cfg.emd)
    total = acd + rec
    return total, {"L_ACD": acd.item(), "L_MSE": parts["mse"], "L_CD": parts["cd"], "L_EMD": parts["emd"],
                   "L_cross": 0.0}


def _step_stage2(model: CpaeModel, batch_a: np.ndarray, batch_b: np.ndarray, cfg: TrainConfig, alpha: float):
    xa, xb = Tensor(batch_a), Tensor(batch_b)
    za = model.encode(xa)
    ua = model.canonical_map(xa, za)
    acd = adaptive_chamfer(ua, model.sphere, alpha)
    rec, parts = loss_rec(xa, model.inverse_map(ua, za), cfg.weights(alpha), cfg.emd)
    total = acd + rec
    cross_value = 0.0
    if cfg.cross:
        zb = model.encode(xb)
        ub = model.canonical_map(xb, zb)
        cross = loss_cross(model.inverse_map(ua, zb), xb) + loss_cross(model.inverse_map(ub, za), xa)
        cross_value = cross.item()
        total = total + cross * cfg.cross_weight
    return total, {"L_ACD": acd.item(), "L_MSE": parts["mse"], "L_CD": parts["cd"], "L_EMD": parts["emd"],
                   "L_cross": cross_value}


def _split_clouds(dataset: Dataset) -> tuple[list[PointCloud], list[PointCloud]]:
    train = dataset.subset("train")
    if not train:
        raise ValueError("dataset has no training shapes")
    return train, dataset.subset("val")


def train_stage1(dataset: Dataset, cfg: TrainConfig, model: CpaeModel | None = None) -> TrainResult:
    """Pre-train on self-reconstruction with the primitive pulled onto the sphere."""
    train_clouds, val_clouds = _split_clouds(dataset)
    model = model or CpaeModel(cfg.model_config())
    model.train()
    batches = _Batches(train_clouds, cfg, stream=10)
    probe = batches.fixed[: min(cfg.batch_size, len(train_clouds))]
    val = _val_arrays(val_clouds, cfg)
    pairs = _val_pairs(0 if val is None else len(val), cfg)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    probe_init = _probe_loss(model, probe, cfg, alpha_schedule(1, 0, cfg.alpha_mode, cfg.stage1_steps))
    history: list[dict] = []
    good_state = model.state_dict()
    for step in range(cfg.stage1_steps):
        alpha = alpha_schedule(1, step, cfg.alpha_mode, cfg.stage1_steps)
        batch = batches.points(batches.next_indices())
        try:
            opt.zero_grad()
            total, parts = _step_stage1(model, batch, cfg, alpha)
            total.backward()
            opt.step()
        except (NonFiniteError, TrainingDivergedError) as exc:
            model.load_state_dict(good_state)
            raise TrainingError(f"stage 1 diverged at step {step}: {exc}", model, history) from exc
        history.append({"stage": 1, "step": step, **parts, "alpha": alpha, "total": total.item()})
        if (step + 1) % cfg.eval_every == 0:
            good_state = model.state_dict()
            log.info("stage1 step %d total %.5f adherence %.4f", step + 1, total.item(),
                     evaluate(model, val, pairs).get("sphere_adherence", float("nan")))
    metrics = {"probe_loss_init": probe_init,
               "probe_loss_final": _probe_loss(model, probe, cfg, alpha_schedule(1, cfg.stage1_steps, cfg.alpha_mode, cfg.stage1_steps))}
    metrics.update({f"stage1_{k}": v for k, v in evaluate(model, val, pairs).items()})
    model.trained = True
    return TrainResult(model.eval(), history, metrics)


def train_stage2(model: CpaeModel, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fine-tune with alpha=0 and cross-reconstruction; keep the parameters with
    the best validation cross Chamfer (self-reconstruction Chamfer when the
    cross term is off), stopping after ``patience`` evaluations without
    improvement."""
    train_clouds, val_clouds = _split_clouds(dataset)
    model.train()
    batches = _Batches(train_clouds, cfg, stream=20)
    val = _val_arrays(val_clouds, cfg)
    pairs = _val_pairs(0 if val is None else len(val), cfg)
    pair_rng = _rng(cfg.seed, 30)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    history: list[dict] = []
    key = "val_cross_chamfer" if cfg.cross else "val_rec_chamfer"
    start = evaluate(model, val, pairs)
    best_score = start.get(key, np.inf)
    best_state = model.state_dict()
    best_step = 0
    stale = 0
    for step in range(cfg.stage2_steps):
        alpha = alpha_schedule(2, step, cfg.alpha_mode, cfg.stage1_steps)
        idx_a = batches.next_indices()
        idx_b = [partner(a, len(train_clouds), pair_rng) for a in idx_a]
        try:
            opt.zero_grad()
            total, parts = _step_stage2(model, batches.points(idx_a), batches.points(idx_b), cfg, alpha)
            total.backward()
            opt.step()
        except (NonFiniteError, TrainingDivergedError) as exc:
            model.load_state_dict(best_state)
            raise TrainingError(f"stage 2 diverged at step {step}: {exc}", model, history) from exc
        history.append({"stage": 2, "step": step, **parts, "alpha": alpha, "total": total.item()})
        if (step + 1) % cfg.eval_every == 0:
            if val is None:
                best_state, best_step = model.state_dict(), step + 1
                continue
            score = evaluate(model, val, pairs)[key]
            if score < best_score:
                best_score, best_state, best_step, stale = score, model.state_dict(), step + 1, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("stage2 converged at step %d", step + 1)
                    break
    if val is None:
        best_state = model.state_dict()
    model.load_state_dict(best_state)
    model.trained = True
    model.eval()
    metrics = {"stage2_best_step": best_step, "stage2_steps_run": len(history)}
    metrics.update({f"stage2_start_{k}": v for k, v in start.items()})
    metrics.update({f"stage2_{k}": v for k, v in evaluate(model, val, pairs).items()})
    return TrainResult(model, history, metrics)


def train(dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Both stages back to back."""
    first = train_stage1(dataset, cfg)
    second = train_stage2(first.model, dataset, cfg)
    return TrainResult(second.model, first.history + second.history, {**first.metrics, **second.metrics})


def write_loss_log(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in LOG_COLUMNS})
