"""Desk-scale end-to-end experiment on the synthetic superellipsoid family.

Trains the two-stage model, a variant fine-tuned without cross
reconstruction, and a rotation-augmented variant, then scores held-out pairs
on dense correspondence, keypoint PCK, part IoU and confidence behaviour.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import BODY, COMPONENT, Dataset, SynthSpec, make_splits, synth_generate, test_pairs
from .geometry import PointCloud, normalize_cloud, random_rotation
from .infer import keypoint_transfer, label_transfer, transfer_set
from .metrics import EmptyEvaluationError, iou, mean_iou, pck
from .train import TrainConfig, train, train_stage1, train_stage2

__all__ = ["DeskConfig", "DeskResult", "desk_train_config", "prepare_dataset", "evaluate_model", "run_desk_experiment",
           "metrics_json"]

log = logging.getLogger(__name__)


def desk_train_config() -> TrainConfig:
    """Training schedule sized for a single desktop CPU.

    The cross-reconstruction Chamfer gets the same weight as the
    self-reconstruction Chamfer term.
    """
    cfg = TrainConfig(learning_rate=1e-3, stage1_steps=4000, stage2_steps=1500)
    cfg.cross_weight = cfg.mu2
    return cfg


@dataclass
class DeskConfig:
    n_shapes: int = 40
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.6, 0.15, 0.25)
    train: TrainConfig = field(default_factory=desk_train_config)
    rotation_sigma: float = 0.5
    baseline_draws: int = 20
    run_ablation: bool = True
    run_rotation: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def prepare_dataset(cfg: DeskConfig) -> Dataset:
    ds = synth_generate(SynthSpec(n_shapes=cfg.n_shapes, seed=cfg.seed))
    ds.splits = make_splits(len(ds), cfg.split_ratios, seed=cfg.seed)
    return ds


def _eval_clouds(ds: Dataset, sigma: float, seed: int) -> dict[int, PointCloud]:
    """Normalised held-out clouds, each rotated once when ``sigma`` > 0."""
    rng = np.random.default_rng([seed, 70])
    out = {}
    for i in ds.indices("test"):
        cloud = normalize_cloud(ds.clouds[i])[0]
        if sigma > 0:
            cloud = random_rotation(cloud, sigma, rng)
        out[i] = cloud
    return out


def evaluate_model(model, ds: Dataset, sigma: float = 0.0, seed: int = 0, baseline_draws: int = 20) -> dict:
    clouds = _eval_clouds(ds, sigma, seed)
    rng = np.random.default_rng([seed, 71])

    # dense correspondence over all ordered test pairs
    errors, baseline = [], []
    for a, b in test_pairs(ds, require=None):
        src, tgt = clouds[a], clouds[b]
        pos_of = {int(g): j for j, g in enumerate(tgt.corr_ids)}
        rows = np.array([i for i, g in enumerate(src.corr_ids) if int(g) in pos_of])
        truth = tgt.points[[pos_of[int(src.corr_ids[i])] for i in rows]].astype(np.float64)
        m = transfer_set(src, tgt, model, queries=src.points[rows])
        pred = tgt.points[m.target_index].astype(np.float64)
        errors.append(np.linalg.norm(pred - truth, axis=1))
        guess = tgt.points[rng.integers(len(tgt), size=(baseline_draws, len(rows)))].astype(np.float64)
        baseline.append(np.linalg.norm(guess - truth[None], axis=-1).mean(axis=0))
    err = np.concatenate(errors)

    # keypoints
    preds, gts = [], []
    for a, b in test_pairs(ds, require="keypoints"):
        moved = keypoint_transfer(clouds[a].keypoints, clouds[a], clouds[b], model)
        preds.append({kid: kp.position for kid, kp in moved.items()})
        gts.append(clouds[b].keypoints)
    curve = pck(preds, gts)

    # part labels, pairs with the same label vocabulary
    reports = []
    for a, b in test_pairs(ds, require="labels"):
        pred_labels = label_transfer(clouds[a].labels, clouds[a], clouds[b], model)
        reports.append(iou(pred_labels, clouds[b].labels))
    parts = mean_iou(reports)

    # confidence: source without the optional component, target with it
    conf_pairs = []
    for a, b in test_pairs(ds, require=None):
        if COMPONENT in clouds[a].labels or COMPONENT not in clouds[b].labels:
            continue
        c = transfer_set(clouds[b], clouds[a], model, 0.0).confidence
        lab = clouds[b].labels
        conf_pairs.append((float(c[lab == COMPONENT].mean()), float(c[lab == BODY].mean())))
    conf = np.array(conf_pairs) if conf_pairs else np.zeros((0, 2))

    return {
        "dense_error_mean": float(err.mean()),
        "dense_error_median": float(np.median(err)),
        "random_baseline_mean": float(np.concatenate(baseline).mean()),
        "pck": curve.to_dict(),
        "pck_at_0.05": curve.at(0.05),
        "pck_at_0.1": curve.at(0.1),
        "iou_mean": parts.mean,
        "iou_per_label": {str(k): v for k, v in parts.per_label.items()},
        "iou_pairs": parts.pair_count,
        "confidence_pairs": int(len(conf)),
        "confidence_component_mean": float(conf[:, 0].mean()) if len(conf) else float("nan"),
        "confidence_body_mean": float(conf[:, 1].mean()) if len(conf) else float("nan"),
        "confidence_lower_fraction": float((conf[:, 0] < conf[:, 1]).mean()) if len(conf) else float("nan"),
    }


@dataclass
class DeskResult:
    metrics: dict  # JSON-ready; depends only on (config, seed)
    timings: dict  # wall-clock seconds per variant, kept out of ``metrics``
    models: dict = field(default_factory=dict)
    dataset: Dataset | None = None


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


def _final_loss(history: list[dict]) -> float:
    return float(history[-1]["total"]) if history else float("nan")


def run_desk_experiment(cfg: DeskConfig | None = None) -> DeskResult:
    """Train and evaluate every variant."""
    cfg = cfg or DeskConfig()
    ds = prepare_dataset(cfg)
    tcfg = replace(cfg.train, seed=cfg.seed)
    out: dict = {"config": cfg.to_dict()}
    timings: dict = {}
    models: dict = {}

    t0 = time.perf_counter()
    stage1 = train_stage1(ds, tcfg)
    stage1_state = stage1.model.state_dict()
    models["stage1"] = _copy(stage1.model)
    main = train_stage2(stage1.model, ds, tcfg)
    timings["main"] = time.perf_counter() - t0
    models["main"] = main.model
    out["train"] = {**stage1.metrics, **main.metrics, "final_loss": _final_loss(main.history)}
    out["aligned"] = evaluate_model(main.model, ds, 0.0, cfg.seed, cfg.baseline_draws)
    out["aligned_on_rotated"] = evaluate_model(main.model, ds, cfg.rotation_sigma, cfg.seed, cfg.baseline_draws)
    log.info("main model done in %.0fs", timings["main"])

    if cfg.run_ablation:
        t0 = time.perf_counter()
        base = _copy(stage1.model, stage1_state)
        no_cross = train_stage2(base, ds, replace(tcfg, cross=False))
        timings["no_cross"] = time.perf_counter() - t0
        models["no_cross"] = no_cross.model
        out["no_cross"] = evaluate_model(no_cross.model, ds, 0.0, cfg.seed, cfg.baseline_draws)
        out["no_cross_train"] = no_cross.metrics
        log.info("ablation done in %.0fs", timings["no_cross"])

    if cfg.run_rotation:
        t0 = time.perf_counter()
        rotated = train(ds, replace(tcfg, rotation_sigma=cfg.rotation_sigma))
        timings["rotation"] = time.perf_counter() - t0
        models["rotation"] = rotated.model
        out["rotation_trained"] = evaluate_model(rotated.model, ds, cfg.rotation_sigma, cfg.seed, cfg.baseline_draws)
        out["rotation_train"] = {**rotated.metrics, "final_loss": _final_loss(rotated.history)}
        log.info("rotation variant done in %.0fs", timings["rotation"])

    return DeskResult(out, timings, models, ds)


def _copy(model, state: dict | None = None):
    twin = type(model)(model.config)
    twin.load_state_dict(model.state_dict() if state is None else state)
    twin.trained = model.trained
    return twin.eval()
