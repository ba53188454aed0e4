"""Command-line entry point: ``cpae <subcommand> [flags]``.

Every subcommand writes its outputs under ``--out`` together with a
``manifest.json`` and prints a one-line JSON summary on stdout. Exit status is
0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import contextlib
import difflib
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, SynthSpec, load_cloud, load_dataset, make_splits, save_cloud, save_dataset, synth_generate
from .data import test_pairs as enumerate_pairs
from .geometry import PointCloud, normalize_cloud
from .infer import (
    DEFAULT_TAU,
    IdentityModel,
    confidence_heatmap,
    export_primitive,
    keypoint_transfer,
    label_transfer,
    transfer_set,
    write_correspondence_csv,
    write_heatmap_csv,
)
from .metrics import iou, mean_iou, pck
from .model import load_model, save_model
from .train import TrainConfig, TrainingError, train_stage1, train_stage2, write_loss_log

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["main", "run", "RunManifest", "load_config"]

log = logging.getLogger("cpae")

SPLIT_RATIOS = (0.6, 0.15, 0.25)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and suggests the closest known flag."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        if "unrecognized arguments" in message:
            known = self._known_flags()
            for token in message.split(":", 1)[1].split():
                flag = token.split("=")[0]
                close = difflib.get_close_matches(flag, known, n=1)
                if close:
                    message += f" (did you mean {close[0]}?)"
                    break
        raise UsageError(f"{self.prog}: {message}")

    def _known_flags(self) -> list[str]:
        flags = []
        for action in self._actions:
            flags += action.option_strings
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    flags += sub._known_flags()
        return sorted(set(flags))


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    version: str
    started: str
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)

    def write(self, directory: Path) -> Path:
        """Atomic write (temp file + rename) of ``manifest.json``."""
        directory.mkdir(parents=True, exist_ok=True)
        target = directory / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, target)
        return target


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).resolve().parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path: str | Path) -> dict:
    """Read a TOML key/value file; keys may sit at top level or under ``[train]``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    values = dict(raw.pop("train", {}))
    values.update({k: v for k, v in raw.items() if not isinstance(v, dict)})
    return values


# -- shared flags -----------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML key/value file mirroring the training config", default=None)
    p.add_argument("--out", help="output directory", default="out")
    p.add_argument("--seed", type=int, help="random seed", default=None)
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads", default=None)
    p.add_argument("--preset", choices=["desk", "full", "paper"], default=None,
                   help="model size; 'paper' is an alias of 'full' (default: desk)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="confidence threshold for existence")
    p.add_argument("--alpha-mode", choices=["step", "linear"], default=None,
                   help="reverse Chamfer weight schedule (default: step)")
    p.add_argument("--rotation-sigma", type=float, default=None, help="std. dev. (rad) of rotation augmentation")
    p.add_argument("--emd", choices=["exact", "auction", "chamfer-fallback"], default=None,
                   help="EMD solver for the reconstruction loss (default: exact when k <= 512, else auction)")
    p.add_argument("--confidence-mode", choices=["residual", "literal"], default="residual",
                   help="distance used for confidence")


def _model_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="trained model directory, or 'identity' for the exact stub")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="cpae", description="Canonical point autoencoder: train, infer, evaluate.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"cpae {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic superellipsoid dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--n", type=int, default=40, help="number of shapes")
    p.add_argument("--component-prob", type=float, default=0.5, help="probability of the optional side component")
    p.add_argument("--format", choices=["cpcd", "xyz"], default="cpcd", help="point-cloud file format")

    p = sub.add_parser("train", help="two-stage training", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: generate the synthetic set)")
    p.add_argument("--stage1-steps", type=int, default=None, help="pre-training steps")
    p.add_argument("--stage2-steps", type=int, default=None, help="maximum fine-tuning steps")

    p = sub.add_parser("infer", help="dense correspondences from a source to a target cloud", formatter_class=fmt)
    _common(p)
    _model_arg(p)
    p.add_argument("--source", required=True, help="source cloud (.xyz or .cpcd)")
    p.add_argument("--target", required=True, help="target cloud (.xyz or .cpcd)")

    for name, helptext in (("eval-keypoints", "keypoint transfer PCK"), ("eval-parts", "part-label transfer IoU")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        _common(p)
        _model_arg(p)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--split", default="test", help="split whose pairs are scored")
        p.add_argument("--pairs", choices=["split", "self"], default="split",
                       help="all ordered pairs of the split, or each shape with itself")
        if name == "eval-parts":
            p.add_argument("--strict", action="store_true", help="labels predicted but absent from the truth count as 0")

    p = sub.add_parser("heatmap", help="per-point confidence of each target against a source", formatter_class=fmt)
    _common(p)
    _model_arg(p)
    p.add_argument("--source", required=True, help="source cloud")
    p.add_argument("--targets", required=True, nargs="+", help="target clouds")

    p = sub.add_parser("export-primitive", help="write the canonical primitive of a cloud", formatter_class=fmt)
    _common(p)
    _model_arg(p)
    p.add_argument("--source", required=True, help="source cloud")
    p.add_argument("--format", choices=["cpcd", "xyz"], default="xyz", help="output format")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    _common(p)
    return parser


# -- helpers ------------------------------------------------------------------------
def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _load_model(spec: str):
    if spec == "identity":
        return IdentityModel()
    path = Path(spec)
    if (path / "model" / "model.json").exists():
        path = path / "model"
    if not (path / "model.json").exists():
        raise FileNotFoundError(f"no model found at {spec} (expected model.json)")
    return load_model(path)


def _read_cloud(path: str) -> PointCloud:
    if not Path(path).exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return load_cloud(path)


def _train_config(args) -> tuple[TrainConfig, dict]:
    values = load_config(args.config) if args.config else {}
    extra = {k: values.pop(k) for k in ("data", "n_shapes", "component_prob") if k in values}
    cfg = TrainConfig.from_dict(values)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.alpha_mode is not None:
        overrides["alpha_mode"] = args.alpha_mode
    if args.rotation_sigma is not None:
        overrides["rotation_sigma"] = args.rotation_sigma
    if args.emd is not None:
        overrides["emd"] = args.emd
    if args.stage1_steps is not None:
        overrides["stage1_steps"] = args.stage1_steps
    if args.stage2_steps is not None:
        overrides["stage2_steps"] = args.stage2_steps
    return replace(cfg, **overrides), extra


# -- subcommands ----------------------------------------------------------------------
def cmd_synth(args, out: Path, manifest: RunManifest) -> dict:
    seed = _seed(args)
    spec = SynthSpec(n_shapes=args.n, component_prob=args.component_prob, seed=seed)
    manifest.config.update({"synth": asdict(spec), "split_ratios": list(SPLIT_RATIOS)})
    manifest.write(out)
    ds = synth_generate(spec)
    ds.splits = make_splits(len(ds), SPLIT_RATIOS, seed=seed)
    written = save_dataset(ds, out, fmt=args.format, extra={"synth": asdict(spec)})
    manifest.outputs = [str(p.relative_to(out)) for p in written]
    return {"shapes": len(ds), "splits": {s: ds.splits.count(s) for s in ("train", "val", "test")}}


def cmd_train(args, out: Path, manifest: RunManifest) -> dict:
    cfg, extra = _train_config(args)
    data_dir = args.data or extra.get("data")
    if data_dir:
        ds = load_dataset(data_dir)
        source = {"data": str(data_dir)}
    else:
        spec = SynthSpec(n_shapes=int(extra.get("n_shapes", 40)), component_prob=float(extra.get("component_prob", 0.5)),
                         seed=cfg.seed)
        ds = synth_generate(spec)
        ds.splits = make_splits(len(ds), SPLIT_RATIOS, seed=cfg.seed)
        source = {"synth": asdict(spec)}
    manifest.config.update({"train": cfg.to_dict(), **source})
    manifest.seed = cfg.seed
    manifest.write(out)

    first = train_stage1(ds, cfg)
    save_model(first.model, out / "stage1")
    second = train_stage2(first.model, ds, cfg)
    save_model(second.model, out / "model")
    write_loss_log(first.history + second.history, out / "loss_log.csv")
    metrics = {**first.metrics, **second.metrics}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest.outputs = ["stage1/model.cpae", "stage1/model.json", "model/model.cpae", "model/model.json",
                        "loss_log.csv", "metrics.json"]
    return {"metrics": "metrics.json", "stage2_val_cross_chamfer": metrics.get("stage2_val_cross_chamfer")}


def cmd_infer(args, out: Path, manifest: RunManifest) -> dict:
    model = _load_model(args.model)
    src, _ = normalize_cloud(_read_cloud(args.source))
    tgt, tf = normalize_cloud(_read_cloud(args.target))
    manifest.write(out)
    m = transfer_set(src, tgt, model, args.tau, mode=args.confidence_mode)
    m.position = tf.inverse(m.position)  # report decoded positions in the target's own frame
    write_correspondence_csv(m, out / "correspondence.csv")
    manifest.outputs = ["correspondence.csv"]
    return {"points": len(m), "exists_fraction": float(m.exists.mean())}


def _eval_pairs(args, ds: Dataset, require: str) -> list[tuple[int, int]]:
    if args.pairs == "self":
        idx = ds.indices(args.split)
        return [(i, i) for i in idx]
    return enumerate_pairs(ds, args.split, require=require)


def cmd_eval_keypoints(args, out: Path, manifest: RunManifest) -> dict:
    model = _load_model(args.model)
    ds = load_dataset(args.data).normalized()
    manifest.write(out)
    preds, gts = [], []
    for a, b in _eval_pairs(args, ds, "keypoints"):
        moved = keypoint_transfer(ds.clouds[a].keypoints, ds.clouds[a], ds.clouds[b], model, args.tau,
                                  mode=args.confidence_mode)
        preds.append({kid: kp.position for kid, kp in moved.items()})
        gts.append(ds.clouds[b].keypoints)
    curve = pck(preds, gts)
    (out / "pck.json").write_text(json.dumps(curve.to_dict(), indent=2) + "\n")
    lines = ["threshold,pck"] + [f"{t!r},{f!r}" for t, f in zip(curve.thresholds.tolist(), curve.fraction.tolist())]
    (out / "pck.csv").write_text("\n".join(lines) + "\n")
    manifest.outputs = ["pck.json", "pck.csv"]
    return {"pairs": curve.pair_count, "pck_at_0.05": curve.at(0.05), "pck_at_0.1": curve.at(0.1)}


def cmd_eval_parts(args, out: Path, manifest: RunManifest) -> dict:
    model = _load_model(args.model)
    ds = load_dataset(args.data).normalized()
    manifest.write(out)
    reports, rows = [], ["source,target,iou"]
    for a, b in _eval_pairs(args, ds, "labels"):
        pred = label_transfer(ds.clouds[a].labels, ds.clouds[a], ds.clouds[b], model, mode=args.confidence_mode)
        r = iou(pred, ds.clouds[b].labels, strict=args.strict)
        reports.append(r)
        rows.append(f"{a},{b},{r.mean!r}")
    summary = mean_iou(reports)
    (out / "iou.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    (out / "iou.csv").write_text("\n".join(rows) + "\n")
    manifest.outputs = ["iou.json", "iou.csv"]
    return {"pairs": summary.pair_count, "iou_mean": summary.mean}


def cmd_heatmap(args, out: Path, manifest: RunManifest) -> dict:
    model = _load_model(args.model)
    src, _ = normalize_cloud(_read_cloud(args.source))
    raw_targets = [_read_cloud(t) for t in args.targets]
    targets = [normalize_cloud(t)[0] for t in raw_targets]
    manifest.write(out)
    maps = confidence_heatmap(src, targets, model, mode=args.confidence_mode)
    written = []
    for n, (path, raw, conf) in enumerate(zip(args.targets, raw_targets, maps)):
        name = f"heatmap_{n:03d}_{Path(path).stem}.csv"
        write_heatmap_csv(raw.points, conf, out / name)
        written.append(name)
    manifest.outputs = written
    return {"targets": len(maps), "mean_confidence": [float(c.mean()) for c in maps]}


def cmd_export_primitive(args, out: Path, manifest: RunManifest) -> dict:
    model = _load_model(args.model)
    src, _ = normalize_cloud(_read_cloud(args.source))
    manifest.write(out)
    prim = export_primitive(src, model)
    name = f"primitive.{args.format}"
    save_cloud(prim, out / name)
    adherence = float(np.abs(np.linalg.norm(prim.points, axis=1) - 1.0).mean())
    manifest.outputs = [name]
    return {"points": len(prim), "sphere_adherence": adherence}


def cmd_gradcheck(args, out: Path, manifest: RunManifest) -> dict:
    from .diagnostics import gradcheck_suite

    manifest.write(out)
    results = gradcheck_suite(_seed(args))
    for r in results:
        print(f"{r.name:32s} {r.kind:6s} {r.error:.3e} (< {r.tolerance:g}) {'ok' if r.ok else 'FAIL'}", file=sys.stderr)
    report = [{"name": r.name, "kind": r.kind, "error": r.error, "tolerance": r.tolerance, "ok": r.ok} for r in results]
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    manifest.outputs = ["gradcheck.json"]
    failed = [r.name for r in results if not r.ok]
    summary = {
        "max_layer_error": max(r.error for r in results if r.kind == "layer"),
        "max_kernel_error": max(r.error for r in results if r.kind == "kernel"),
        "failed": failed,
    }
    if failed:
        raise _CheckFailed(summary)
    return summary


class _CheckFailed(Exception):
    def __init__(self, summary: dict):
        super().__init__(f"gradient checks failed: {summary['failed']}")
        self.summary = summary


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval-keypoints": cmd_eval_keypoints,
    "eval-parts": cmd_eval_parts,
    "heatmap": cmd_heatmap,
    "export-primitive": cmd_export_primitive,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=float))


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("CPAE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("cpae: a subcommand is required (see --help)")
        if not 0.0 <= args.tau <= 1.0:
            raise UsageError("--tau must lie in [0, 1]")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        _emit({"status": "usage_error", "error": str(exc)})
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    out = Path(args.out)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    manifest = RunManifest(command=args.command, argv=argv, config={"args": flags}, seed=_seed(args),
                           version=_version_string(),
                           started=_now())
    try:
        with _thread_limit(args.threads):
            summary = COMMANDS[args.command](args, out, manifest)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        _emit({"status": "usage_error", "error": str(exc)})
        return 2
    except _CheckFailed as exc:
        _emit({"status": "failed", "command": args.command, **exc.summary})
        return 1
    except (OSError, ValueError, RuntimeError, KeyError, TrainingError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"cpae {args.command}: error: {exc}", file=sys.stderr)
        _emit({"status": "error", "command": args.command, "error": str(exc)})
        return 1
    manifest.finished = _now()
    manifest.outputs = sorted(set(manifest.outputs) | {"manifest.json"})
    manifest.write(out)
    _emit({"status": "ok", "command": args.command, "out": str(out), **summary})
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
