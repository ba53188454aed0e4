import json
import subprocess
import sys

import numpy as np
import pytest

from cpae.cli import RunManifest, load_config, run
from cpae.data import load_cloud, load_dataset

TINY_TOML = """
n_shapes = 8
[train]
k = 32
batch_size = 2
stage1_steps = 4
stage2_steps = 4
eval_every = 2
learning_rate = 1e-3
latent_dim = 8
mapping_width = 16
sphere_points = 64
val_pairs = 2
"""


def summary(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--n", "10", "--out", str(out), "--seed", "3"]) == 0
    return out


def test_synth_writes_dataset_and_manifest(synth_dir):
    ds = load_dataset(synth_dir)
    assert len(ds) == 10
    assert (ds.splits.count("train"), ds.splits.count("val"), ds.splits.count("test")) == (6, 2, 2)
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["finished"] is not None
    assert "dataset.json" in manifest["outputs"]
    assert set(RunManifest.__dataclass_fields__) == set(manifest)


def test_help_lists_defaults():
    proc = subprocess.run([sys.executable, "-m", "cpae", "train", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--stage1-steps" in proc.stdout and "default: 0.9" in proc.stdout


def test_misspelled_flag_is_usage_error(capsys):
    assert run(["train", "--stage1-step", "3"]) == 2
    captured = capsys.readouterr()
    assert "did you mean --stage1-steps?" in captured.err
    assert json.loads(captured.out)["status"] == "usage_error"


def test_missing_subcommand_and_bad_tau(capsys):
    assert run([]) == 2
    assert run(["synth", "--tau", "1.5"]) == 2


def test_missing_input_is_runtime_error(tmp_path, capsys):
    code = run(["infer", "--model", "identity", "--source", str(tmp_path / "nope.xyz"),
                "--target", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_identity_self_evaluation(synth_dir, tmp_path, capsys):
    assert run(["eval-keypoints", "--model", "identity", "--data", str(synth_dir), "--pairs", "self",
                "--out", str(tmp_path / "k")]) == 0
    assert summary(capsys)["pck_at_0.1"] == 1.0
    pck_csv = (tmp_path / "k" / "pck.csv").read_text().splitlines()
    assert pck_csv[0] == "threshold,pck" and len(pck_csv) == 12
    assert run(["eval-parts", "--model", "identity", "--data", str(synth_dir), "--pairs", "self",
                "--out", str(tmp_path / "p")]) == 0
    assert summary(capsys)["iou_mean"] == 1.0


def test_infer_heatmap_and_primitive(synth_dir, tmp_path, capsys):
    clouds = sorted((synth_dir / "shapes").glob("*.cpcd"))
    src, tgt = str(clouds[0]), str(clouds[1])
    assert run(["infer", "--model", "identity", "--source", src, "--target", tgt, "--out", str(tmp_path / "i")]) == 0
    rows = (tmp_path / "i" / "correspondence.csv").read_text().splitlines()
    assert len(rows) == len(load_cloud(src)) + 1
    assert run(["heatmap", "--model", "identity", "--source", src, "--targets", src, tgt,
                "--out", str(tmp_path / "h")]) == 0
    assert summary(capsys)["targets"] == 2
    assert (tmp_path / "h" / f"heatmap_001_{clouds[1].stem}.csv").exists()
    assert run(["export-primitive", "--model", "identity", "--source", src, "--out", str(tmp_path / "e")]) == 0
    assert len(load_cloud(tmp_path / "e" / "primitive.xyz")) == len(load_cloud(src))


def test_config_file(tmp_path):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    values = load_config(tmp_path / "c.toml")
    assert values["k"] == 32 and values["n_shapes"] == 8
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.toml")


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("stage9 = 1\n")
    assert run(["train", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o")]) == 1


def test_train_rerun_is_bit_identical(tmp_path, capsys):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train", "--config", str(tmp_path / "c.toml"), "--seed", "5", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("metrics.json", "loss_log.csv", "model/model.cpae"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["train"]["k"] == 32
    assert run(["eval-keypoints", "--model", str(outs[0]), "--data", str(tmp_path / "missing"),
                "--out", str(tmp_path / "e")]) == 1


def test_train_on_saved_dataset_then_evaluate(synth_dir, tmp_path, capsys):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    out = tmp_path / "t"
    assert run(["train", "--config", str(tmp_path / "c.toml"), "--data", str(synth_dir), "--out", str(out)]) == 0
    assert run(["eval-keypoints", "--model", str(out), "--data", str(synth_dir), "--out", str(tmp_path / "k")]) == 0
    result = summary(capsys)
    assert result["pairs"] == 2 and 0.0 <= result["pck_at_0.1"] <= 1.0


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report and all(r["ok"] for r in report)
    assert summary(capsys)["failed"] == []


def test_threads_flag(tmp_path, capsys):
    assert run(["synth", "--n", "4", "--threads", "1", "--out", str(tmp_path)]) == 0
    assert run(["synth", "--n", "4", "--threads", "0", "--out", str(tmp_path)]) == 2
    assert np.isfinite(load_cloud(next((tmp_path / "shapes").glob("*.cpcd"))).points).all()
