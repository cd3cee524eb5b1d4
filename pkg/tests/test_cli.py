import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import echo_command
from numpy.testing import assert_array_equal

from eggscan.cli import run_command, write_npz
from eggscan.manifest import read_manifest
from eggscan.preprocess import read_png, write_png

TINY = {"model": {"input_side": 8, "hidden_units": 6},
        "train": {"batch_size": 20, "max_epochs": 2, "learning_rate": 0.01},
        "augment": {"target_per_class": 20}}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> prepare -> augment -> train on a tiny configuration."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY))
    c = ["--config", str(config)]
    assert run_command(["synth", "--n", "10", "--seed", "3", "--out", str(root / "data")] + c) == 0
    assert run_command(["prepare", "--manifest", str(root / "data" / "manifest.jsonl"),
                        "--out", str(root / "prep")] + c) == 0
    assert run_command(["augment", "--manifest", str(root / "prep" / "train.jsonl"),
                        "--out", str(root / "aug")] + c) == 0
    assert run_command(["train", "--patches", str(root / "aug" / "patches.npz"),
                        "--out", str(root / "model")] + c) == 0
    return root


def test_synth_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run_command(["synth", "--n", "4", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for rel in ["manifest.jsonl", "images/img_0000.png", "images/img_0003.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["command"] == "synth" and run["config"]["seed"] == 7


def test_prepare_outputs(pipeline):
    train = read_manifest(pipeline / "prep" / "train.jsonl")
    test = read_manifest(pipeline / "prep" / "test.jsonl")
    assert len(train) + len(test) == 10 and len(test) >= 4
    lines = (pipeline / "prep" / "patch_labels.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert len(lines) == 10 and len(first["patches"]) == 560
    assert read_png(next((pipeline / "prep" / "preprocessed").iterdir())).ndim == 2


def test_augment_histogram(pipeline):
    with np.load(pipeline / "aug" / "patches.npz") as npz:
        labels = list(npz["labels"])
        assert npz["patches"].shape == (100, 100, 100)
    assert all(labels.count(c) == 20 for c in ["AL", "HD", "FB", "Tn", "BG"])


def test_train_outputs(pipeline):
    history = json.loads((pipeline / "model" / "history.json").read_text())
    assert len(history["epochs"]) == 2
    assert (pipeline / "model" / "model.bin").stat().st_size > 0


def test_detect(pipeline, capsys):
    image = read_manifest(pipeline / "prep" / "test.jsonl")[0].image_path
    out = pipeline / "detect"
    code = run_command(["detect", "--image", str(image), "--model", str(pipeline / "model"),
                        "--out", str(out), "--dump-map", "--threshold", "0.0"])
    assert code == 0
    det = json.loads((out / "detection.json").read_text())
    assert det["class"] in ["AL", "HD", "FB", "Tn"] and 0 <= det["x"] < 640 and 0 <= det["y"] < 480
    assert read_png(out / "overlay.png").shape == (480, 640, 3)
    assert (out / "probability_map.f32").stat().st_size == 480 * 640 * 5 * 4
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == det


@pytest.mark.parametrize("mode", ["patch", "whole-image"])
def test_evaluate(pipeline, capsys, mode):
    out = pipeline / f"eval_{mode}"
    code = run_command(["evaluate", "--manifest", str(pipeline / "prep" / "test.jsonl"), "--mode", mode,
                        "--model", str(pipeline / "model" / "model.json"), "--out", str(out)])
    assert code == 0
    stem = "report_" + mode.replace("-", "_")
    doc = json.loads((out / f"{stem}.json").read_text())
    text = (out / f"{stem}.txt").read_text()
    assert "Accuracy(%)" in capsys.readouterr().out
    if mode == "whole-image":
        assert doc["metrics"]["tnr"] is None and "−" in text
        assert doc["images"] == len(read_manifest(pipeline / "prep" / "test.jsonl"))
    else:
        assert doc["metrics"]["tnr"] is not None


def test_run_json_reproduces_training(pipeline, tmp_path):
    run = pipeline / "model" / "run.json"
    assert run_command(["train", "--config", str(run), "--patches", str(pipeline / "aug" / "patches.npz"),
                        "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.bin").read_bytes() == (pipeline / "model" / "model.bin").read_bytes()
    assert json.loads((tmp_path / "run.json").read_text())["config"] == json.loads(run.read_text())["config"]


def test_flags_override_config(pipeline, tmp_path):
    assert run_command(["train", "--config", str(pipeline / "model" / "run.json"), "--max-epochs", "1",
                        "--patches", str(pipeline / "aug" / "patches.npz"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "run.json").read_text())["config"]["train"]["max_epochs"] == 1
    assert len(json.loads((tmp_path / "history.json").read_text())["epochs"]) == 1


def test_external_backend_evaluate(pipeline):
    code = run_command(["evaluate", "--manifest", str(pipeline / "prep" / "test.jsonl"), "--mode", "patch",
                        "--backend", "cmd:" + echo_command(), "--out", str(pipeline / "eval_echo")])
    assert code == 0


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"train": {"epochs": 3}}')
        assert run_command(["synth", "--n", "1", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1
        assert "train.epochs" in capsys.readouterr().err

    def test_usage_error(self, tmp_path):
        assert run_command(["synth", "--n", "1"]) == 1
        assert run_command(["frobnicate"]) == 1

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{oops\n")
        assert run_command(["prepare", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path)]) == 1

    def test_reference_backend_needs_model(self, tmp_path):
        write_png(tmp_path / "x.png", np.zeros((120, 120), dtype=np.uint8))
        assert run_command(["detect", "--image", str(tmp_path / "x.png"), "--out", str(tmp_path)]) == 1

    @pytest.mark.parametrize("mode", ["json", "sum", "exit"])
    def test_malformed_backend(self, tmp_path, capsys, mode):
        write_png(tmp_path / "x.png", np.zeros((120, 120), dtype=np.uint8))
        code = run_command(["detect", "--image", str(tmp_path / "x.png"), "--out", str(tmp_path),
                            "--backend", "cmd:" + echo_command("--malformed", mode)])
        assert code == 2
        assert "backend error" in capsys.readouterr().err

    def test_missing_image(self, tmp_path):
        code = run_command(["detect", "--image", str(tmp_path / "nope.png"), "--out", str(tmp_path),
                            "--backend", "cmd:" + echo_command()])
        assert code == 3

    def test_missing_model_file(self, tmp_path):
        write_png(tmp_path / "x.png", np.zeros((120, 120), dtype=np.uint8))
        assert run_command(["detect", "--image", str(tmp_path / "x.png"), "--out", str(tmp_path),
                            "--model", str(tmp_path / "none.json")]) == 3


def test_npz_bytes_deterministic(tmp_path, rng):
    a = rng.integers(0, 256, (3, 4, 4)).astype(np.uint8)
    write_npz(tmp_path / "a.npz", patches=a, labels=np.array(["AL", "BG", "HD"]))
    write_npz(tmp_path / "b.npz", patches=a, labels=np.array(["AL", "BG", "HD"]))
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    with np.load(tmp_path / "a.npz") as npz:
        assert_array_equal(npz["patches"], a)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "eggscan", "version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("eggscan ")
