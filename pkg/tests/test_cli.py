import json

import pytest

from modlens.cli import main

NET = {"base_width": 4, "depth": 2}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--samples", "12", "--seed", "7", "--height", "16",
                 "--width", "16"]) == 0
    return out


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps({"net": NET, "train": {"batch_size": 4, "crop": 16}, "epochs": 2}))
    return str(path)


def test_synth_arity_and_determinism(synth_dir, tmp_path):
    files = sorted(p.name for p in synth_dir.iterdir())
    assert len(files) == 12 * 3 + 1 and "manifest.json" in files
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--samples", "12", "--seed", "7", "--height", "16",
                 "--width", "16"]) == 0
    for name in files:
        assert (synth_dir / name).read_bytes() == (again / name).read_bytes()


def test_synth_bad_group(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"informative_groups": {"Landsat-8": 0.5}}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "Landsat-8" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_train_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--mode", "plain"]) == 2


def test_ablation_pair_eval_and_flags(synth_dir, run_config, tmp_path):
    for mode in ("plain", "framework"):
        out = tmp_path / mode
        assert main(["train", "--config", run_config, "--data", str(synth_dir), "--out", str(out),
                     "--mode", mode, "--seed", "1"]) == 0
        assert (out / "checkpoint.pt").is_file() and (out / "history.csv").is_file()
        eff = json.loads((out / "effective_config.json").read_text())
        assert eff["train"]["occlusion_value"] == 0.0 and eff["train"]["seed"] == 1
        assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--data", str(synth_dir)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics["val"]) == {"iou", "accuracy", "f1", "confusion"}
    plain = json.loads((tmp_path / "plain/metrics.json").read_text())
    frame = json.loads((tmp_path / "framework/metrics.json").read_text())
    assert plain.keys() == frame.keys()

    assert main(["analyze", "--checkpoint", str(tmp_path / "plain/checkpoint.pt"), "--data", str(synth_dir),
                 "--out", str(tmp_path / "an")]) == 2
    assert main(["analyze", "--checkpoint", str(tmp_path / "framework/checkpoint.pt"), "--data", str(synth_dir),
                 "--out", str(tmp_path / "an")]) == 0
    first = (tmp_path / "an/kde.csv").read_bytes()
    assert main(["analyze", "--checkpoint", str(tmp_path / "framework/checkpoint.pt"), "--data", str(synth_dir),
                 "--out", str(tmp_path / "an")]) == 0
    assert (tmp_path / "an/kde.csv").read_bytes() == first


def test_eval_values_match_library(synth_dir, run_config, tmp_path):
    from modlens.rasterdata import DatasetManifest
    from modlens.segnet import load_checkpoint
    from modlens.trainer import TrainConfig, evaluate

    out = tmp_path / "m"
    assert main(["train", "--config", run_config, "--data", str(synth_dir), "--out", str(out), "--mode",
                 "plain"]) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--data", str(synth_dir), "--split",
                 "val"]) == 0
    text = (out / "metrics.json").read_text()
    model, extra = load_checkpoint(out / "checkpoint.pt")
    rec = evaluate(model, DatasetManifest.load(synth_dir), "val", TrainConfig.from_dict(extra["train_config"]))
    assert f'"iou": {100 * rec.iou:.2f}' in text
    assert f'"f1": {100 * rec.f1:.2f}' in text


def test_benchmark(synth_dir, run_config, tmp_path):
    assert main(["benchmark", "--config", run_config, "--data", str(synth_dir), "--out", str(tmp_path)]) == 0
    timing = json.loads((tmp_path / "timing.json").read_text())
    for mode in ("plain", "framework"):
        assert set(timing[mode]) == {"epoch_s", "batch_s", "optimizer_step_s"}
    assert timing["warmup_epochs"] == 1 and timing["measured_epochs"] == 2
