import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from r2aunet.cli import (ConfigError, load_run_config, main)
from r2aunet.metrics import METRIC_CSV_COLUMNS
from r2aunet.training import METRIC_LOG_COLUMNS

SMALL_CONFIG = {
    "model": {"depth": 2, "base_channels": 2},
    "train": {"epochs": 2, "lr": 1e-3},
    "loss": {"kind": "focal_tversky"},
    "data": {"size": 16},
}


@pytest.fixture()
def dataset(tmp_path):
    root = tmp_path / "data"
    rc = main(["synth", "--out", str(root), "--n", "12", "--size", "16",
               "--imbalance", "0.15"])
    assert rc == 0
    return root


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture()
def trained(dataset, config_path, tmp_path):
    out = tmp_path / "run"
    rc = main(["train", "--config", str(config_path),
               "--data", str(dataset), "--out", str(out)])
    assert rc == 0
    return out


class TestSynth:
    def test_layout(self, dataset):
        sample_dirs = sorted(p for p in dataset.iterdir() if p.is_dir())
        assert len(sample_dirs) == 12
        first = sample_dirs[0]
        assert (first / "images" / f"{first.name}.png").exists()
        assert list((first / "masks").glob("*.png"))
        assert (dataset / "manifest.json").exists()

    def test_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / sub), "--n", "3",
                         "--size", "16", "--imbalance", "0.15"]) == 0
        for p in sorted((tmp_path / "a").rglob("*.png")):
            q = tmp_path / "b" / p.relative_to(tmp_path / "a")
            assert p.read_bytes() == q.read_bytes()


class TestTrain:
    def test_artifacts(self, trained):
        assert (trained / "best.r2au").exists()
        assert (trained / "manifest.json").exists()
        assert list(trained.glob("ckpt_e*_d*.r2au"))
        with open(trained / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert list(rows[0]) == METRIC_LOG_COLUMNS
        assert all(np.isfinite(float(r["train_loss"])) for r in rows)


class TestEval:
    def test_reproduces_logged_val_dice(self, trained, dataset, capsys):
        with open(trained / "metrics.csv") as fh:
            best = max(csv.DictReader(fh), key=lambda r: float(r["val_dice"]))
        rc = main(["eval", "--ckpt", str(trained / "best.r2au"),
                   "--data", str(dataset), "--size", "16"])
        assert rc == 0
        row = next(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert list(row) == METRIC_CSV_COLUMNS
        assert float(row["dice"]) == pytest.approx(float(best["val_dice"]),
                                                   abs=1e-6)

    def test_missing_checkpoint(self, dataset):
        assert main(["eval", "--ckpt", "/nonexistent.r2au",
                     "--data", str(dataset)]) == 2


class TestPredict:
    def test_writes_binary_png(self, trained, dataset, tmp_path):
        sample = sorted(p for p in dataset.iterdir() if p.is_dir())[0]
        image = sample / "images" / f"{sample.name}.png"
        out = tmp_path / "mask.png"
        rc = main(["predict", "--ckpt", str(trained / "best.r2au"),
                   "--image", str(image), "--out", str(out)])
        assert rc == 0
        arr = np.asarray(Image.open(out))
        assert arr.shape == (16, 16)
        assert set(np.unique(arr)) <= {0, 255}

    def test_indivisible_image_needs_size(self, trained, tmp_path):
        odd = tmp_path / "odd.png"
        Image.fromarray(np.zeros((17, 17), dtype=np.uint8), mode="L").save(odd)
        rc = main(["predict", "--ckpt", str(trained / "best.r2au"),
                   "--image", str(odd), "--out", str(tmp_path / "o.png")])
        assert rc == 2


class TestGradcheckCommand:
    def test_passes(self, capsys):
        rc = main(["gradcheck", "--seeds", "1", "--size", "8"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out and "FAIL" not in out


class TestAblate:
    def test_subset_run(self, dataset, tmp_path):
        cfg = dict(SMALL_CONFIG)
        cfg["train"] = {"epochs": 1, "lr": 1e-3}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "ablation.csv"
        rc = main(["ablate", "--config", str(path), "--data", str(dataset),
                   "--out", str(out), "--subset", "2"])
        assert rc == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert all(not r["error"] for r in rows)
        assert all(np.isfinite(float(r["dice"])) for r in rows)


class TestConfig:
    def test_unknown_field_exit_2(self, dataset, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"depht": 2}}))
        rc = main(["train", "--config", str(path), "--data", str(dataset),
                   "--out", str(tmp_path / "run")])
        assert rc == 2

    def test_wrong_type_reports_field_path(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"epochs": "twenty"}}))
        with pytest.raises(ConfigError, match="train.epochs"):
            load_run_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_run_config("/nonexistent/config.json")

    def test_defaults_merge(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": {"depth": 2}}))
        cfg = load_run_config(path)
        assert cfg["model"]["depth"] == 2
        assert cfg["model"]["base_channels"] == 16  # untouched default

    def test_seed_env_override(self, monkeypatch):
        monkeypatch.setenv("R2AU_SEED", "123")
        assert load_run_config()["seed"] == 123

    def test_print_config(self, capsys):
        assert main(["--print-config"]) == 0
        parsed = json.loads(capsys.readouterr().out)
        assert parsed["train"]["epochs"] == 20

    def test_no_command_exit_2(self, capsys):
        assert main([]) == 2
