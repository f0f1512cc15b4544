import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from krigbench.cli import alpha_to_node_ratios, load_config, main
from krigbench.errors import ConfigError


def tiny_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"path": str(tmp_path / "data.csv"), "format": "csv-wide"},
        "split": {
            "scheme": "3x3",
            "node_ratios": [0.6, 0.2, 0.2],
            "period_ratios": [0.7, 0.1, 0.2],
            "seed": 42,
            "temporal_mode": "contiguous-ratio",
        },
        "graph": {"kind": "knn-row-normalized", "k": 4},
        "model": {
            "n_layers": 2,
            "temporal_halfwidth": 1,
            "hidden_dim": 8,
            "window_size": 8,
            "in_channels": 1,
        },
        "trainer": {
            "learning_rate": 0.001,
            "clip_threshold": 1.0,
            "max_epochs": 3,
            "patience": 2,
            "batch_size": 4,
            "mask_fraction": 0.25,
            "seed": 42,
        },
        "drik": {"enable_np": True, "enable_ed": True, "enable_sa": True, "perturb_every": 1},
        "synth": {
            "n_nodes": 16,
            "n_steps": 120,
            "length_scale": 0.4,
            "temporal_rho": 0.6,
            "noise_std": 0.02,
            "seed": 7,
        },
        "baselines": ["mean", "knn", "okriging"],
        "normalizer": "global-z-score",
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def workspace(tmp_path):
    cfg_path = tiny_config(tmp_path)
    assert main(["synth", "--config", str(cfg_path)]) == 0
    return tmp_path, cfg_path


class TestConfig:
    def test_defaults(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("{}")
        cfg = load_config(path)
        assert cfg.trainer.learning_rate == 1e-4
        assert cfg.trainer.max_epochs == 300
        assert cfg.trainer.patience == 50
        assert cfg.model.window_size == 24
        assert cfg.model.hidden_dim == 64
        assert cfg.model.temporal_halfwidth == 1
        assert cfg.trainer.batch_size == 32
        assert cfg.trainer.clip_threshold == 1.0
        assert cfg.split.seed == 42

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("unknown_section: {}")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("trainer:\n  learning_rat: 0.1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_hash_stable(self, tmp_path):
        a = load_config(tiny_config(tmp_path))
        b = load_config(tiny_config(tmp_path))
        assert a.hash() == b.hash()

    def test_alpha_mapping(self):
        ratios = alpha_to_node_ratios(0.25)
        assert ratios == pytest.approx((0.6, 0.2, 0.2))
        hi = alpha_to_node_ratios(0.875)
        assert sum(hi) == pytest.approx(1.0)
        assert hi[2] > ratios[2]


class TestCommands:
    def test_synth_writes_dataset(self, workspace):
        tmp_path, _ = workspace
        assert (tmp_path / "data.csv").exists()
        assert (tmp_path / "data.coords.csv").exists()

    def test_split(self, workspace):
        tmp_path, cfg_path = workspace
        assert main(["split", "--config", str(cfg_path)]) == 0
        text = (tmp_path / "out" / "split.txt").read_text()
        assert "[nodes]" in text and "[periods]" in text

    def test_train_evaluate_baseline_shift(self, workspace):
        tmp_path, cfg_path = workspace
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--method", "m7"]) == 0
        assert (out / "checkpoint.stgc").exists()
        meta = json.loads((out / "checkpoint.stgc.meta.json").read_text())
        assert meta["method"] == "m7"
        assert meta["seed"] == 42
        audit = json.loads((out / "audit.json").read_text())
        assert audit["passed"] is True
        epochs = [json.loads(line) for line in (out / "epochs.jsonl").read_text().splitlines()]
        assert {"epoch", "train_loss", "val_mae", "wallclock"} <= set(epochs[0])

        assert main(["evaluate", "--config", str(cfg_path), "--phase", "test"]) == 0
        assert (out / "predictions_test.csv").exists()
        assert (out / "predictions_test.norm.csv").exists()
        metrics = json.loads((out / "metrics_test.json").read_text())
        assert metrics["mae"] > 0

        assert main(["baseline", "--config", str(cfg_path), "--phase", "test"]) == 0
        for method in ("mean", "knn", "okriging"):
            assert (out / f"metrics_test_{method}.json").exists()
        report = (out / "report_test.md").read_text()
        assert "| Method |" in report and "okriging" in report

        assert main(["shift", "--config", str(cfg_path), "--phase", "test"]) == 0
        shift = json.loads((out / "shift_test.json").read_text())
        assert shift["spectral_drift"] >= 0
        assert (out / "graph_test.csv").read_text().startswith("src,dst,weight")

    def test_missing_checkpoint_exit_code(self, workspace, capsys):
        tmp_path, cfg_path = workspace
        code = main(["evaluate", "--config", str(cfg_path), "--phase", "test"])
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "checkpoint-not-found"

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("trainer:\n  nonsense: 1\n")
        code = main(["split", "--config", str(bad)])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "config"

    def test_train_all_switches_off_is_m0(self, workspace):
        tmp_path, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path), "--method", "m0"]) == 0
        meta = json.loads((tmp_path / "out" / "checkpoint.stgc.meta.json").read_text())
        assert meta["method"] == "m0"

    def test_rerun_reproducibility(self, workspace):
        tmp_path, cfg_path = workspace
        out = tmp_path / "out"
        artifacts = {}
        for run in range(2):
            assert main(["train", "--config", str(cfg_path), "--method", "m7"]) == 0
            assert main(["evaluate", "--config", str(cfg_path), "--phase", "test"]) == 0
            for name in ("checkpoint.stgc", "predictions_test.csv", "metrics_test.json"):
                artifacts.setdefault(name, []).append((out / name).read_bytes())
        for name, blobs in artifacts.items():
            assert blobs[0] == blobs[1], f"{name} differs between reruns"

    def test_seed_override(self, workspace):
        tmp_path, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path), "--seed", "3407"]) == 0
        meta = json.loads((tmp_path / "out" / "checkpoint.stgc.meta.json").read_text())
        assert meta["seed"] == 3407

    def test_config_hash_recorded(self, workspace):
        tmp_path, cfg_path = workspace
        assert main(["train", "--config", str(cfg_path)]) == 0
        assert main(["evaluate", "--config", str(cfg_path), "--phase", "validate"]) == 0
        out = tmp_path / "out"
        ckpt_meta = json.loads((out / "checkpoint.stgc.meta.json").read_text())
        train_manifest = json.loads((out / "manifest_train.json").read_text())
        eval_manifest = json.loads((out / "manifest_evaluate.json").read_text())
        assert ckpt_meta["config_hash"] == train_manifest["config_hash"]
        assert eval_manifest["config_hash"] == train_manifest["config_hash"]


class TestSweep:
    def test_sweep_grid(self, tmp_path):
        cfg_path = tiny_config(
            tmp_path,
            trainer={
                "learning_rate": 0.001,
                "clip_threshold": 1.0,
                "max_epochs": 2,
                "patience": 1,
                "batch_size": 4,
                "mask_fraction": 0.25,
                "seed": 42,
            },
            baselines=["mean"],
        )
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["sweep", "--config", str(cfg_path), "--method", "m0"]) == 0
        rows = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
        header, data = rows[0], rows[1:]
        assert header == "ratio,method,mae,rmse,mape"
        methods = {}
        for line in data:
            ratio, method = line.split(",")[:2]
            methods.setdefault(method, []).append(ratio)
        assert len(methods["m0"]) == 7
        assert len(methods["mean"]) == 7
        ratio_dirs = list((tmp_path / "out").glob("ratio_*"))
        assert len(ratio_dirs) == 7
