import json
import math
import os

import numpy as np
import pytest

from dpkfac import cli, dp

BLOBS = {
    "kind": "blobs", "n": 200, "dim": 16, "classes": 4, "noise": 0.6, "seed": 3,
    "image_shape": [1, 4, 4],
}

MODEL = [
    {"type": "conv2d", "c_in": 1, "c_out": 4, "k": 3, "stride": 1, "pad": 1},
    {"type": "relu"},
    {"type": "flatten"},
    {"type": "linear", "in": 64, "out": 4},
]


def write_config(tmp_path, cfg, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def train_config(tmp_path, **kw):
    cfg = {
        "seed": 1,
        "output_dir": str(tmp_path / "out"),
        "dataset": BLOBS,
        "model": MODEL,
        "train": {"method": "dpsgd", "lr": 0.1, "epochs": 1, "batch": 32, "eval_every": 3},
        "privacy": {"clip": 1.0, "sigma": 1.2},
    }
    cfg.update(kw)
    return cfg


class TestSchema:
    def test_unknown_keys_rejected_all_listed(self, tmp_path):
        cfg = train_config(tmp_path)
        cfg["bogus"] = 1
        cfg["privacy"]["mystery"] = 2
        with pytest.raises(cli.ConfigError) as err:
            cli.validate_config(cfg)
        text = "\n".join(err.value.violations)
        assert "bogus" in text and "mystery" in text
        assert len(err.value.violations) >= 2

    def test_valid_config_passes(self, tmp_path):
        cli.validate_config(train_config(tmp_path))

    def test_task_requirements_checked(self, tmp_path):
        path = write_config(tmp_path, {"seed": 1, "output_dir": str(tmp_path)})
        with pytest.raises(cli.ConfigError) as err:
            cli.run("train", path, [])
        assert any("dataset" in v for v in err.value.violations)

    def test_overrides(self):
        cfg = {"train": {"lr": 0.1}}
        out = cli.apply_overrides(cfg, ["train.lr=0.5", "seed=3", "train.method=dpsgd"])
        assert out["train"]["lr"] == 0.5
        assert out["seed"] == 3
        assert out["train"]["method"] == "dpsgd"
        assert cfg["train"]["lr"] == 0.1  # original untouched


class TestAccountant:
    def test_grid_minimized_epsilon_printed(self, tmp_path, capsys):
        cfg = {
            "task": "accountant",
            "accountant": {"q": 1.0, "sigma": 1.0, "delta": 1e-5, "steps": 1},
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("accountant", path, []) == 0
        out = capsys.readouterr().out
        eps = float(out.split("epsilon=")[1].split()[0])
        want = min(a / 2.0 + math.log(1e5) / (a - 1) for a in range(2, 65))
        assert abs(eps - want) <= 1e-12
        assert "best_order=" in out
        assert "order,rdp_per_step,rdp_total,epsilon_at_order" in out

    def test_calibration_mode_writes_csv(self, tmp_path, capsys):
        cfg = {
            "output_dir": str(tmp_path / "acct"),
            "accountant": {
                "batch": 20, "n": 1000, "target_epsilon": 2.0, "delta": 1e-5, "steps": 500
            },
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("accountant", path, []) == 0
        sigma = float(capsys.readouterr().out.split("sigma=")[1].split()[0])
        assert dp.epsilon_for(0.02, sigma, 500, 1e-5)[0] <= 2.0
        table = (tmp_path / "acct" / "rdp_orders.csv").read_text().splitlines()
        assert table[0] == "order,rdp_per_step,rdp_total,epsilon_at_order"
        assert len(table) == 1 + 63


class TestGenNoise:
    def test_outputs_and_slope(self, tmp_path):
        outdir = tmp_path / "noise"
        cfg = {
            "seed": 5,
            "output_dir": str(outdir),
            "noise": {"batch": 32, "height": 64, "width": 64, "alpha": 1.0},
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("gen-noise", path, []) == 0
        x = np.load(outdir / "noise.npy")
        assert x.shape == (32, 1, 64, 64)
        summary = json.loads((outdir / "summary.json").read_text())
        assert abs(summary["fitted_slope"] + 1.0) <= 0.15
        lines = (outdir / "spectrum.csv").read_text().splitlines()
        assert lines[0] == "radius,power"
        assert not [f for f in os.listdir(outdir) if f.startswith(".tmp-")]

    def test_reproducible_from_echo(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        base = {"seed": 9, "noise": {"batch": 4, "height": 16, "width": 16, "alpha": 0.5}}
        p1 = write_config(tmp_path, {**base, "output_dir": str(out1)}, "c1.json")
        cli.run("gen-noise", p1, [])
        echo = json.loads((out1 / "config_resolved.json").read_text())["config"]
        echo["output_dir"] = str(out2)
        p2 = write_config(tmp_path, echo, "c2.json")
        cli.run("gen-noise", p2, [])
        np.testing.assert_array_equal(np.load(out1 / "noise.npy"), np.load(out2 / "noise.npy"))


class TestTrainTask:
    def test_end_to_end_outputs(self, tmp_path):
        cfg = train_config(tmp_path)
        path = write_config(tmp_path, cfg)
        assert cli.run("train", path, []) == 0
        outdir = tmp_path / "out"
        run_lines = (outdir / "run.csv").read_text().splitlines()
        assert run_lines[0].startswith("step,loss,test_acc,epsilon,realized_batch")
        assert len(run_lines) == 1 + 5  # ceil(160/32) = 5 steps
        summary = json.loads((outdir / "summary.json").read_text())
        assert summary["seed"] == 1 and summary["steps"] == 5
        assert (outdir / "model.ckpt").exists()
        assert (outdir / "config_resolved.json").exists()

    def test_rerun_is_bitwise_identical(self, tmp_path):
        cfg = train_config(tmp_path)
        path = write_config(tmp_path, cfg)
        cli.run("train", path, [])
        first = (tmp_path / "out" / "run.csv").read_bytes()
        cli.run("train", path, [])
        assert (tmp_path / "out" / "run.csv").read_bytes() == first

    def test_dpkfc_with_tracking(self, tmp_path):
        cfg = train_config(tmp_path)
        cfg["train"]["method"] = "dpkfc"
        cfg["train"]["tracking"] = {
            "oracle_batch": 16,
            "proxy": {"kind": "blobs", "n": 80, "dim": 16, "classes": 4,
                      "noise": 2.0, "seed": 44, "image_shape": [1, 4, 4]},
        }
        cfg["kfac"] = {"probe_batch": 16, "probe": {"kind": "pink", "alpha": 1.0}}
        path = write_config(tmp_path, cfg)
        assert cli.run("train", path, []) == 0
        lines = (tmp_path / "out" / "alignment.csv").read_text().splitlines()
        assert lines[0] == "step,source,layer,factor,cosine,rel_frob,rel_frob_unitnorm"
        assert len(lines) > 1

    def test_missing_dataset_nonzero_exit_no_partial_outputs(self, tmp_path):
        cfg = train_config(tmp_path)
        cfg["dataset"] = {
            "kind": "idx",
            "train_images": str(tmp_path / "missing.idx"),
            "train_labels": str(tmp_path / "missing2.idx"),
        }
        path = write_config(tmp_path, cfg)
        rc = cli.main(["train", "--config", path])
        assert rc == 1
        outdir = tmp_path / "out"
        leftovers = [f for f in os.listdir(outdir) if f != "config_resolved.json"] \
            if outdir.exists() else []
        assert not [f for f in leftovers if not f.startswith(".")]

    def test_invalid_config_exit_code_and_record(self, tmp_path, capsys):
        cfg = train_config(tmp_path)
        cfg["train"]["method"] = "warp-drive"
        path = write_config(tmp_path, cfg)
        rc = cli.main(["train", "--config", path])
        assert rc == 2
        record = json.loads(capsys.readouterr().err)
        assert record["error"] == "ConfigError"
        assert record["violations"]


class TestDiagnoseTasks:
    def test_probe_spectrum(self, tmp_path):
        cfg = {
            "seed": 2,
            "output_dir": str(tmp_path / "spec"),
            "dataset": BLOBS,
            "model": MODEL,
            "diagnose": {"sources": [{"kind": "pink"}, {"kind": "oracle"}],
                         "probe_batch": 16},
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("probe-spectrum", path, []) == 0
        lines = (tmp_path / "spec" / "spectrum.csv").read_text().splitlines()
        assert lines[0] == "layer,rank,value,source"
        sources = {l.split(",")[-1] for l in lines[1:]}
        assert sources == {"pink", "oracle"}

    def test_diagnose_alignment(self, tmp_path):
        cfg = {
            "seed": 2,
            "output_dir": str(tmp_path / "diag"),
            "dataset": BLOBS,
            "model": MODEL,
            "diagnose": {
                "sources": [{"kind": "oracle"}, {"kind": "pink", "alpha": 1.0}],
                "probe_batch": 16,
            },
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("diagnose", path, []) == 0
        lines = (tmp_path / "diag" / "alignment.csv").read_text().splitlines()
        assert lines[0] == "step,source,layer,factor,cosine,rel_frob,rel_frob_unitnorm"
        assert {l.split(",")[1] for l in lines[1:]} == {"pink"}
        assert (tmp_path / "diag" / "spectrum.csv").exists()

    def test_diagnose_requires_oracle(self, tmp_path):
        cfg = {
            "seed": 2, "output_dir": str(tmp_path / "x"), "dataset": BLOBS,
            "model": MODEL, "diagnose": {"sources": [{"kind": "pink"}]},
        }
        path = write_config(tmp_path, cfg)
        with pytest.raises(cli.ConfigError):
            cli.run("diagnose", path, [])


class TestCsvDialect:
    def test_seventeen_significant_digits(self, tmp_path):
        p = tmp_path / "x.csv"
        value = 1.0 / 3.0
        cli.write_csv(str(p), ["v"], [[value]])
        back = float(p.read_text().splitlines()[1])
        assert back == value

    def test_none_is_empty(self, tmp_path):
        p = tmp_path / "y.csv"
        cli.write_csv(str(p), ["a", "b"], [[None, 1]])
        assert p.read_text().splitlines()[1] == ",1"


class TestOutputRoot:
    def test_env_root_prefixes_relative_dirs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DPKFAC_OUTPUT_ROOT", str(tmp_path / "root"))
        cfg = {
            "seed": 5,
            "output_dir": "nested/noise",
            "noise": {"batch": 2, "height": 8, "width": 8, "alpha": 0.5},
        }
        path = write_config(tmp_path, cfg)
        assert cli.run("gen-noise", path, []) == 0
        assert (tmp_path / "root" / "nested" / "noise" / "noise.npy").exists()

    def test_dpkfc_run_saves_state_checkpoint(self, tmp_path):
        from dpkfac import kfac as kfac_mod

        cfg = train_config(tmp_path)
        cfg["train"]["method"] = "dpkfc"
        cfg["kfac"] = {"probe_batch": 8, "probe": {"kind": "pink", "alpha": 0.0}}
        path = write_config(tmp_path, cfg)
        assert cli.run("train", path, []) == 0
        state = kfac_mod.load_state(str(tmp_path / "out" / "kfac_state.ckpt"))
        assert state.creation_step >= 0
        resolved = json.loads((tmp_path / "out" / "config_resolved.json").read_text())
        assert resolved["resolved"]["kfac"]["probe"].startswith("synthetic-pink")
        assert resolved["resolved"]["sigma"] == 1.2
