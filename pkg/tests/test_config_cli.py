import json

import numpy as np
import pytest

from sqakd import cli
from sqakd.config import (
    ConfigError,
    config_from_dict,
    parse_bits,
    parse_config,
    write_config,
)
from sqakd.data import Dataset, write_binary_records

MINIMAL = {"mode": "sqakd", "model": {"arch": "mlp", "num_classes": 3, "widths": [2, 8, 3]}}


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def tiny_config(tmp_path, **extra):
    cfg = {
        "mode": "sqakd", "bits": "W2A2", "out": str(tmp_path / "out"),
        "model": {"arch": "mlp", "num_classes": 3, "widths": [2, 8, 3], "skip_first_last": False},
        "train": {"epochs": 2, "batch_size": 32},
        "teacher": {"epochs": 2, "lr": 0.1, "momentum": 0.0},
        "data": {"source": "blobs", "n_per_class": 40, "test_n_per_class": 20},
    }
    cfg.update(extra)
    return write_json(tmp_path / "cfg.json", cfg)


class TestParse:
    def test_sqakd_mode_is_kl_only(self, tmp_path):
        cfg = parse_config(write_json(tmp_path / "c.json", MINIMAL))
        assert cfg.loss_config().mode == "KL_only" and not cfg.loss_config().needs_labels

    def test_bits_shorthand(self):
        assert parse_bits("W1A1") == (1, 1)
        cfg = config_from_dict({**MINIMAL, "bits": "W1A1"})
        wq, aq = cfg.model_config().quant
        assert (wq.b, aq.b) == (1, 1)
        with pytest.raises(ConfigError):
            parse_bits("W9A2")

    def test_negative_mu(self):
        with pytest.raises(ConfigError, match="mu"):
            config_from_dict({**MINIMAL, "estimator": {"mu": -1}})

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="data.path"):
            config_from_dict({**MINIMAL, "data": {"path": "x"}})

    def test_missing_model(self):
        with pytest.raises(ConfigError, match="model"):
            config_from_dict({"mode": "sqakd"})

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            config_from_dict({**MINIMAL, "seed": "zero"})
        with pytest.raises(ConfigError):
            config_from_dict({**MINIMAL, "loss": {"rho2_scaling": 1}})

    def test_duplicate_keys(self, tmp_path):
        (tmp_path / "d.json").write_text('{"seed": 1, "seed": 2, "model": {}}', encoding="utf-8")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(tmp_path / "d.json")

    def test_round_trip(self, tmp_path):
        cfg = config_from_dict({**MINIMAL, "loss": {"lambda": 0.3, "rho": 2.0},
                                "quant": {"activation": {"family": "pact", "clip_params": [3.0]}}})
        write_config(cfg, tmp_path / "r.json")
        assert parse_config(tmp_path / "r.json") == cfg

    def test_overrides_and_seed(self, tmp_path):
        path = write_json(tmp_path / "c.json", {**MINIMAL, "seed": 3})
        cfg = parse_config(path, ["loss.rho=2", "loss.rho=8", "train.init=random", "seed=5"], seed=11)
        assert (cfg.loss.rho, cfg.train.init, cfg.seed) == (8.0, "random", 11)

    def test_lsq_and_ensemble(self):
        cfg = config_from_dict({**MINIMAL, "quant": {"weight": {"family": "LSQ"}},
                                "teacher": {"checkpoint": ["a.ckpt", "b.ckpt"]}})
        assert cfg.model_config().quant[0].params.round_params == (0.1,)
        assert cfg.teacher_checkpoints() == ["a.ckpt", "b.ckpt"]


class TestRun:
    def test_qat_without_teacher(self, tmp_path, capsys):
        code = cli.run("qat", tiny_config(tmp_path))
        assert code != 0 and "teacher required" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = write_json(tmp_path / "bad.json", {**MINIMAL, "nope": 1})
        assert cli.run("pretrain", path) == 2
        assert "unknown key 'nope'" in capsys.readouterr().err
        assert cli.run("pretrain", tmp_path / "missing.json") == 2

    def test_pretrain_qat_eval(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        t_out, s_out = tmp_path / "t", tmp_path / "s"
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(t_out)]) == 0
        assert (t_out / "teacher.ckpt").exists() and (t_out / "config.resolved.json").exists()
        assert cli.main(["qat", "--config", str(cfg), "--out", str(s_out),
                         "--set", f"teacher.checkpoint={json.dumps(str(t_out / 'teacher.ckpt'))}"]) == 0
        header, *rows = (s_out / "metrics.csv").read_text().splitlines()
        assert header == "epoch,train_loss,top1,top5,seconds" and len(rows) == 2
        cost = json.loads((s_out / "cost.json").read_text())
        assert sorted(cost) == sorted(["N", "T_pre", "T_s", "T_t", "M_t", "M_s", "total"])
        capsys.readouterr()
        assert cli.main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e"),
                         "--set", f"eval.checkpoint={json.dumps(str(s_out / 'student.ckpt'))}"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["top1"] == float(rows[-1].split(",")[2])

    def test_resolved_config_restarts_run(self, tmp_path):
        cfg = tiny_config(tmp_path, **{"out": str(tmp_path / "a")})
        assert cli.run("pretrain", cfg) == 0
        resolved = tmp_path / "a" / "config.resolved.json"
        assert cli.run("pretrain", resolved, out=str(tmp_path / "b")) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_ablate_rho_axis(self, tmp_path):
        cfg = tiny_config(tmp_path, ablate={"axes": {"rho": [1, 4, 8]}})
        assert cli.run("ablate", cfg) == 0
        out = tmp_path / "out"
        runs = sorted(p.name for p in out.iterdir() if p.name.startswith("run_"))
        assert runs == ["run_000", "run_001", "run_002"]
        rhos = [json.loads((out / r / "config.resolved.json").read_text())["loss"]["rho"] for r in runs]
        assert rhos == [1.0, 4.0, 8.0]
        assert (out / "runs.csv").read_text().splitlines()[0] == "run,dir,rho"

    def test_ablate_threads_match_serial(self, tmp_path):
        serial = tiny_config(tmp_path, out=str(tmp_path / "s"), ablate={"axes": {"rho": [1, 4]}})
        assert cli.run("ablate", serial) == 0
        threaded = tiny_config(tmp_path, out=str(tmp_path / "p"), ablate={"axes": {"rho": [1, 4]}, "workers": 2})
        assert cli.run("ablate", threaded) == 0
        for r in ("run_000", "run_001"):
            assert (tmp_path / "s" / r / "metrics.csv").read_bytes() == (tmp_path / "p" / r / "metrics.csv").read_bytes()

    def test_wall_clock_column(self, tmp_path):
        cfg = tiny_config(tmp_path, log_wall_clock=True)
        assert cli.run("pretrain", cfg) == 0
        rows = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[1:]
        secs = [float(r.split(",")[-1]) for r in rows]
        assert all(np.diff(secs) >= 0)

    def test_binary_source(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.uniform(size=(12, 1, 4, 4)), np.arange(12) % 3, 3)
        write_binary_records(tmp_path / "train.bin", ds)
        write_binary_records(tmp_path / "test.bin", ds)
        cfg = tiny_config(tmp_path, model={"arch": "cnn", "num_classes": 3, "input_shape": [1, 4, 4],
                                           "channels": [2], "fc": [4]},
                          data={"source": "binary", "classes": 3, "shape": [1, 4, 4],
                                "train_path": str(tmp_path / "train.bin"), "test_path": str(tmp_path / "test.bin")})
        assert cli.run("pretrain", cfg) == 0
