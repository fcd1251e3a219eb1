import csv
import math

import numpy as np
import pytest
import yaml

from dynsel import experiment as ex
from dynsel.cli import main
from dynsel.experiment import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    ExperimentConfig,
    fmt,
    read_results,
    report,
    run_experiment,
    summarize,
    write_table,
)

TINY = {
    "task": {"n_samples": 32, "n_classes": 3, "n_windows": 90, "k": 2, "snr": 2.0, "seed": 0},
    "n_channels": [4],
    "topologies": ["centralized", "distributed", "feedback"],
    "targets": [0.5],
    "seeds": [0],
    "train": {"batch_size": 32, "max_epochs": 2, "early_stop_patience": 2, "hidden": 8,
              "feedback_dim": 3,
              "classifier": {"n_temporal": 2, "n_spatial": 3, "kernels": [7, 3],
                             "pool_kernel": 8, "pool_stride": 4}},
    "save_checkpoints": False,
}


def _cfg(tmp_path, **kw):
    d = {**TINY, "output_dir": str(tmp_path / "out"), **kw}
    return ExperimentConfig.from_dict(d)


def _yaml(tmp_path, **kw):
    d = {**TINY, "output_dir": str(tmp_path / "out"), **kw}
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d), encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    return run_experiment(_cfg(tmp))


class TestConfig:
    @pytest.mark.parametrize("key", ["n_channels", "topologies", "targets", "seeds"])
    def test_empty_list(self, tmp_path, key):
        with pytest.raises(ConfigError, match=key):
            _cfg(tmp_path, **{key: []})

    def test_unknown_topology_and_option(self, tmp_path):
        with pytest.raises(ConfigError):
            _cfg(tmp_path, topologies=["mesh"])
        with pytest.raises(ConfigError, match="unknown"):
            _cfg(tmp_path, colour="red")

    def test_bad_train_and_noise(self, tmp_path):
        with pytest.raises(ConfigError, match="train"):
            _cfg(tmp_path, train={"no_such_field": 1})
        with pytest.raises(ConfigError, match="noise"):
            _cfg(tmp_path, noise={"p": 2.0})

    def test_missing_csv(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            _cfg(tmp_path, task={"csv": str(tmp_path / "none.csv"), "window": 8})

    def test_output_root_env(self, tmp_path, monkeypatch):
        cfg = ExperimentConfig.from_dict({**TINY, "output_dir": "rel"})
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert cfg.output_path() == tmp_path / "rel"
        monkeypatch.delenv(OUTPUT_ROOT_ENV)
        assert str(cfg.output_path()) == "rel"


class TestFormat:
    def test_values(self):
        assert fmt(0.5) == "0.500000"
        assert fmt(np.float64(1 / 3)) == "0.333333"
        assert fmt(3) == "3"
        assert fmt(None) == "N/A" and fmt(float("nan")) == "N/A"
        assert fmt(True) == "1" and fmt(False) == "0"
        assert fmt([0.25, 1.0]) == "0.250000;1.000000"

    def test_table_bytes(self, tmp_path):
        write_table(tmp_path / "t.csv", ["a", "b"], [{"a": 1, "b": 0.5}, {"a": 2}])
        assert (tmp_path / "t.csv").read_bytes() == b"a,b\n1,0.500000\n2,N/A\n"


class TestSweep:
    def test_unconstrained_cell(self, tmp_path):
        out = run_experiment(_cfg(tmp_path, topologies=["centralized"], targets=[1.0]))
        assert len(out.rows) == 1
        assert out.rows[0]["R_max"] == 1.0
        assert not out.failures

    def test_rows_per_topology(self, sweep):
        assert not sweep.failures
        assert [r["topology"] for r in sweep.rows] == ["centralized", "distributed", "feedback"]
        for r in sweep.rows:
            assert 0.0 <= r["R_max"] <= 1.0
            assert r["random_accuracy"] is not None
            assert len(r["node_rates"]) == 4
            assert r["violation"] == (r["R_max"] > r["T"] + 0.05)

    def test_output_files(self, sweep):
        out = sweep.output_dir
        for name in ("results.csv", "results_long.csv", "dynamic_vs_random.csv", "metrics.csv",
                     "failures.jsonl", "config.yaml"):
            assert (out / name).exists()
        for name in ("results.csv", "metrics.csv", "dynamic_vs_random.csv"):
            raw = (out / name).read_bytes()
            assert b"\r" not in raw
            raw.decode("utf-8")
        header = (out / "results.csv").read_text().splitlines()[0].split(",")
        assert header[:6] == ["M", "topology", "T", "seed", "R_max", "test_accuracy"]
        assert "node_rates" in header

    def test_comparison_table_per_cell(self, sweep):
        with open(sweep.output_dir / "dynamic_vs_random.csv", encoding="utf-8") as fh:
            table = list(csv.DictReader(fh))
        assert {(r["topology"], r["T"]) for r in table} == {
            (t, "0.500000") for t in ("centralized", "distributed", "feedback")}
        for r in table:
            assert float(r["difference"]) == pytest.approx(
                float(r["dynamic_accuracy"]) - float(r["random_accuracy"]), abs=2e-6)

    def test_long_format(self, sweep):
        with open(sweep.output_dir / "results_long.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2 * 2
        assert {r["method"] for r in rows} == {"dynamic", "random"}

    def test_resume_skips_completed(self, sweep, monkeypatch):
        before = (sweep.output_dir / "results.csv").read_bytes()
        calls = []
        monkeypatch.setattr(ex, "run_cell", lambda *a: calls.append(a))
        cfg = ExperimentConfig.from_yaml(sweep.output_dir / "config.yaml")
        again = run_experiment(cfg)
        assert calls == []
        assert (again.output_dir / "results.csv").read_bytes() == before

    def test_failure_is_recorded_and_sweep_continues(self, tmp_path, monkeypatch):
        real = ex.train_step2

        def boom(tcfg, *a, **kw):
            if tcfg.target_rate == 0.3:
                raise FloatingPointError("diverged")
            return real(tcfg, *a, **kw)

        monkeypatch.setattr(ex, "train_step2", boom)
        out = run_experiment(_cfg(tmp_path, topologies=["centralized"], targets=[0.3, 0.5],
                                  random_baseline=False))
        assert len(out.failures) == 1
        assert out.failures[0]["stage"] == "step2" and out.failures[0]["T"] == 0.3
        assert [r["T"] for r in out.rows] == [0.5]
        assert (out.output_dir / "failures.jsonl").read_text().count("\n") == 1

    def test_identical_bytes_on_rerun(self, sweep, tmp_path):
        again = run_experiment(_cfg(tmp_path))
        for name in ("results.csv", "metrics.csv"):
            assert (again.output_dir / name).read_bytes() == \
                (sweep.output_dir / name).read_bytes()


def _results(tmp_path, rows):
    full = []
    for r in rows:
        base = {c: None for c in ex.RESULT_COLUMNS}
        base.update(M=4, topology="feedback", seed=0, violation=False)
        base.update(r)
        full.append(base)
    write_table(tmp_path / "results.csv", ex.RESULT_COLUMNS, full)
    return tmp_path


class TestReport:
    def test_single_row(self, tmp_path):
        d = _results(tmp_path, [{"T": 0.5, "R_max": 0.42, "test_accuracy": 0.8125,
                                 "node_rates": [0.42, 0.1, 0.2, 0.3]}])
        (c,) = summarize(read_results(d))
        assert c.n == 1 and c.accuracy_mean == 0.8125 and c.accuracy_std is None
        assert c.r_max_mean == 0.42 and c.r_max_pooled == 0.42 and c.violations == 0
        text, v = report(d)
        assert "0.812500" in text and "0.420000" in text and v == 0

    @pytest.mark.parametrize("r_max,flag", [(0.55, False), (0.550001, True), (0.4, False),
                                            (0.9, True)])
    def test_violation_threshold(self, tmp_path, r_max, flag):
        d = _results(tmp_path, [{"T": 0.5, "R_max": r_max, "test_accuracy": 0.5}])
        text, v = report(d)
        assert v == int(flag)
        assert ("VIOLATION" in text) == flag

    def test_five_seed_cell(self, tmp_path):
        accs = [0.7, 0.75, 0.8, 0.85, 0.95]
        d = _results(tmp_path, [{"T": 0.3, "seed": s, "R_max": 0.3, "test_accuracy": a}
                                for s, a in enumerate(accs)])
        (c,) = summarize(read_results(d))
        assert c.n == 5
        mean = sum(accs) / 5
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / 4)
        assert c.accuracy_mean == pytest.approx(mean, abs=1e-12)
        assert c.accuracy_std == pytest.approx(std, abs=1e-12)

    def test_groups_cells(self, tmp_path):
        d = _results(tmp_path, [{"T": 0.3, "R_max": 0.3, "test_accuracy": 0.5},
                                {"T": 0.5, "R_max": 0.5, "test_accuracy": 0.6},
                                {"T": 0.5, "topology": "distributed", "R_max": 0.5,
                                 "test_accuracy": 0.6}])
        assert len(summarize(read_results(d))) == 3

    def test_no_rows(self, tmp_path):
        d = _results(tmp_path, [])
        with pytest.raises(ValueError):
            report(d)


class TestCli:
    def test_gen_data_and_simulate_untrained(self, tmp_path, capsys):
        data = tmp_path / "d.npz"
        assert main(["gen-data", "--out", str(data), "--n-channels", "4", "--n-samples", "32",
                     "--n-windows", "30", "--csv", str(tmp_path / "d.csv")]) == 0
        assert data.exists() and (tmp_path / "d.csv").exists()
        assert "30 windows" in capsys.readouterr().out

    def test_gen_data_invalid(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d.npz"), "--k", "0"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["sweep", "--config", str(tmp_path / "nope.yaml")]) == 1

    def test_bad_config_value(self, tmp_path):
        assert main(["sweep", "--config", str(_yaml(tmp_path, targets=[]))]) == 1

    def test_report_exit_codes(self, tmp_path, capsys):
        ok = _results(tmp_path, [{"T": 0.5, "R_max": 0.5, "test_accuracy": 0.5}])
        assert main(["report", str(ok), "--strict"]) == 0
        bad = tmp_path / "bad"
        bad.mkdir()
        _results(bad, [{"T": 0.3, "R_max": 0.5, "test_accuracy": 0.5}])
        assert main(["report", str(bad)]) == 0
        assert main(["report", str(bad), "--strict"]) == 3
        assert main(["report", str(tmp_path / "missing")]) == 1
        assert "VIOLATION" in capsys.readouterr().out

    def test_simulate_untrained_checkpoint_is_run_failure(self, tmp_path):
        from dynsel.training import Checkpoint, TrainConfig, build_model

        data = tmp_path / "d.npz"
        main(["gen-data", "--out", str(data), "--n-channels", "4", "--n-samples", "32",
              "--n-windows", "20", "--n-classes", "3"])
        tcfg = TrainConfig.from_dict({**TINY["train"], "classifier": {
            **TINY["train"]["classifier"], "n_channels": 4, "n_samples": 32, "n_classes": 3}})
        model = build_model(tcfg, "feedback", use_dsf=True)
        Checkpoint("raw", tcfg.to_dict(), model.state_dict(), topology="feedback",
                   has_dsf=True).save(tmp_path / "m.npz")
        assert main(["simulate", "--checkpoint", str(tmp_path / "m.npz"),
                     "--data", str(data)]) == 2

    def test_flags_override_config(self, tmp_path):
        from dynsel.cli import build_parser, load_config

        args = build_parser().parse_args(
            ["sweep", "--config", str(_yaml(tmp_path)), "--max-epochs", "7", "--targets",
             "0.2,0.4", "--n-spatial", "5", "--no-dsf", "--output-dir", "elsewhere"])
        cfg = load_config(args)
        assert cfg.train["max_epochs"] == 7
        assert cfg.train["batch_size"] == 32
        assert cfg.train["classifier"]["n_spatial"] == 5
        assert cfg.train["classifier"]["n_temporal"] == 2
        assert cfg.targets == [0.2, 0.4] and cfg.dsf is False
        assert cfg.output_dir == "elsewhere"

    def test_train_then_simulate(self, tmp_path, capsys):
        cfg = _yaml(tmp_path)
        assert main(["train", "--config", str(cfg), "--topology", "feedback",
                     "--target-rate", "0.5", "--max-epochs", "1",
                     "--early-stop-patience", "1"]) == 0
        out = capsys.readouterr().out
        assert "topology=feedback" in out and "R_max=" in out
        ck = tmp_path / "out" / "model.npz"
        assert ck.exists() and (tmp_path / "out" / "metrics.jsonl").exists()
        data = tmp_path / "d.npz"
        main(["gen-data", "--out", str(data), "--n-channels", "4", "--n-samples", "32",
              "--n-windows", "20", "--n-classes", "3"])
        assert main(["simulate", "--checkpoint", str(ck), "--data", str(data), "--noise-p",
                     "0.25", "--out", str(tmp_path / "sim")]) == 0
        assert (tmp_path / "sim" / "ledger.csv").exists()
        assert main(["simulate", "--checkpoint", str(ck), "--data", str(data),
                     "--random-rate", "0.5"]) == 0

    def test_sweep_command(self, tmp_path, capsys):
        cfg = _yaml(tmp_path, topologies=["centralized"], targets=[1.0])
        assert main(["sweep", "--config", str(cfg)]) == 0
        assert "1 result rows" in capsys.readouterr().out
        assert main(["report", str(tmp_path / "out"), "--strict"]) == 0

    def test_module_entry_point(self):
        import subprocess
        import sys

        res = subprocess.run([sys.executable, "-m", "dynsel", "--help"], capture_output=True,
                             text=True)
        assert res.returncode == 0 and "sweep" in res.stdout
