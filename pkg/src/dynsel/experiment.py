"""Rate-accuracy sweeps over node counts, target rates, topologies and seeds,
with random-selection baselines, and the text report over their results.

A sweep cell is one (M, T, seed) triple. The centralized selector trained in
a cell is the distillation teacher for the distributed topologies of the same
cell, so every cell yields one result row per requested topology.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .data import CsvSchema, Dataset, SyntheticTaskSpec, generate, ingest_csv
from .gating import Topology
from .training import (
    Checkpoint,
    MetricsLog,
    StageError,
    TrainConfig,
    carve_validation,
    train_random_selection,
    train_step1,
    train_step2,
    train_step3,
    train_step4,
)
from .wsn import NoiseModel, corrupt_dataset, random_baseline, simulate

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DYNSEL_OUTPUT_ROOT"
VIOLATION_SLACK = 0.05
RESULT_COLUMNS = [
    "M", "topology", "T", "seed", "R_max", "test_accuracy", "baseline_accuracy",
    "random_R_max", "random_accuracy", "precision", "distill_agreement", "distill_bce",
    "violation", "node_rates",
]
METRIC_COLUMNS = ["M", "T", "seed", "stage", "epoch", "train_loss", "val_loss", "val_acc",
                  "precision", "agreement", "soft_rates"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: dict = field(default_factory=dict)
    n_channels: list[int] = field(default_factory=lambda: [8])
    topologies: list[str] = field(default_factory=lambda: [t.value for t in Topology])
    targets: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dsf: bool = True
    noise: dict | None = None
    random_baseline: bool = True
    test_fraction: float = 0.3
    train: dict = field(default_factory=dict)
    output_dir: str = "results"
    workers: int = 1
    save_checkpoints: bool = True

    def __post_init__(self):
        for name in ("n_channels", "topologies", "targets", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep list {name!r} is empty")
        try:
            self.topologies = [Topology(t).value for t in self.topologies]
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if any(m < 1 for m in self.n_channels):
            raise ConfigError("node counts must be positive")
        if any(not 0.0 <= t for t in self.targets):
            raise ConfigError("target rates must be nonnegative")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if "csv" in self.task and not Path(self.task["csv"]).exists():
            raise ConfigError(f"task csv not found: {self.task['csv']}")
        if self.noise is not None:
            try:
                NoiseModel(**{k: v for k, v in self.noise.items() if k != "seed"})
            except (TypeError, ValueError) as err:
                raise ConfigError(f"noise: {err}") from None
        try:
            TrainConfig.from_dict({k: v for k, v in self.train.items() if k != "classifier"})
        except (TypeError, ValueError) as err:
            raise ConfigError(f"train: {err}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return Path(root) / out if root and not out.is_absolute() else out


# --------------------------------------------------------------- cell setup


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def cell_hash(cfg: ExperimentConfig, m: int, t: float, seed: int) -> str:
    d = cfg.to_dict()
    for k in ("output_dir", "workers", "seeds", "targets", "n_channels", "save_checkpoints"):
        d.pop(k)
    return _digest({"cfg": d, "M": m, "T": t, "seed": seed})


def load_task(cfg: ExperimentConfig, m: int, seed: int) -> tuple[Dataset, Dataset]:
    """Train/test datasets for node count ``m`` and run ``seed``."""
    task = dict(cfg.task)
    if "csv" in task:
        schema = CsvSchema(task["window"], task.get("stride"), task.get("label_column", "y"),
                           task.get("labels_path"), task.get("standardize", True))
        ds = ingest_csv(task["csv"], schema)
        channels = (task.get("channels") or {}).get(m, (task.get("channels") or {}).get(str(m)))
        if channels is None:
            if m > ds.n_channels:
                raise ConfigError(f"recording has {ds.n_channels} channels, asked for {m}")
            channels = list(range(m))
        ds = ds.select_channels(channels)
        data_seed = seed
    else:
        task["n_channels"] = m
        data_seed = int(task.get("seed", 0)) + seed
        task["seed"] = data_seed
        try:
            ds = generate(SyntheticTaskSpec(**task))
        except TypeError as err:
            raise ConfigError(f"task: {err}") from None
    train, test = ds.split((1.0 - cfg.test_fraction, cfg.test_fraction), seed=data_seed)
    if cfg.noise is not None:
        nz = {k: v for k, v in cfg.noise.items() if k != "seed"}
        base = int(cfg.noise.get("seed", 0)) + 1000 * data_seed
        train, _ = corrupt_dataset(train, NoiseModel(**nz, seed=base))
        test, _ = corrupt_dataset(test, NoiseModel(**nz, seed=base + 1))
    return train, test


def train_config(cfg: ExperimentConfig, train: Dataset, t: float, seed: int) -> TrainConfig:
    d = copy.deepcopy(cfg.train)
    clf = dict(d.pop("classifier", {}))
    clf.update(n_channels=train.n_channels, n_samples=train.n_samples,
               n_classes=train.n_classes)
    d.update(target_rate=min(float(t), 1.0), seed=seed, use_dsf=cfg.dsf, classifier=clf)
    return TrainConfig.from_dict(d)


def _step1(cfg: ExperimentConfig, tcfg: TrainConfig, tr: Dataset, va: Dataset, m: int,
           seed: int, cache_dir: Path):
    """Step 1 does not depend on T, so it is cached per (task, M, seed)."""
    key = tcfg.to_dict()
    for k in ("target_rate", "topology"):
        key.pop(k)
    h = _digest({"task": cfg.task, "noise": cfg.noise, "test": cfg.test_fraction,
                 "M": m, "seed": seed, "train": key})
    ck_path = cache_dir / f"step1-{h}.npz"
    hist_path = cache_dir / f"step1-{h}.json"
    if ck_path.exists() and hist_path.exists():
        history = json.loads(hist_path.read_text(encoding="utf-8"))
        return Checkpoint.load(ck_path).build_model(), history
    res = train_step1(tcfg, tr, va)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = ck_path.with_suffix(f".{os.getpid()}.tmp")
    res.checkpoint.save(tmp)
    os.replace(tmp, ck_path)
    hist_path.write_text(json.dumps(res.fit.history, sort_keys=True, default=_jsonable),
                         encoding="utf-8")
    return res.model, json.loads(hist_path.read_text(encoding="utf-8"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def _accuracy(model, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float((model.predict(ds.X)["logits"].argmax(1) == ds.y).mean())


def _precision(masks: np.ndarray, ds: Dataset) -> float | None:
    if ds.informative is None or not masks.any():
        return None
    return float((masks & ds.informative).sum() / masks.sum())


def run_cell(cfg_dict: dict, m: int, t: float, seed: int) -> dict:
    """Train and evaluate one (M, T, seed) cell; returns rows and metrics."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = cfg.output_path()
    cell_dir = out / "cells" / cell_hash(cfg, m, t, seed)
    cell_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_task(cfg, m, seed)
    tcfg = train_config(cfg, train, t, seed)
    tr, va = carve_validation(train, tcfg)
    metrics = MetricsLog()
    stage = "step1"
    try:
        base, history = _step1(cfg, tcfg, tr, va, m, seed, out / "cache")
        for rec in history:
            metrics.write(**rec)
        base_acc = _accuracy(base, test)
        rows = []
        if t >= 1.0:
            # unconstrained: every node always transmits
            for topo in cfg.topologies:
                rows.append(_row(m, topo, t, seed, 1.0, base_acc, base_acc, 1.0, base_acc,
                                 None, None, None, np.ones(m)))
            return {"rows": rows, "metrics": metrics.records, "error": None}

        stage = "step2"
        model = train_step2(tcfg, base, tr, va, metrics).model
        if cfg.dsf:
            stage = "step3"
            model = train_step3(tcfg, model, tr, va, metrics).model
        models = {Topology.CENTRALIZED.value: model}
        distill = {}
        for topo in cfg.topologies:
            if topo == Topology.CENTRALIZED.value:
                continue
            stage = f"step4-{topo}"
            res, dist = train_step4(tcfg, model, topo, tr, va, metrics)
            models[topo] = res.model
            distill[topo] = (dist.agreement(test.X), dist.fit.best_val)
        rand_model = None
        if cfg.random_baseline:
            stage = "random"
            rand_model = train_random_selection(tcfg, base, t, tr, va, metrics).model
        stage = "simulate"
        for topo in cfg.topologies:
            sim = simulate(test, models[topo], topo)
            sim.ledger.export(cell_dir / f"ledger-{topo}.csv")
            sim.export_mask_log(cell_dir / f"masks-{topo}.jsonl")
            if cfg.save_checkpoints:
                Checkpoint(topo, tcfg.to_dict(), models[topo].state_dict(), topology=topo,
                           has_dsf=cfg.dsf, stages=models[topo].stages
                           ).save(cell_dir / f"model-{topo}.npz")
            r_rate, r_acc = None, None
            if rand_model is not None:
                rb = random_baseline(test, rand_model, sim.r_max, seed=seed + 7919)
                r_rate, r_acc = rb.r_max, rb.accuracy
            agree, bce = distill.get(topo, (None, None))
            rows.append(_row(m, topo, t, seed, sim.r_max, sim.accuracy, base_acc, r_rate, r_acc,
                             _precision(sim.masks, test), agree, bce, sim.selection_rates))
        return {"rows": rows, "metrics": metrics.records, "error": None}
    except (StageError, FloatingPointError, ValueError, RuntimeError) as err:
        tag = err.stage if isinstance(err, StageError) else stage
        log.error("cell M=%s T=%s seed=%s failed in %s: %s", m, t, seed, tag, err)
        return {"rows": [], "metrics": metrics.records,
                "error": {"M": m, "T": t, "seed": seed, "stage": tag, "message": str(err),
                          "trace": traceback.format_exc(limit=3)}}


def _row(m, topo, t, seed, r_max, acc, base_acc, r_rate, r_acc, prec, agree, bce, rates):
    return {
        "M": m, "topology": topo, "T": t, "seed": seed, "R_max": r_max, "test_accuracy": acc,
        "baseline_accuracy": base_acc, "random_R_max": r_rate, "random_accuracy": r_acc,
        "precision": prec, "distill_agreement": agree, "distill_bce": bce,
        "violation": r_max is not None and r_max > t + VIOLATION_SLACK,
        "node_rates": [float(r) for r in rates] if rates is not None else None,
    }


# ------------------------------------------------------------------ output


def fmt(v) -> str:
    """Fixed, locale-free text for result tables."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "N/A"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(fmt(x) for x in v)
    return str(v)


def write_table(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _sort_key(r: dict):
    order = {t.value: i for i, t in enumerate(Topology)}
    return (r["M"], order.get(r["topology"], 9), r["T"], r["seed"])


def long_format(rows: list[dict]) -> list[dict]:
    out = []
    for r in rows:
        for method, acc, rate in (("dynamic", r["test_accuracy"], r["R_max"]),
                                  ("random", r["random_accuracy"], r["random_R_max"])):
            if acc is None:
                continue
            for metric, value in (("accuracy", acc), ("R_max", rate)):
                out.append({"M": r["M"], "topology": r["topology"], "T": r["T"],
                            "seed": r["seed"], "method": method, "metric": metric,
                            "value": value})
    return out


def _mean_std(xs: list[float]) -> tuple[float, float | None]:
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), (float(a.std(ddof=1)) if len(a) > 1 else None)


def comparison_table(rows: list[dict]) -> list[dict]:
    """Dynamic vs random accuracy per (M, topology, T) at matched R_max."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["random_accuracy"] is not None:
            groups.setdefault((r["M"], r["topology"], r["T"]), []).append(r)
    out = []
    for (m, topo, t), rs in sorted(groups.items(), key=lambda kv: _sort_key(
            {"M": kv[0][0], "topology": kv[0][1], "T": kv[0][2], "seed": 0})):
        n = len(rs)
        dm, ds = _mean_std([r["test_accuracy"] for r in rs])
        rm, rsd = _mean_std([r["random_accuracy"] for r in rs])
        se = math.sqrt(((ds or 0.0) ** 2 + (rsd or 0.0) ** 2) / n)
        dr = float(np.mean([r["R_max"] for r in rs]))
        rr = float(np.mean([r["random_R_max"] for r in rs]))
        out.append({"M": m, "topology": topo, "T": t, "n": n, "dynamic_accuracy": dm,
                    "random_accuracy": rm, "difference": dm - rm, "pooled_se": se,
                    "dynamic_R_max": dr, "random_R_max": rr,
                    "matched": abs(dr - rr) <= VIOLATION_SLACK})
    return out


COMPARISON_COLUMNS = ["M", "topology", "T", "n", "dynamic_accuracy", "random_accuracy",
                      "difference", "pooled_se", "dynamic_R_max", "random_R_max", "matched"]


def metric_rows(m: int, t: float, seed: int, records: list[dict]) -> list[dict]:
    return [{"M": m, "T": t, "seed": seed, **rec} for rec in records]


@dataclass
class SweepOutcome:
    rows: list[dict]
    failures: list[dict]
    output_dir: Path


def run_experiment(cfg: ExperimentConfig) -> SweepOutcome:
    """Run (or resume) every cell and write the aggregate tables."""
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True),
                                     encoding="utf-8")
    # cells sharing (M, seed) run back to back so the step-1 cache is warm
    cells = [(m, t, s) for m in cfg.n_channels for s in cfg.seeds for t in cfg.targets]
    todo, results = [], {}
    for c in cells:
        done = out / "cells" / cell_hash(cfg, *c) / "result.json"
        if done.exists():
            results[c] = json.loads(done.read_text(encoding="utf-8"))
        else:
            todo.append(c)
    cfg_dict = cfg.to_dict()
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futs = {c: pool.submit(run_cell, cfg_dict, *c) for c in todo}
            fresh = {c: f.result() for c, f in futs.items()}
    else:
        fresh = {c: run_cell(cfg_dict, *c) for c in todo}
    for c, res in fresh.items():
        res = json.loads(json.dumps(res, sort_keys=True, default=_jsonable))
        results[c] = res
        if res["error"] is None:
            path = out / "cells" / cell_hash(cfg, *c) / "result.json"
            path.write_text(json.dumps(res, sort_keys=True), encoding="utf-8")
    rows, failures, mrows = [], [], []
    for c in cells:
        res = results[c]
        rows.extend(res["rows"])
        mrows.extend(metric_rows(*c, res["metrics"]))
        if res["error"] is not None:
            failures.append(res["error"])
    rows.sort(key=_sort_key)
    write_outputs(out, rows, mrows, failures)
    return SweepOutcome(rows, failures, out)


def write_outputs(out: Path, rows: list[dict], mrows: list[dict], failures: list[dict]) -> None:
    write_table(out / "results.csv", RESULT_COLUMNS, rows)
    write_table(out / "results_long.csv",
                ["M", "topology", "T", "seed", "method", "metric", "value"], long_format(rows))
    write_table(out / "dynamic_vs_random.csv", COMPARISON_COLUMNS, comparison_table(rows))
    write_table(out / "metrics.csv", METRIC_COLUMNS, mrows)
    with open(out / "failures.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for f in failures:
            fh.write(json.dumps(f, sort_keys=True) + "\n")


# ------------------------------------------------------------------ report


def read_results(results_dir: str | Path) -> list[dict]:
    path = Path(results_dir) / "results.csv"
    if not path.exists():
        raise FileNotFoundError(f"no results.csv in {results_dir}")
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            conv = {}
            for k, v in r.items():
                if k in ("M", "seed"):
                    conv[k] = int(v)
                elif k == "topology":
                    conv[k] = v
                elif k == "node_rates":
                    conv[k] = None if v == "N/A" else [float(x) for x in v.split(";")]
                elif k == "violation":
                    conv[k] = v == "1"
                else:
                    conv[k] = None if v == "N/A" else float(v)
            rows.append(conv)
    return rows


@dataclass
class CellSummary:
    M: int
    topology: str
    T: float
    n: int
    accuracy_mean: float
    accuracy_std: float | None
    r_max_mean: float
    r_max_pooled: float | None
    violations: int


def summarize(rows: list[dict]) -> list[CellSummary]:
    if not rows:
        raise ValueError("report needs at least one result row")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["M"], r["topology"], r["T"]), []).append(r)
    out = []
    for (m, topo, t), rs in sorted(groups.items(), key=lambda kv: _sort_key(
            {"M": kv[0][0], "topology": kv[0][1], "T": kv[0][2], "seed": 0})):
        am, asd = _mean_std([r["test_accuracy"] for r in rs])
        rm = [r["R_max"] for r in rs if r["R_max"] is not None]
        rates = [r["node_rates"] for r in rs if r["node_rates"] is not None]
        pooled = float(np.max(np.mean(rates, axis=0))) if rates else None
        out.append(CellSummary(m, topo, t, len(rs), am, asd,
                               float(np.mean(rm)) if rm else float("nan"), pooled,
                               sum(1 for r in rs if r["R_max"] is not None
                                   and r["R_max"] > t + VIOLATION_SLACK)))
    return out


def report(results_dir: str | Path) -> tuple[str, int]:
    """Text summary and the number of rows violating R_max <= T + 0.05."""
    cells = summarize(read_results(results_dir))
    lines = [f"{'M':>3} {'topology':<12} {'T':>5} {'n':>3} {'accuracy':>20} "
             f"{'R_max':>8} {'pooled':>8}  flag"]
    total = 0
    for c in cells:
        acc = fmt(c.accuracy_mean) + (" +- " + fmt(c.accuracy_std) if c.accuracy_std is not None
                                      else "")
        flag = f"VIOLATION x{c.violations}" if c.violations else "ok"
        total += c.violations
        lines.append(f"{c.M:>3} {c.topology:<12} {c.T:>5.2f} {c.n:>3} {acc:>20} "
                     f"{fmt(c.r_max_mean):>8} {fmt(c.r_max_pooled):>8}  {flag}")
    lines.append(f"{len(cells)} cells, {total} constraint violation(s)")
    return "\n".join(lines) + "\n", total
