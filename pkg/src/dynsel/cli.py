"""Command-line driver.

Every subcommand that trains reads an experiment config (YAML) first and then
applies command-line flags on top, so a flag always wins over the file.
Exit codes: 0 success, 1 configuration error, 2 run failure, 3 acceptance
check failure (``report --strict``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import Dataset, SyntheticTaskSpec, export_csv, generate
from .experiment import (
    ConfigError,
    ExperimentConfig,
    fmt,
    load_task,
    report,
    run_experiment,
    train_config,
)
from .training import Checkpoint, MetricsLog, StageError, run_schedule
from .wsn import NoiseModel, SimulationError, corrupt_dataset, random_baseline, simulate

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_CHECK = 0, 1, 2, 3

# flag name -> location in the experiment config
TRAIN_FLAGS = {
    "lr_new": float, "lr_finetune": float, "batch_size": int, "max_epochs": int,
    "early_stop_patience": int, "distill_epochs": int, "lam": float, "tau": float, "tau0": float,
    "feedback_dim": int, "hidden": int, "clip_norm": float,
}
CLASSIFIER_FLAGS = {"n_temporal": int, "n_spatial": int, "pool_kernel": int,
                    "pool_stride": int, "dropout": float}


def _csv_list(kind):
    def parse(s):
        return [kind(x) for x in s.split(",") if x.strip()]
    return parse


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (YAML)")
    for name, kind in {**TRAIN_FLAGS, **CLASSIFIER_FLAGS}.items():
        p.add_argument("--" + name.replace("_", "-"), type=kind, dest=name)
    p.add_argument("--kernels", type=_csv_list(int))
    p.add_argument("--no-dsf", action="store_true", help="leave out the spatial filter")
    p.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynsel", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset file (.npz)")
    g.add_argument("--csv", help="also export the windows as a CSV recording")
    for f in ("n_channels", "n_samples", "n_classes", "n_windows", "k", "seed"):
        g.add_argument("--" + f.replace("_", "-"), type=int, dest=f)
    g.add_argument("--snr", type=float)
    g.add_argument("--policy", choices=["uniform", "groups", "static"])

    t = sub.add_parser("train", help="run the training schedule for one topology")
    _add_overrides(t)
    t.add_argument("--data", help="dataset file (.npz); default: the config task")
    t.add_argument("--topology", choices=["centralized", "distributed", "feedback"])
    t.add_argument("--target-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--n-channels", type=int)
    t.add_argument("--skip-step1", action="store_true")
    t.add_argument("--resume", help="stage checkpoint to continue from")

    s = sub.add_parser("simulate", help="run a trained model through the network emulator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset file (.npz)")
    s.add_argument("--noise-p", type=float, help="channel corruption probability")
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--random-rate", type=float,
                   help="replace the selector by random selection at this rate")
    s.add_argument("--out", help="directory for the ledger and mask log")

    w = sub.add_parser("sweep", help="rate-accuracy sweep over M, T, topology and seed")
    _add_overrides(w)
    w.add_argument("--n-channels", type=_csv_list(int))
    w.add_argument("--targets", type=_csv_list(float))
    w.add_argument("--topologies", type=_csv_list(str))
    w.add_argument("--seeds", type=_csv_list(int))
    w.add_argument("--workers", type=int)

    r = sub.add_parser("report", help="summarise a results directory")
    r.add_argument("results_dir")
    r.add_argument("--strict", action="store_true",
                   help="exit with 3 if any R_max exceeds T + 0.05")
    return ap


def load_config(args) -> ExperimentConfig:
    d = {}
    if getattr(args, "config", None):
        d = ExperimentConfig.from_yaml(args.config).to_dict()
    train = dict(d.get("train", {}))
    clf = dict(train.get("classifier", {}))
    for name in TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            train[name] = getattr(args, name)
    for name in CLASSIFIER_FLAGS:
        if getattr(args, name, None) is not None:
            clf[name] = getattr(args, name)
    if getattr(args, "kernels", None):
        clf["kernels"] = args.kernels
    if clf:
        train["classifier"] = clf
    if getattr(args, "skip_step1", False):
        train["skip_step1"] = True
    d["train"] = train
    if getattr(args, "no_dsf", False):
        d["dsf"] = False
    if getattr(args, "output_dir", None):
        d["output_dir"] = args.output_dir
    for name in ("targets", "topologies", "seeds", "workers"):
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    n = getattr(args, "n_channels", None)
    if n is not None:
        d["n_channels"] = n if isinstance(n, list) else [n]
    if getattr(args, "topology", None):
        d["topologies"] = [args.topology]
    if getattr(args, "target_rate", None) is not None:
        d["targets"] = [args.target_rate]
    if getattr(args, "seed", None) is not None:
        d["seeds"] = [args.seed]
    return ExperimentConfig.from_dict(d)


def cmd_gen_data(args) -> int:
    kw = {f: getattr(args, f) for f in ("n_channels", "n_samples", "n_classes", "n_windows",
                                        "k", "seed", "snr", "policy")
          if getattr(args, f) is not None}
    try:
        ds = generate(SyntheticTaskSpec(**kw))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(args.out)
    if args.csv:
        export_csv(ds, args.csv)
    print(f"wrote {len(ds)} windows of {ds.n_channels}x{ds.n_samples} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    m, t, seed, topo = cfg.n_channels[0], cfg.targets[0], cfg.seeds[0], cfg.topologies[0]
    if args.data:
        ds = Dataset.load(args.data)
        train, test = ds.split((1.0 - cfg.test_fraction, cfg.test_fraction), seed=seed)
    else:
        train, test = load_task(cfg, m, seed)
    tcfg = train_config(cfg, train, t, seed).replace(topology=topo)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    res = run_schedule(tcfg, train, checkpoint_dir=out / "checkpoints",
                       metrics=MetricsLog(metrics_path), resume_from=args.resume)
    final = out / "model.npz"
    last = list(res.stages.values())[-1].checkpoint
    last.save(final)
    sim = simulate(test, res.model) if res.model.scorer is not None else None
    acc = sim.accuracy if sim else float(
        (res.model.predict(test.X)["logits"].argmax(1) == test.y).mean())
    print(f"topology={topo} T={t} seed={seed} test_accuracy={fmt(acc)} "
          f"R_max={fmt(sim.r_max if sim else 1.0)} checkpoint={final}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        ck = Checkpoint.load(args.checkpoint)
        ds = Dataset.load(args.data)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(str(err)) from None
    model = ck.build_model()
    if args.noise_p is not None:
        ds, _ = corrupt_dataset(ds, NoiseModel(p=args.noise_p, seed=args.noise_seed))
    if args.random_rate is not None:
        model.set_scorer(None)
        sim = random_baseline(ds, model, args.random_rate)
    else:
        sim = simulate(ds, model)
    rates = sim.selection_rates
    print(f"accuracy={fmt(sim.accuracy)} R_max={fmt(sim.r_max)} "
          f"rates={fmt(rates) if rates is not None else 'N/A'}")
    if not sim.bandwidth_saving:
        print("centralized topology: every node transmits; masks are diagnostic only")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sim.ledger.export(out / "ledger.csv")
        sim.export_mask_log(out / "masks.jsonl")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    outcome = run_experiment(cfg)
    print(f"{len(outcome.rows)} result rows in {outcome.output_dir}")
    for f in outcome.failures:
        print(f"FAILED M={f['M']} T={f['T']} seed={f['seed']} [{f['stage']}]: {f['message']}",
              file=sys.stderr)
    return EXIT_RUN if outcome.failures else EXIT_OK


def cmd_report(args) -> int:
    try:
        text, violations = report(args.results_dir)
    except (FileNotFoundError, ValueError) as err:
        raise ConfigError(str(err)) from None
    sys.stdout.write(text)
    return EXIT_CHECK if args.strict and violations else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, SimulationError, FloatingPointError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
