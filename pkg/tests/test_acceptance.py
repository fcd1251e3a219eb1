"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The sweep-based criteria share session fixtures, so the desk-scale sweep runs
once. Expect roughly half an hour on one CPU core.
"""

import math
from pathlib import Path

import numpy as np
import pytest

from dynsel.autodiff import Tensor, ops
from dynsel.experiment import ExperimentConfig, comparison_table, run_experiment
from dynsel.gating import GumbelConfig, Mode, sample_mask
from dynsel.msfbcnn import MSFBCNN, ClassifierConfig, param_count_closed_form

from .gradcheck import probe_gradients, rel_err
from .test_autodiff import CASES, N_PROBES

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
TOPOLOGIES = ("centralized", "distributed", "feedback")


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return say


def _desk(tmp, **kw):
    d = ExperimentConfig.from_yaml(DESK).to_dict()
    d.update(output_dir=str(tmp), save_checkpoints=False, **kw)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="session")
def desk_rows(tmp_path_factory):
    out = run_experiment(_desk(tmp_path_factory.mktemp("desk")))
    assert not out.failures, out.failures
    return out.rows


def _by(rows, **kw):
    return [r for r in rows if all(r[k] == v for k, v in kw.items())]


def _mean_sd(xs):
    a = np.asarray(xs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)), len(a)


def _eps(a, b):
    """Two pooled standard errors of the difference of two seed means."""
    _, sa, na = _mean_sd(a)
    _, sb, nb = _mean_sd(b)
    return 2.0 * math.sqrt(sa**2 / na + sb**2 / nb)


class TestAcceptance:
    def test_01_gradient_correctness(self, verdict):
        worst, count = {}, 0
        for name, (fn, arrays, tol) in sorted(CASES.items()):
            errs = probe_gradients(fn, arrays, N_PROBES, np.random.default_rng(11))
            count += len(errs) >= N_PROBES
            worst[name] = (max(errs), tol)
        # straight-through composite: analytic gradient through the hard gate
        # against differences of the relaxed graph under frozen noise
        rng = np.random.default_rng(12)
        alpha = rng.standard_normal((4, 5))
        noise = (rng.gumbel(size=(4, 5)), rng.gumbel(size=(4, 5)))
        w = rng.standard_normal((4, 5))
        cfg = GumbelConfig(tau=0.7)

        def loss(a, hard):
            mk = sample_mask(a, cfg, Mode.TRAINING, noise=noise)
            return ops.sum(ops.mul(mk.z_hard if hard else mk.z_soft, w))

        a = Tensor(alpha, requires_grad=True)
        loss(a, True).backward()
        errs = []
        for p in range(N_PROBES):
            idx = (p % 4, (p // 4) % 5)
            hi, lo = alpha.copy(), alpha.copy()
            hi[idx] += 1e-5
            lo[idx] -= 1e-5
            fd = (loss(Tensor(hi), False).item() - loss(Tensor(lo), False).item()) / 2e-5
            errs.append(rel_err(a.grad[idx], fd))
        worst["straight_through_composite"] = (max(errs), 1e-4)
        bad = {k: v for k, v in worst.items() if v[0] >= v[1]}
        ok = verdict(1, not bad and count == len(CASES),
                     f"{len(worst)} checks x {N_PROBES} probes, worst "
                     f"{max(e for e, _ in worst.values()):.1e}, failing {sorted(bad)}")
        assert ok

    def test_02_sampling_law(self, verdict):
        n, worst = 100_000, 0.0
        for alpha in (-2.0, -0.5, 0.0, 0.5, 2.0):
            for tau in (0.1, 1.0, 5.0):
                mk = sample_mask(Tensor(np.full((n, 1), alpha)), GumbelConfig(tau=tau),
                                 Mode.TRAINING, np.random.default_rng(int(1000 * tau + alpha)))
                p = 1.0 / (1.0 + math.exp(-alpha))
                z = abs(mk.bits.mean() - p) / math.sqrt(p * (1 - p) / n)
                worst = max(worst, z)
        ok = verdict(2, worst <= 3.0, f"15 (alpha, tau) pairs, worst deviation {worst:.2f} sigma")
        assert ok

    def test_03_constraint_satisfaction(self, desk_rows, verdict):
        bad = [(r["topology"], r["T"], r["seed"], r["R_max"]) for r in desk_rows
               if r["R_max"] > r["T"] + 0.05]
        worst = max(r["R_max"] - r["T"] for r in desk_rows)
        ok = verdict(3, len(desk_rows) == 45 and not bad,
                     f"{len(desk_rows)} runs, max R_max - T = {worst:+.3f}, violations {bad}")
        assert ok

    def test_04_dynamic_beats_random(self, desk_rows, verdict):
        cells = [c for c in comparison_table(desk_rows) if c["T"] <= 0.5]
        lines, ok = [], len(cells) == 6
        for c in cells:
            good = c["matched"] and c["n"] == 5 and c["difference"] > 2 * c["pooled_se"]
            ok &= good
            lines.append(f"{c['topology']}@{c['T']:.1f} diff {c['difference']:+.3f} "
                         f"(2SE {2 * c['pooled_se']:.3f})")
        ok = verdict(4, ok, "; ".join(lines))
        assert ok

    def test_05_topology_ordering(self, desk_rows, verdict):
        lines, ok = [], True
        for t in (0.3, 0.5, 0.7):
            acc = {topo: [r["test_accuracy"] for r in _by(desk_rows, T=t, topology=topo)]
                   for topo in TOPOLOGIES}
            mean = {k: float(np.mean(v)) for k, v in acc.items()}
            e_cf = _eps(acc["centralized"], acc["feedback"])
            e_fd = _eps(acc["feedback"], acc["distributed"])
            good = (mean["centralized"] >= mean["feedback"] - e_cf
                    and mean["feedback"] >= mean["distributed"] - e_fd
                    and abs(mean["feedback"] - mean["centralized"]) <= e_cf)
            ok &= good
            lines.append(f"T={t}: c {mean['centralized']:.3f} f {mean['feedback']:.3f} "
                         f"d {mean['distributed']:.3f} (eps {e_cf:.3f}/{e_fd:.3f})")
        ok = verdict(5, ok, "; ".join(lines))
        assert ok

    def test_06_distillation_fidelity(self, desk_rows, verdict):
        lines, ok, n = [], True, 0
        for topo in ("distributed", "feedback"):
            for t in (0.3, 0.5, 0.7):
                rows = _by(desk_rows, T=t, topology=topo)
                n += len(rows)
                agree = float(np.mean([r["distill_agreement"] for r in rows]))
                bce = float(np.mean([r["distill_bce"] for r in rows]))
                ok &= len(rows) == 5 and agree >= 0.85 and bce < 0.3
                lines.append(f"{topo}@{t}: {agree:.3f}/{bce:.3f}")
        low = min(r["distill_agreement"] for r in desk_rows if r["topology"] != "centralized")
        ok = verdict(6, ok and n == 30, "5-seed mean agreement/BCE " + "; ".join(lines)
                     + f"; lowest single run {low:.3f}")
        assert ok

    def test_07_noise_cap(self, tmp_path_factory, verdict):
        cfg = _desk(tmp_path_factory.mktemp("noise"),
                    task={**ExperimentConfig.from_yaml(DESK).task, "k": 8},
                    topologies=["feedback"], targets=[0.9], random_baseline=False,
                    noise={"p": 0.25})
        out = run_experiment(cfg)
        assert not out.failures, out.failures
        rates = [r["R_max"] for r in out.rows]
        acc = np.mean([r["test_accuracy"] for r in out.rows])
        base = np.mean([r["baseline_accuracy"] for r in out.rows])
        in_band = all(0.60 <= x <= 0.80 for x in rates)
        ok = verdict(7, len(rates) == 5 and in_band and acc >= base,
                     f"R_max {min(rates):.3f}..{max(rates):.3f} (band [0.60, 0.80]: "
                     f"{'yes' if in_band else 'no'}); accuracy {acc:.3f} vs no-selection "
                     f"{base:.3f}")
        assert ok

    def test_08_oracle_precision(self, tmp_path_factory, verdict):
        cfg = _desk(tmp_path_factory.mktemp("precision"), topologies=["feedback"],
                    targets=[0.25], random_baseline=False)
        out = run_experiment(cfg)
        assert not out.failures, out.failures
        prec = [r["precision"] for r in out.rows]
        ok = verdict(8, len(prec) == 5 and np.mean(prec) >= 0.8,
                     f"feedback at T=k/M=0.25, precision mean {np.mean(prec):.3f} "
                     f"(seeds {', '.join(f'{p:.3f}' for p in prec)})")
        assert ok

    def test_09_parameter_audit(self, verdict):
        configs = [
            ClassifierConfig.full_size(),
            ClassifierConfig(n_channels=4, n_samples=256, n_temporal=4, n_spatial=8, n_classes=4),
            ClassifierConfig(n_channels=8, n_samples=64, n_temporal=3, n_spatial=5,
                             kernels=(16, 10, 7, 4), pool_kernel=16, pool_stride=8, n_classes=2),
        ]
        pairs = [(MSFBCNN(c, np.random.default_rng(0)).num_parameters(),
                  param_count_closed_form(c)) for c in configs]
        ok = verdict(9, all(a == b for a, b in pairs),
                     "counted vs closed form " + ", ".join(f"{a}/{b}" for a, b in pairs))
        assert ok

    def test_10_determinism(self, tmp_path_factory, verdict):
        def run(tag):
            task = {**ExperimentConfig.from_yaml(DESK).task, "n_windows": 200}
            cfg = _desk(tmp_path_factory.mktemp(tag), task=task, targets=[0.5], seeds=[3],
                        train={**ExperimentConfig.from_yaml(DESK).train, "max_epochs": 3,
                               "early_stop_patience": 2})
            return (run_experiment(cfg).output_dir / "metrics.csv").read_bytes()

        a, b = run("det_a"), run("det_b")
        ok = verdict(10, a == b and len(a) > 0,
                     f"metrics.csv {len(a)} bytes, identical: {a == b}")
        assert ok
