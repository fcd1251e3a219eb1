"""Inference-time emulation of the sensor network: per-window transmit
decisions, payload and feedback accounting, the random-selection baseline
and noise-burst corruption."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .gating import Topology
from .model import DynamicSelectionNet


class SimulationError(RuntimeError):
    pass


@dataclass
class TransmissionLedger:
    """Per-node counters. Units: payload in samples, feedback in scalars,
    mask return in bits."""

    n_nodes: int
    window_len: int
    feedback_dim: int = 0
    windows_offered: np.ndarray = None
    windows_transmitted: np.ndarray = None
    payload_units: np.ndarray = None
    feedback_units: np.ndarray = None
    mask_return_bits: np.ndarray = None

    def __post_init__(self):
        for name in ("windows_offered", "windows_transmitted", "payload_units",
                     "feedback_units", "mask_return_bits"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_nodes, dtype=np.int64))

    def record(self, transmit: np.ndarray, feedback: bool = False) -> None:
        """Account one batch of windows; ``transmit`` is a (B, M) boolean array."""
        transmit = np.asarray(transmit, dtype=bool)
        if transmit.ndim != 2 or transmit.shape[1] != self.n_nodes:
            raise SimulationError(f"transmit mask shape {transmit.shape} != (B, {self.n_nodes})")
        b = transmit.shape[0]
        sent = transmit.sum(axis=0)
        self.windows_offered += b
        self.windows_transmitted += sent
        self.payload_units += sent * self.window_len
        if feedback:
            self.feedback_units += b * self.feedback_dim
            self.mask_return_bits += b

    @property
    def rates(self) -> np.ndarray | None:
        """Per-node transmission rate, or None when no window was offered."""
        if not self.windows_offered.any():
            return None
        return self.windows_transmitted / self.windows_offered

    @property
    def r_max(self) -> float | None:
        r = self.rates
        return None if r is None else float(r.max())

    def overhead_fraction(self) -> np.ndarray | None:
        """Feedback scalars over all units a node sends."""
        total = self.payload_units + self.feedback_units
        if not total.any():
            return None
        return np.divide(self.feedback_units, total, out=np.zeros(self.n_nodes),
                         where=total > 0)

    def rows(self) -> list[dict]:
        r = self.rates
        return [
            {
                "node_id": m,
                "windows_offered": int(self.windows_offered[m]),
                "windows_transmitted": int(self.windows_transmitted[m]),
                "rate": "N/A" if r is None else f"{r[m]:.6f}",
                "payload_units": int(self.payload_units[m]),
                "feedback_units": int(self.feedback_units[m]),
                "mask_return_bits": int(self.mask_return_bits[m]),
            }
            for m in range(self.n_nodes)
        ]

    def export(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["node_id"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def pool_ledgers(ledgers: list[TransmissionLedger]) -> TransmissionLedger:
    """Sum the counters of several runs over the same nodes."""
    if not ledgers:
        raise ValueError("nothing to pool")
    first = ledgers[0]
    out = TransmissionLedger(first.n_nodes, first.window_len, first.feedback_dim)
    for led in ledgers:
        if led.n_nodes != first.n_nodes:
            raise ValueError("ledgers cover different node counts")
        for name in ("windows_offered", "windows_transmitted", "payload_units",
                     "feedback_units", "mask_return_bits"):
            getattr(out, name)[...] += getattr(led, name)
    return out


# -------------------------------------------------------------------- noise


@dataclass
class NoiseModel:
    p: float = 0.25
    std_low: float = 0.0
    std_high: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"replacement probability must be in [0, 1], got {self.p}")
        if not 0.0 <= self.std_low <= self.std_high:
            raise ValueError("need 0 <= std_low <= std_high")


def inject_noise(x: np.ndarray, noise: NoiseModel,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace each channel of a (M, L) window or (B, M, L) batch with
    zero-mean Gaussian noise with probability ``p``; the standard deviation is
    drawn per replaced channel. Returns the corrupted copy and the boolean
    corruption mask."""
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    hit = rng.random(lead) < noise.p
    std = rng.uniform(noise.std_low, noise.std_high, size=lead)
    fill = rng.standard_normal(x.shape) * std[..., None]
    return np.where(hit[..., None], fill, x), hit


def corrupt_dataset(ds: Dataset, noise: NoiseModel) -> tuple[Dataset, np.ndarray]:
    """Corrupted copy of ``ds``; a replaced channel no longer counts as informative."""
    X, hit = inject_noise(ds.X, noise)
    inf = ds.informative & ~hit if ds.informative is not None else None
    meta = dict(ds.meta)
    meta["noise"] = {"p": noise.p, "std": [noise.std_low, noise.std_high], "seed": noise.seed}
    return Dataset(X, ds.y, inf, meta), hit


# --------------------------------------------------------------- simulation


@dataclass
class SimulationResult:
    accuracy: float | None
    ledger: TransmissionLedger
    selection_rates: np.ndarray | None
    mask_log: list[dict] = field(default_factory=list)
    bandwidth_saving: bool = True
    masks: np.ndarray | None = None  # (N, M) inference decisions

    @property
    def r_max(self) -> float | None:
        """Highest per-node selection rate of the masks (N/A without windows)."""
        if self.selection_rates is None:
            return None
        return float(self.selection_rates.max())

    def export_mask_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.mask_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _bits(row: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in row)


def _log(masks, y, pred, corruption, offset=0) -> list[dict]:
    out = []
    for i in range(len(y)):
        rec = {"window_id": offset + i, "mask": _bits(masks[i]), "label": int(y[i]),
               "predicted": int(pred[i])}
        if corruption is not None:
            rec["corruption"] = _bits(corruption[i])
        out.append(rec)
    return out


def simulate(ds: Dataset, model: DynamicSelectionNet, topology: str | Topology | None = None,
             noise: NoiseModel | None = None, batch_size: int = 256,
             corruption: np.ndarray | None = None) -> SimulationResult:
    """One logical round per window: (feedback) nodes send C summaries, the
    fusion centre returns the mask; selected nodes send their L samples; the
    classifier runs on what arrived.

    The centralized topology needs every raw window at the fusion centre, so
    its ledger records full transmission; its masks are kept for diagnostics.
    A model without a selector transmits everything.
    """
    if not getattr(model, "stages", None):
        raise SimulationError("model has not been trained")
    topo = None if topology is None else Topology(topology)
    if topo is not None and topo is not model.topology:
        have = None if model.topology is None else model.topology.value
        raise SimulationError(f"topology mismatch: asked for {topo.value}, model has {have}")
    topo = model.topology
    X = ds.X
    if noise is not None:
        X, corruption = inject_noise(X, noise)
    n, m, L = X.shape
    c = model.scorer.feedback_dim if topo is Topology.FEEDBACK else 0
    ledger = TransmissionLedger(m, L, c)
    if n == 0:
        return SimulationResult(None, ledger, None, [], topo is not Topology.CENTRALIZED)
    out = model.predict(X, batch_size)
    masks = out["mask"]
    pred = out["logits"].argmax(axis=1)
    for s in range(0, n, batch_size):
        mk = masks[s:s + batch_size]
        if topo is None or topo is Topology.CENTRALIZED:
            ledger.record(np.ones_like(mk), feedback=False)
        else:
            arrived = X[s:s + batch_size] * mk[..., None]
            # a node that was not selected must not put payload on the air
            if np.any(arrived[~mk] != 0):
                raise SimulationError("payload leaked from a non-selected node")
            ledger.record(mk, feedback=topo is Topology.FEEDBACK)
    acc = float((pred == ds.y).mean())
    rates = masks.mean(axis=0) if topo is not None else np.ones(m)
    return SimulationResult(acc, ledger, rates, _log(masks, ds.y, pred, corruption),
                            topo is not Topology.CENTRALIZED, masks)


def random_masks(n: int, m: int, rate: float, rng: np.random.Generator,
                 balanced: bool = True) -> np.ndarray:
    """(n, m) random transmit decisions, each with marginal probability ``rate``.

    ``balanced`` draws, for every node independently, a uniformly random set of
    round(rate * n) windows, so each node's empirical rate equals ``rate`` up
    to rounding. Otherwise every decision is an independent Bernoulli draw.
    """
    if not balanced:
        return rng.random((n, m)) < rate
    out = np.zeros((n, m), dtype=bool)
    k = int(round(rate * n))
    for j in range(m):
        out[rng.permutation(n)[:k], j] = True
    return out


def random_baseline(ds: Dataset, model: DynamicSelectionNet, rate: float, seed: int = 0,
                    batch_size: int = 256, balanced: bool = True) -> SimulationResult:
    """Every node transmits each window at random with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    n, m, L = ds.X.shape
    ledger = TransmissionLedger(m, L)
    if n == 0:
        return SimulationResult(None, ledger, None, [])
    masks = random_masks(n, m, rate, np.random.default_rng(seed), balanced)
    out = model.predict(ds.X, batch_size, fixed_mask=masks)
    pred = out["logits"].argmax(axis=1)
    ledger.record(masks)
    return SimulationResult(float((pred == ds.y).mean()), ledger, masks.mean(axis=0),
                            _log(masks, ds.y, pred, None), True, masks)
