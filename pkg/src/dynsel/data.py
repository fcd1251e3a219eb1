"""Datasets: synthetic tasks with per-window informative channels, bipolar
node emulation from electrode recordings, and CSV ingestion."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT = "dynsel-dataset/1"
STD_FLOOR = 1e-8


@dataclass
class SyntheticTaskSpec:
    """Multi-channel classification where only a per-window subset of k
    channels carries the class signal (a sinusoid at a class-specific
    frequency, given in cycles per window); the rest is white noise.

    ``snr`` is the signal-to-noise power ratio on informative channels;
    ``float('inf')`` removes the noise entirely. ``policy`` picks how the
    informative subset varies: ``uniform`` (any k-subset), ``groups`` (channels
    split into M/k contiguous groups, one group per window), or ``static``
    (always the first k channels).
    """

    n_channels: int = 8
    n_samples: int = 64
    n_classes: int = 4
    n_windows: int = 1000
    k: int = 2
    snr: float = 1.0
    class_freqs: tuple[float, ...] | None = None
    freq_jitter: float = 0.5
    policy: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.class_freqs is not None:
            self.class_freqs = tuple(float(f) for f in self.class_freqs)
        if not 1 <= self.k <= self.n_channels:
            raise ValueError(f"k must be in [1, {self.n_channels}], got {self.k}")
        if self.n_classes < 2 or self.n_windows < 1 or self.n_samples < 2:
            raise ValueError("need n_classes >= 2, n_windows >= 1, n_samples >= 2")
        if self.snr < 0:
            raise ValueError("snr must be nonnegative")
        if self.policy not in ("uniform", "groups", "static"):
            raise ValueError(f"unknown informative-set policy {self.policy!r}")
        if self.policy == "groups" and self.n_channels % self.k:
            raise ValueError("groups policy needs k to divide n_channels")

    def freqs(self) -> np.ndarray:
        if self.class_freqs is not None:
            if len(self.class_freqs) != self.n_classes:
                raise ValueError("class_freqs must list one frequency per class")
            return np.asarray(self.class_freqs)
        # evenly spaced between 3 cycles and 3/8 of the sampling rate
        hi = 0.375 * self.n_samples
        return np.linspace(3.0, hi, self.n_classes)


@dataclass
class Dataset:
    X: np.ndarray  # (N, M, L)
    y: np.ndarray  # (N,)
    informative: np.ndarray | None = None  # (N, M) ground-truth informative set
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} do not align")
        if self.informative is not None:
            self.informative = np.asarray(self.informative, dtype=bool)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.meta.get("n_classes", int(self.y.max()) + 1 if len(self.y) else 0))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        inf = self.informative[idx] if self.informative is not None else None
        return Dataset(self.X[idx], self.y[idx], inf, dict(self.meta))

    def select_channels(self, channels) -> "Dataset":
        ch = list(channels)
        inf = self.informative[:, ch] if self.informative is not None else None
        return Dataset(self.X[:, ch], self.y, inf, dict(self.meta))

    def split(self, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple["Dataset", ...]:
        """Disjoint stratified split; each class is divided by the same fractions."""
        fr = np.asarray(fractions, dtype=float)
        if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
            raise ValueError("split fractions must be nonnegative and sum to 1")
        rng = np.random.default_rng(seed)
        parts: list[list[int]] = [[] for _ in fr]
        for c in np.unique(self.y):
            idx = np.flatnonzero(self.y == c)
            rng.shuffle(idx)
            bounds = np.round(np.cumsum(fr) * len(idx)).astype(int)
            start = 0
            for i, stop in enumerate(bounds):
                parts[i].extend(idx[start:stop].tolist())
                start = stop
        return tuple(self.subset(np.sort(p)) for p in parts)

    def save(self, path: str | Path) -> None:
        meta = {"format": DATASET_FORMAT, **self.meta}
        arrays = {"X": self.X, "y": self.y}
        if self.informative is not None:
            arrays["informative"] = self.informative
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != DATASET_FORMAT:
                raise ValueError(f"{path}: unsupported dataset format {meta.get('format')!r}")
            inf = z["informative"] if "informative" in z.files else None
            meta.pop("format")
            return cls(z["X"], z["y"], inf, meta)


def generate(spec: SyntheticTaskSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n, m, L, nc = spec.n_windows, spec.n_channels, spec.n_samples, spec.n_classes
    y = np.arange(n) % nc
    rng.shuffle(y)

    informative = np.zeros((n, m), dtype=bool)
    if spec.policy == "uniform":
        for i in range(n):
            informative[i, rng.choice(m, size=spec.k, replace=False)] = True
    elif spec.policy == "groups":
        groups = rng.integers(0, m // spec.k, size=n)
        for i, g in enumerate(groups):
            informative[i, g * spec.k:(g + 1) * spec.k] = True
    else:
        informative[:, : spec.k] = True

    t = np.arange(L) / L
    freqs = spec.freqs()[y][:, None] + rng.uniform(-spec.freq_jitter, spec.freq_jitter, (n, m))
    phase = rng.uniform(0, 2 * np.pi, size=(n, m))
    noise = rng.standard_normal((n, m, L))
    if np.isinf(spec.snr):
        amp, noise_scale = np.sqrt(2.0), 0.0
    else:
        amp, noise_scale = np.sqrt(2.0 * spec.snr), 1.0
    signal = amp * np.sin(2 * np.pi * freqs[..., None] * t + phase[..., None])
    X = noise_scale * noise + informative[..., None] * signal
    meta = {"source": "synthetic", "n_classes": nc, "spec": _jsonable(asdict(spec))}
    return Dataset(X, y, informative, meta)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not np.isfinite(v):
            out[k] = str(v)
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def standardize_channels(X: np.ndarray) -> np.ndarray:
    """Per-channel zero mean / unit variance over all windows and samples."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=(0, 2), keepdims=True)
    sd = np.maximum(X.std(axis=(0, 2), keepdims=True), STD_FLOOR)
    return (X - mu) / sd


# ------------------------------------------------------------ bipolar nodes


@dataclass
class ElectrodeLayout:
    names: list[str]
    coords: np.ndarray  # (E, 2) in cm
    d_max: float = 3.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape != (len(self.names), 2):
            raise ValueError("coords must be (E, 2) with one row per electrode name")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("electrode coordinates must be finite")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")


@dataclass
class BipolarNodes:
    pairs: list[tuple[int, int]]
    distances: np.ndarray
    signals: np.ndarray  # recordings[..., i, :] - recordings[..., j, :] per pair

    @property
    def count(self) -> int:
        return len(self.pairs)

    @property
    def mean_distance(self) -> float:
        return float(self.distances.mean()) if self.count else float("nan")

    @property
    def std_distance(self) -> float:
        return float(self.distances.std()) if self.count else float("nan")


def bipolar_pairs(layout: ElectrodeLayout, recordings: np.ndarray) -> BipolarNodes:
    """One emulated node per electrode pair within ``d_max``; signal = first - second.

    ``recordings`` has the electrode axis second to last: (E, T) or (N, E, T).
    """
    rec = np.asarray(recordings, dtype=np.float64)
    e = len(layout.names)
    if e < 2:
        raise ValueError("need at least two electrodes")
    if rec.ndim < 2 or rec.shape[-2] != e:
        raise ValueError(f"recordings must have {e} electrodes on axis -2, got {rec.shape}")
    pairs, dists = [], []
    for i in range(e):
        for j in range(i + 1, e):
            d = float(np.linalg.norm(layout.coords[i] - layout.coords[j]))
            if d <= layout.d_max:
                pairs.append((i, j))
                dists.append(d)
    if not pairs:
        warnings.warn(f"no electrode pair within {layout.d_max} cm", stacklevel=2)
        shape = rec.shape[:-2] + (0, rec.shape[-1])
        return BipolarNodes([], np.zeros(0), np.zeros(shape))
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    signals = rec[..., a, :] - rec[..., b, :]
    nodes = BipolarNodes(pairs, np.asarray(dists), signals)
    log.info("bipolar nodes: %d pairs, distance %.2f +- %.2f cm", nodes.count,
             nodes.mean_distance, nodes.std_distance)
    return nodes


# ---------------------------------------------------------------------- CSV


class CsvFormatError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")


@dataclass
class CsvSchema:
    """Rows are time samples, columns channels.

    Labels come from ``label_column`` (default ``y``) or, if ``labels_path``
    is given, from a one-column sidecar file with one label per data row.
    A window takes the label of its first row; windows whose rows carry more
    than one label are dropped.
    """

    window: int
    stride: int | None = None
    label_column: str = "y"
    labels_path: str | None = None
    standardize: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window length must be >= 1")
        if self.stride is None:
            self.stride = self.window
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _read_table(path: Path) -> tuple[list[str], list[list[str]], list[int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, None, "empty file") from None
        rows, lines = [], []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, reader.line_num,
                                     f"expected {len(header)} fields, got {len(row)}")
            rows.append(row)
            lines.append(reader.line_num)
    return [h.strip() for h in header], rows, lines


def _to_float(path, line, cell) -> float:
    try:
        return float(cell)
    except ValueError:
        raise CsvFormatError(path, line, f"non-numeric cell {cell!r}") from None


def ingest_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    header, rows, lines = _read_table(path)
    if not rows:
        raise CsvFormatError(path, None, "no data rows")
    if schema.labels_path is not None:
        lab_header, lab_rows, lab_lines = _read_table(Path(schema.labels_path))
        if len(lab_rows) != len(rows):
            raise CsvFormatError(schema.labels_path, None,
                                 f"{len(lab_rows)} labels for {len(rows)} data rows")
        labels = [int(_to_float(schema.labels_path, ln, r[0])) for r, ln in zip(lab_rows, lab_lines)]
        channels = header
        data = [[_to_float(path, ln, c) for c in r] for r, ln in zip(rows, lines)]
    else:
        if schema.label_column not in header:
            raise CsvFormatError(path, 1, f"label column {schema.label_column!r} not in header")
        li = header.index(schema.label_column)
        channels = [h for i, h in enumerate(header) if i != li]
        labels, data = [], []
        for r, ln in zip(rows, lines):
            labels.append(int(_to_float(path, ln, r[li])))
            data.append([_to_float(path, ln, c) for i, c in enumerate(r) if i != li])
    sig = np.asarray(data, dtype=np.float64).T  # (M, T)
    lab = np.asarray(labels, dtype=np.int64)
    if schema.standardize:
        sig = standardize_channels(sig[None])[0]
    L, step = schema.window, schema.stride
    starts = range(0, sig.shape[1] - L + 1, step)
    X, y, dropped = [], [], 0
    for s in starts:
        w_lab = lab[s:s + L]
        if np.any(w_lab != w_lab[0]):
            dropped += 1
            continue
        X.append(sig[:, s:s + L])
        y.append(w_lab[0])
    if dropped:
        log.warning("%s: dropped %d windows spanning a label change", path, dropped)
    X = np.stack(X) if X else np.zeros((0, sig.shape[0], L))
    n_classes = int(lab.max()) + 1 if len(lab) else 0
    meta = {"source": str(path), "channels": channels, "n_classes": n_classes,
            "window": L, "stride": step}
    return Dataset(X, np.asarray(y, dtype=np.int64), None, meta)


def export_csv(ds: Dataset, path: str | Path, label_column: str = "y") -> None:
    """Write windows back to back as one recording, round-trip exact."""
    names = ds.meta.get("channels") or [f"ch{i}" for i in range(ds.n_channels)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, label_column])
        for X, y in zip(ds.X, ds.y):
            for t in range(X.shape[1]):
                w.writerow([repr(float(v)) for v in X[:, t]] + [int(y)])
