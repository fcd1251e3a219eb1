"""Joint loss, the four-step training schedule, selector distillation,
early stopping and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Adam, NonFiniteGradientError, Tensor, backward, no_grad, ops
from .data import Dataset
from .dsf import DynamicSpatialFilter
from .gating import (
    MIN_BATCH_FOR_BUDGET,
    GumbelConfig,
    SparsityBudget,
    Topology,
    make_scorer,
    node_rates_proxy,
    sparsity_loss,
)
from .model import DynamicSelectionNet
from .msfbcnn import MSFBCNN, ClassifierConfig, FilterBankTrunk
from .nn import Module

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dynsel-checkpoint/1"
STAGES = ("step1", "step2", "step3", "step4-distill", "step4")
STAGE_INDEX = {"step1": 1, "step2": 2, "step3": 3, "step4-distill": 4, "step4": 5, "random": 6}


class StageError(RuntimeError):
    """Training failure tagged with the stage it happened in."""

    def __init__(self, stage: str, msg: str):
        self.stage = stage
        super().__init__(f"[{stage}] {msg}")


@dataclass
class TrainConfig:
    lr_new: float = 1e-3
    lr_finetune: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    distill_epochs: int | None = None  # epoch cap for distillation; None means max_epochs
    lam: float = 10.0
    tau: float = 1.0
    tau0: float = 0.1
    target_rate: float = 0.5
    topology: str = "feedback"
    seed: int = 0
    use_dsf: bool = True
    feedback_dim: int = 10
    hidden: int = 50
    val_fraction: float = 0.2
    clip_norm: float | None = None
    skip_step1: bool = False
    freeze_finetune_stats: bool = True
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        self.topology = Topology(self.topology).value
        if not self.lr_new > self.lr_finetune > 0:
            raise ValueError("need lr_new > lr_finetune > 0")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError("need 1 <= early_stop_patience <= max_epochs")
        if self.distill_epochs is not None and self.distill_epochs < self.early_stop_patience:
            raise ValueError("need distill_epochs >= early_stop_patience")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        SparsityBudget(self.target_rate, self.lam, self.tau0)
        GumbelConfig(self.tau)

    @property
    def budget(self) -> SparsityBudget:
        return SparsityBudget(self.target_rate, self.lam, self.tau0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifier"]["kernels"] = list(d["classifier"]["kernels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(seed + STAGE_INDEX[stage])


# -------------------------------------------------------------------- losses


def joint_loss(logits, y, alpha_batch, budget: SparsityBudget) -> Tensor:
    """Mean cross-entropy plus lambda times the mini-max sparsity loss."""
    ce = ops.cross_entropy(logits, y)
    if alpha_batch is None or budget.lam == 0:
        return ce
    return ops.add(ce, ops.mul(sparsity_loss(alpha_batch, budget), budget.lam))


def distillation_loss(alpha_student, alpha_teacher: np.ndarray) -> Tensor:
    """BCE(sigmoid(alpha_student), round(sigmoid(alpha_teacher)))."""
    target = (alpha_teacher > 0).astype(np.float64)
    return ops.binary_cross_entropy(ops.sigmoid(alpha_student), target)


# ------------------------------------------------------------------- logging


class MetricsLog:
    """One JSON object per epoch, appended to a file and kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, **rec) -> None:
        rec = {k: _plain(v) for k, v in rec.items()}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _plain(v):
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        return round(float(v), 10)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    stage: str
    config: dict
    state: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    val_loss: float = float("nan")
    rng_state: dict | None = None
    topology: str | None = None
    has_dsf: bool = False
    stages: list[str] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "stage": self.stage,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "config": self.config,
            "rng_state": self.rng_state,
            "topology": self.topology,
            "has_dsf": self.has_dsf,
            "stages": self.stages,
            "layout": [{"name": k, "shape": list(v.shape)} for k, v in self.state.items()],
        }
        blobs = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64)
                 for k, v in self.state.items()}
        blobs.update({f"opt/{k}": v for k, v in self.optimizer.items()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **blobs)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not a checkpoint ({meta.get('format')!r})")
            state = {e["name"]: z[f"param/{e['name']}"] for e in meta["layout"]}
            opt = {k[4:]: z[k] for k in z.files if k.startswith("opt/")}
        return cls(meta["stage"], meta["config"], state, opt, meta["epoch"], meta["val_loss"],
                   meta["rng_state"], meta["topology"], meta["has_dsf"], meta["stages"])

    def build_model(self) -> DynamicSelectionNet:
        cfg = TrainConfig.from_dict(self.config)
        model = build_model(cfg, self.topology, self.has_dsf)
        model.load_state_dict(self.state)
        model.stages = list(self.stages)
        model.eval()
        return model


def build_model(cfg: TrainConfig, topology: str | Topology | None, use_dsf: bool,
                rng: np.random.Generator | None = None) -> DynamicSelectionNet:
    rng = rng or np.random.default_rng(cfg.seed)
    ccfg = cfg.classifier
    scorer = None
    if topology is not None:
        scorer = make_scorer(topology, ccfg, rng, cfg.feedback_dim, cfg.hidden)
    dsf = DynamicSpatialFilter(ccfg.n_channels, rng, cfg.hidden) if use_dsf else None
    return DynamicSelectionNet(MSFBCNN(ccfg, rng), scorer, dsf, GumbelConfig(cfg.tau, cfg.seed))


def checkpoint_of(model: DynamicSelectionNet, cfg: TrainConfig, stage: str,
                  fit: "FitResult | None" = None) -> Checkpoint:
    return Checkpoint(
        stage=stage,
        config=cfg.to_dict(),
        state=model.state_dict(),
        optimizer=fit.optimizer_state if fit else {},
        epoch=fit.best_epoch if fit else 0,
        val_loss=fit.best_val if fit else float("nan"),
        rng_state=fit.rng_state if fit else None,
        topology=None if model.topology is None else model.topology.value,
        has_dsf=model.dsf is not None,
        stages=list(model.stages),
    )


# ------------------------------------------------------------------ fitting


@dataclass
class FitResult:
    best_epoch: int
    best_val: float
    epochs_run: int
    history: list[dict]
    optimizer_state: dict[str, np.ndarray]
    lrs: dict[str, float]
    rng_state: dict | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm]
    # drop the ragged tail so the sparsity batch mean is always over batch_size samples
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def fit(model, groups: dict[str, dict[str, Tensor]], lrs: dict[str, float],
        loss_fn: Callable, val_fn: Callable, train: Dataset, cfg: TrainConfig, stage: str,
        rng: np.random.Generator, metrics: MetricsLog | None = None) -> FitResult:
    """Mini-batch Adam with early stopping; leaves ``model`` at its best-validation state."""
    opt = Adam(groups, lrs, clip_norm=cfg.clip_norm)
    all_params = model.named_parameters()
    best_state = model.state_dict()
    best_opt = opt.state_dict()
    best_val, best_epoch, stale = math.inf, 0, 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            for p in all_params.values():
                p.grad = None
            loss = loss_fn(model, train.X[idx], train.y[idx], rng)
            if not np.isfinite(loss.data).all():
                raise StageError(stage, f"loss diverged at epoch {epoch}")
            backward(loss)
            try:
                opt.step()
            except NonFiniteGradientError as err:
                raise StageError(stage, str(err)) from err
            total += loss.item() * len(idx)
            count += len(idx)
        model.eval()
        with no_grad():
            val_loss, extra = val_fn(model)
        if not math.isfinite(val_loss):
            raise StageError(stage, f"validation loss diverged at epoch {epoch}")
        rec = {"stage": stage, "epoch": epoch, "train_loss": total / max(count, 1),
               "val_loss": val_loss, **extra}
        history.append(rec)
        if metrics is not None:
            metrics.write(**rec)
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = model.state_dict()
            best_opt = opt.state_dict()
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    if isinstance(getattr(model, "stages", None), list):
        model.stages = [*model.stages, stage]
    return FitResult(best_epoch, best_val, epoch, history, best_opt,
                     {n: opt.lr_of(n) for n in opt.named_params()},
                     rng.bit_generator.state)


def _eval_batches(n: int, size: int = 256):
    return [slice(s, s + size) for s in range(0, n, size)]


def selection_val_fn(val: Dataset, budget: SparsityBudget | None):
    """Validation objective with deterministic (inference-mode) masks."""

    def fn(model: DynamicSelectionNet):
        ce_sum, correct, alphas, hits, picked = 0.0, 0, [], 0, 0
        for sl in _eval_batches(len(val)):
            out = model(val.X[sl])
            ce_sum += ops.cross_entropy(out.logits, val.y[sl]).item() * len(val.y[sl])
            correct += int((out.logits.data.argmax(1) == val.y[sl]).sum())
            if out.scores is not None:
                alphas.append(out.scores.alpha.data)
                if val.informative is not None:
                    hits += int((out.mask.bits & val.informative[sl]).sum())
                    picked += int(out.mask.bits.sum())
        loss = ce_sum / len(val)
        extra = {"val_acc": correct / len(val)}
        if alphas and budget is not None:
            a = np.concatenate(alphas)
            loss += budget.lam * sparsity_loss(a, budget).item()
            extra["soft_rates"] = node_rates_proxy(a, budget.tau0).data
            extra["hard_rates"] = (a > 0).mean(axis=0)
            if val.informative is not None:
                extra["precision"] = hits / picked if picked else float("nan")
        return loss, extra

    return fn


def selection_loss_fn(budget: SparsityBudget | None):
    def fn(model: DynamicSelectionNet, X, y, rng):
        out = model(X, rng)
        alpha = out.scores.alpha if out.scores is not None else None
        if budget is None:
            alpha = None
        return joint_loss(out.logits, y, alpha, budget or SparsityBudget(1.0, 0.0))

    return fn


def _group(module, prefix: str) -> dict[str, Tensor]:
    return module.named_parameters(prefix)


def set_frozen_stats(module: Module, frozen: bool) -> None:
    """Make every filter-bank trunk under ``module`` keep (or stop keeping)
    its normalisation statistics fixed while training."""
    if isinstance(module, FilterBankTrunk):
        module.freeze_stats = frozen
    for c in module.children.values():
        set_frozen_stats(c, frozen)


def _prepare_groups(model: DynamicSelectionNet, cfg: TrainConfig, lrs: dict[str, float]) -> None:
    # pretrained modules being fine-tuned keep their running statistics
    for name, lr in lrs.items():
        mod = model.children.get(name)
        if mod is not None:
            set_frozen_stats(mod, cfg.freeze_finetune_stats and lr == cfg.lr_finetune)


def _check_batch(cfg: TrainConfig) -> None:
    if cfg.target_rate < 1.0 and cfg.batch_size < MIN_BATCH_FOR_BUDGET:
        warnings.warn(
            f"batch size {cfg.batch_size} < {MIN_BATCH_FOR_BUDGET}: the batch mean is a poor "
            "estimate of the per-node transmission rate", stacklevel=3)


# ------------------------------------------------------------------- stages


@dataclass
class StageResult:
    model: DynamicSelectionNet
    fit: FitResult | None
    checkpoint: Checkpoint


def train_step1(cfg: TrainConfig, train: Dataset, val: Dataset,
                metrics: MetricsLog | None = None) -> StageResult:
    """Bare classifier on unmasked input."""
    rng = stage_rng(cfg.seed, "step1")
    model = DynamicSelectionNet(MSFBCNN(cfg.classifier, rng), gumbel=GumbelConfig(cfg.tau, cfg.seed))
    res = fit(model, {"classifier": _group(model.classifier, "classifier.")},
              {"classifier": cfg.lr_new}, selection_loss_fn(None), selection_val_fn(val, None),
              train, cfg, "step1", rng, metrics)
    return StageResult(model, res, checkpoint_of(model, cfg, "step1", res))


def train_step2(cfg: TrainConfig, base: DynamicSelectionNet | None, train: Dataset, val: Dataset,
                metrics: MetricsLog | None = None) -> StageResult:
    """Add a centralized selector; fine-tune the classifier.

    With ``base=None`` (step-1 ablation) the classifier is freshly initialised
    and trained at the new-module rate.
    """
    _check_batch(cfg)
    rng = stage_rng(cfg.seed, "step2")
    if base is None:
        classifier = MSFBCNN(cfg.classifier, rng)
        clf_lr = cfg.lr_new
    else:
        classifier = copy.deepcopy(base.classifier)
        clf_lr = cfg.lr_finetune
    scorer = make_scorer(Topology.CENTRALIZED, cfg.classifier, rng)
    model = DynamicSelectionNet(classifier, scorer, gumbel=GumbelConfig(cfg.tau, cfg.seed))
    model.stages = [] if base is None else list(base.stages)
    groups = {"scorer": _group(model.scorer, "scorer."),
              "classifier": _group(model.classifier, "classifier.")}
    lrs = {"scorer": cfg.lr_new, "classifier": clf_lr}
    _prepare_groups(model, cfg, lrs)
    res = fit(model, groups, lrs, selection_loss_fn(cfg.budget),
              selection_val_fn(val, cfg.budget), train, cfg, "step2", rng, metrics)
    return StageResult(model, res, checkpoint_of(model, cfg, "step2", res))


def train_step3(cfg: TrainConfig, base: DynamicSelectionNet, train: Dataset, val: Dataset,
                metrics: MetricsLog | None = None) -> StageResult:
    """Insert the (identity-initialised) spatial filter; fine-tune the rest."""
    _check_batch(cfg)
    rng = stage_rng(cfg.seed, "step3")
    model = copy.deepcopy(base)
    model.set_dsf(DynamicSpatialFilter(cfg.classifier.n_channels, rng, cfg.hidden))
    groups = {"dsf": _group(model.dsf, "dsf.")}
    lrs = {"dsf": cfg.lr_new}
    if model.scorer is not None:
        groups["scorer"] = _group(model.scorer, "scorer.")
        lrs["scorer"] = cfg.lr_finetune
    groups["classifier"] = _group(model.classifier, "classifier.")
    lrs["classifier"] = cfg.lr_finetune
    budget = cfg.budget if model.scorer is not None else None
    _prepare_groups(model, cfg, lrs)
    res = fit(model, groups, lrs, selection_loss_fn(budget), selection_val_fn(val, budget),
              train, cfg, "step3", rng, metrics)
    return StageResult(model, res, checkpoint_of(model, cfg, "step3", res))


def distill_selector(teacher, student, train: Dataset, val: Dataset, cfg: TrainConfig,
                     metrics: MetricsLog | None = None) -> FitResult:
    """Fit ``student`` scores to the teacher's hard inference decisions (BCE).

    The teacher runs in inference mode and is never updated.
    """
    rng = stage_rng(cfg.seed, "step4-distill")
    teacher.eval()
    with no_grad():
        t_train = np.concatenate([teacher(train.X[sl]).alpha.data
                                  for sl in _eval_batches(len(train))])
        t_val = np.concatenate([teacher(val.X[sl]).alpha.data for sl in _eval_batches(len(val))])

    class _Wrapper:
        # adapts fit()'s (model, X, y) protocol to index the teacher targets
        def __init__(self, s):
            self.s = s

        def named_parameters(self, prefix=""):
            return self.s.named_parameters(prefix)

        def state_dict(self):
            return self.s.state_dict()

        def load_state_dict(self, st):
            self.s.load_state_dict(st)

        def train(self, mode=True):
            self.s.train(mode)

        def eval(self):
            self.s.eval()

    train_idx = Dataset(train.X, np.arange(len(train)))

    def loss_fn(w, X, idx, rng_):
        return distillation_loss(w.s(X, rng_).alpha, t_train[idx])

    def val_fn(w):
        total, agree = 0.0, 0.0
        for sl in _eval_batches(len(val)):
            a = w.s(val.X[sl]).alpha
            total += distillation_loss(a, t_val[sl]).item() * a.shape[0]
            agree += float(((a.data > 0) == (t_val[sl] > 0)).mean()) * a.shape[0]
        return total / len(val), {"agreement": agree / len(val)}

    wrapper = _Wrapper(student)
    return fit(wrapper, {"student": student.named_parameters("scorer.")}, {"student": cfg.lr_new},
               loss_fn, val_fn, train_idx,
               cfg.replace(max_epochs=cfg.distill_epochs or cfg.max_epochs), "step4-distill",
               rng, metrics)


@dataclass
class Distillation:
    fit: FitResult
    student: Module  # snapshot before the end-to-end fine-tune
    teacher: Module

    def agreement(self, X: np.ndarray, batch_size: int = 256) -> float:
        """Fraction of (window, node) inference decisions the two selectors share."""
        self.student.eval()
        self.teacher.eval()
        same = 0.0
        with no_grad():
            for sl in _eval_batches(len(X), batch_size):
                a_s = self.student(X[sl]).alpha.data
                a_t = self.teacher(X[sl]).alpha.data
                same += float(((a_s > 0) == (a_t > 0)).sum())
        return same / max(X.shape[0] * X.shape[1], 1)


def train_step4(cfg: TrainConfig, base: DynamicSelectionNet, topology: str | Topology,
                train: Dataset, val: Dataset, metrics: MetricsLog | None = None,
                ) -> tuple[StageResult, "Distillation"]:
    """Distill the centralized selector into a distributed one, then fine-tune all."""
    topology = Topology(topology)
    if topology is Topology.CENTRALIZED:
        raise ValueError("step 4 converts to a distributed topology")
    rng = stage_rng(cfg.seed, "step4-distill")
    student = make_scorer(topology, cfg.classifier, rng, cfg.feedback_dim, cfg.hidden)
    dres = Distillation(distill_selector(base.scorer, student, train, val, cfg, metrics),
                        copy.deepcopy(student), base.scorer)
    model = copy.deepcopy(base)
    model.set_scorer(student)
    _check_batch(cfg)
    rng = stage_rng(cfg.seed, "step4")
    groups = {"scorer": _group(model.scorer, "scorer.")}
    if model.dsf is not None:
        groups["dsf"] = _group(model.dsf, "dsf.")
    groups["classifier"] = _group(model.classifier, "classifier.")
    lrs = {g: cfg.lr_finetune for g in groups}
    _prepare_groups(model, cfg, lrs)
    res = fit(model, groups, lrs, selection_loss_fn(cfg.budget),
              selection_val_fn(val, cfg.budget), train, cfg, "step4", rng, metrics)
    return StageResult(model, res, checkpoint_of(model, cfg, "step4", res)), dres


def train_random_selection(cfg: TrainConfig, base: DynamicSelectionNet, rate: float,
                           train: Dataset, val: Dataset,
                           metrics: MetricsLog | None = None) -> StageResult:
    """Fine-tune classifier (+ fresh DSF) under i.i.d. Bernoulli(rate) channel masks."""
    rng = stage_rng(cfg.seed, "random")
    model = DynamicSelectionNet(copy.deepcopy(base.classifier), gumbel=base.gumbel)
    model.stages = list(base.stages)
    groups, lrs = {}, {}
    if cfg.use_dsf:
        model.set_dsf(DynamicSpatialFilter(cfg.classifier.n_channels, rng, cfg.hidden))
        groups["dsf"], lrs["dsf"] = _group(model.dsf, "dsf."), cfg.lr_new
    groups["classifier"] = _group(model.classifier, "classifier.")
    lrs["classifier"] = cfg.lr_finetune
    _prepare_groups(model, cfg, lrs)
    m = cfg.classifier.n_channels
    val_mask = np.random.default_rng(cfg.seed + 1000).random((len(val), m)) < rate

    def loss_fn(mdl, X, y, rng_):
        mask = rng_.random((X.shape[0], m)) < rate
        return ops.cross_entropy(mdl(X, rng_, mask).logits, y)

    def val_fn(mdl):
        ce, correct = 0.0, 0
        for sl in _eval_batches(len(val)):
            out = mdl(val.X[sl], None, val_mask[sl])
            ce += ops.cross_entropy(out.logits, val.y[sl]).item() * len(val.y[sl])
            correct += int((out.logits.data.argmax(1) == val.y[sl]).sum())
        return ce / len(val), {"val_acc": correct / len(val)}

    res = fit(model, groups, lrs, loss_fn, val_fn, train, cfg, "random", rng, metrics)
    return StageResult(model, res, checkpoint_of(model, cfg, "random", res))


# ----------------------------------------------------------------- schedule


@dataclass
class ScheduleResult:
    model: DynamicSelectionNet
    stages: dict[str, StageResult]
    distill: Distillation | None = None


def carve_validation(train: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    tr, va = train.split((1.0 - cfg.val_fraction, cfg.val_fraction), seed=cfg.seed)
    return tr, va


def run_schedule(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
                 checkpoint_dir: str | Path | None = None, metrics: MetricsLog | None = None,
                 resume_from: str | Path | None = None) -> ScheduleResult:
    """Steps 1-4 for ``cfg.topology``; centralized stops after step 3.

    ``resume_from`` names a stage checkpoint; training restarts with the stage
    after it. Every stage seeds its own generator from ``cfg.seed`` so a resumed
    run repeats the uninterrupted one exactly.
    """
    if val is None:
        train, val = carve_validation(train, cfg)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    stages: dict[str, StageResult] = {}
    order = ["step1", "step2", "step3", "step4"]
    start = 0
    model = None
    if resume_from is not None:
        ck = Checkpoint.load(resume_from)
        model = ck.build_model()
        start = order.index(ck.stage) + 1
        stages[ck.stage] = StageResult(model, None, ck)
    distill = None

    def keep(name, res):
        stages[name] = res
        if checkpoint_dir is not None:
            res.checkpoint.save(Path(checkpoint_dir) / f"{name}.npz")
        return res.model

    for name in order[start:]:
        if name == "step1":
            if cfg.skip_step1:
                continue
            model = keep(name, train_step1(cfg, train, val, metrics))
        elif name == "step2":
            model = keep(name, train_step2(cfg, None if cfg.skip_step1 else model, train, val,
                                           metrics))
        elif name == "step3":
            if cfg.use_dsf:
                model = keep(name, train_step3(cfg, model, train, val, metrics))
        elif name == "step4" and cfg.topology != Topology.CENTRALIZED.value:
            res, distill = train_step4(cfg, model, cfg.topology, train, val, metrics)
            model = keep(name, res)
    return ScheduleResult(model, stages, distill)
