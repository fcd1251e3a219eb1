"""Channel scoring in three network topologies, binary Gumbel-Softmax gating
with straight-through gradients, and the per-node mini-max sparsity loss."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops
from .msfbcnn import ClassifierConfig, FilterBankTrunk
from .nn import MLP, Module

GUMBEL_CLAMP = 1e-12
MIN_BATCH_FOR_BUDGET = 32


class Topology(str, enum.Enum):
    CENTRALIZED = "centralized"
    DISTRIBUTED = "distributed"
    FEEDBACK = "feedback"


class Mode(str, enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass
class GumbelConfig:
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"Gumbel temperature must be positive, got {self.tau}")


@dataclass
class SparsityBudget:
    target_rate: float
    lam: float = 10.0
    tau0: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.target_rate <= 1.0:
            raise ValueError(f"target rate must be in [0, 1], got {self.target_rate}")
        if self.lam < 0:
            raise ValueError("sparsity weight must be nonnegative")
        if not self.tau0 > 0:
            raise ValueError("proxy temperature tau0 must be positive")


@dataclass
class GateScores:
    alpha: Tensor  # (B, M)
    beta: Tensor | None = None  # (B, M, C), feedback topology only

    def __post_init__(self):
        if not np.all(np.isfinite(self.alpha.data)):
            raise FloatingPointError("non-finite channel scores")


@dataclass
class ChannelMask:
    z_hard: Tensor  # (B, M) in {0, 1}; straight-through wired in training mode
    z_soft: Tensor  # (B, M) in (0, 1)
    mode: Mode

    @property
    def bits(self) -> np.ndarray:
        return self.z_hard.data.astype(bool)


# ------------------------------------------------------------------ scorers


class CentralizedScorer(Module):
    """Filter-bank features of every channel feed a per-channel readout plus a
    dense readout of all M * F features, so each score sees every channel."""

    topology = Topology.CENTRALIZED

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        m, nf = cfg.n_channels, cfg.n_features
        self.trunk = self.child("trunk", FilterBankTrunk(cfg, rng, per_node=True))
        self.local_w = self.param("local.weight", np.zeros((m, nf, 1)))
        self.head_w = self.param("head.weight", np.zeros((m * nf, m)))
        self.head_b = self.param("head.bias", np.zeros(m))

    def __call__(self, x, rng: np.random.Generator | None = None) -> GateScores:
        feats = self.trunk(x, rng)  # (B, M, F)
        b, m, nf = feats.shape
        local = ops.matmul(ops.transpose(feats, (1, 0, 2)), self.local_w)  # (M, B, 1)
        local = ops.transpose(ops.reshape(local, (m, b)), (1, 0))
        joint = ops.mul(ops.matmul(ops.reshape(feats, (b, m * nf)), self.head_w), 1.0 / m)
        return GateScores(ops.add(ops.add(local, joint), self.head_b))


class NodeScorer(Module):
    """Single-channel filter-bank network shared by all nodes, one head per node.

    Every output row m depends on input row m only.
    """

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator, out_dim: int = 1,
                 zero_head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.out_dim = out_dim
        m, nf = cfg.n_channels, cfg.n_features
        self.trunk = self.child("trunk", FilterBankTrunk(cfg, rng, per_node=True))
        if zero_head:
            w = np.zeros((m, nf, out_dim))
        else:
            lim = np.sqrt(6.0 / (nf + out_dim))
            w = rng.uniform(-lim, lim, size=(m, nf, out_dim))
        self.head_w = self.param("heads.weight", w)
        self.head_b = self.param("heads.bias", np.zeros((m, 1, out_dim)))

    def shared_parameters(self) -> dict[str, Tensor]:
        return self.trunk.named_parameters("trunk.")

    def head_parameters(self) -> dict[str, Tensor]:
        return {"heads.weight": self.head_w, "heads.bias": self.head_b}

    def node_outputs(self, x, rng: np.random.Generator | None = None) -> Tensor:
        feats = self.trunk(x, rng)  # (B, M, F)
        per_node = ops.matmul(ops.transpose(feats, (1, 0, 2)), self.head_w)  # (M, B, out)
        return ops.transpose(ops.add(per_node, self.head_b), (1, 0, 2))  # (B, M, out)


class DistributedScorer(NodeScorer):
    topology = Topology.DISTRIBUTED

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        super().__init__(cfg, rng, out_dim=1)

    def __call__(self, x, rng: np.random.Generator | None = None) -> GateScores:
        out = self.node_outputs(x, rng)
        return GateScores(ops.reshape(out, out.shape[:2]))


class FeedbackScorer(Module):
    """Nodes send C-dimensional summaries; a fusion-centre MLP scores all nodes."""

    topology = Topology.FEEDBACK

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator, feedback_dim: int = 10,
                 hidden: int = 50):
        super().__init__()
        if feedback_dim < 1:
            raise ValueError("feedback dimension must be >= 1")
        if feedback_dim >= cfg.n_samples:
            warnings.warn(
                f"feedback dimension {feedback_dim} is not small relative to window "
                f"length {cfg.n_samples}", stacklevel=2)
        self.cfg = cfg
        self.feedback_dim = feedback_dim
        m = cfg.n_channels
        self.nodes = self.child("nodes", NodeScorer(cfg, rng, out_dim=feedback_dim,
                                                    zero_head=False))
        self.aggregator = self.child("aggregator", MLP(m * feedback_dim, hidden, m, rng,
                                                       zero_last=True))

    def __call__(self, x, rng: np.random.Generator | None = None) -> GateScores:
        beta = self.nodes.node_outputs(x, rng)  # (B, M, C)
        b, m, c = beta.shape
        alpha = self.aggregator(ops.reshape(beta, (b, m * c)))
        return GateScores(alpha, beta)


def make_scorer(topology: Topology | str, cfg: ClassifierConfig, rng: np.random.Generator,
                feedback_dim: int = 10, hidden: int = 50) -> Module:
    topology = Topology(topology)
    if topology is Topology.CENTRALIZED:
        return CentralizedScorer(cfg, rng)
    if topology is Topology.DISTRIBUTED:
        return DistributedScorer(cfg, rng)
    return FeedbackScorer(cfg, rng, feedback_dim, hidden)


def score(scorer: Module, x, rng: np.random.Generator | None = None) -> GateScores:
    x = as_tensor(x)
    m = scorer.cfg.n_channels
    if x.ndim != 3 or x.shape[1] != m:
        raise ShapeError(f"score_{scorer.topology.value}", x.shape, (None, m, None),
                         detail="channel count mismatch with scorer")
    return scorer(x, rng)


# ------------------------------------------------------------------ gating


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_mask(scores: GateScores | Tensor, cfg: GumbelConfig, mode: Mode | str,
                rng: np.random.Generator | None = None,
                noise: tuple[np.ndarray, np.ndarray] | None = None) -> ChannelMask:
    """Turn scores into a binary channel mask.

    Training: z_soft = sigmoid((alpha + g1 - g2) / tau) with independent
    Gumbel(0, 1) draws per sample and channel; z_hard = [z_soft > 0.5] in the
    forward pass, with the gradient of z_soft in the backward pass.
    Inference: no noise, z_hard = [sigmoid(alpha) > 0.5].

    ``noise`` supplies a fixed (g1, g2) pair instead of drawing from ``rng``.
    """
    alpha = scores.alpha if isinstance(scores, GateScores) else as_tensor(scores)
    mode = Mode(mode)
    if not cfg.tau > 0:
        raise ValueError(f"Gumbel temperature must be positive, got {cfg.tau}")
    if mode is Mode.INFERENCE:
        z_soft = ops.sigmoid(alpha)
        z_hard = Tensor((z_soft.data > 0.5).astype(np.float64))
        return ChannelMask(z_hard, z_soft, mode)
    if noise is None:
        if rng is None:
            raise ValueError("training-mode sampling needs an rng")
        g1 = sample_gumbel(rng, alpha.shape)
        g2 = sample_gumbel(rng, alpha.shape)
    else:
        g1, g2 = noise
    z_soft = ops.sigmoid(ops.mul(ops.add(alpha, g1 - g2), 1.0 / cfg.tau))
    hard = (z_soft.data > 0.5).astype(np.float64)
    return ChannelMask(ops.straight_through(z_soft, hard), z_soft, mode)


def apply_mask(x, mask: ChannelMask | Tensor | np.ndarray) -> Tensor:
    """X * z 1_L^T."""
    x = as_tensor(x)
    z = mask.z_hard if isinstance(mask, ChannelMask) else as_tensor(mask)
    return ops.mul(x, ops.reshape(z, (*z.shape, 1)))


def node_rates_proxy(alpha, tau0: float) -> Tensor:
    """Batch-mean of sigmoid(alpha / tau0) per node (no Gumbel noise)."""
    return ops.mean(ops.sigmoid(ops.mul(as_tensor(alpha), 1.0 / tau0)), axis=0)


def per_node_sparsity(alpha, budget: SparsityBudget) -> Tensor:
    return ops.square(ops.relu(ops.sub(node_rates_proxy(alpha, budget.tau0), budget.target_rate)))


def sparsity_loss(alpha, budget: SparsityBudget) -> Tensor:
    """max_m max(mean_b sigmoid(alpha[b, m] / tau0) - T, 0)^2.

    The max over nodes is exact, so only the worst node (lowest index on ties)
    receives gradient.
    """
    alpha = as_tensor(alpha)
    if alpha.ndim != 2 or alpha.shape[0] < 1:
        raise ShapeError("sparsity_loss", alpha.shape, detail="expected (B >= 1, M)")
    return ops.max_over_axis(per_node_sparsity(alpha, budget), axis=0)
