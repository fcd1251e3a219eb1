"""Multi-scale filter-bank CNN: parallel temporal convolutions, a spatial
convolution, and square / average-pool / log band-power features read out by
a dense layer.

Layer sizes follow the filter-bank architecture table:

=============  ==============  ====================
layer          output          trainable params
=============  ==============  ====================
timeconv x4    (F_T, L, M)     (64+40+26+16) F_T
batchnorm      (4F_T, L, M)    2 F_T
spatialconv    (F_S, L, 1)     4 M F_T F_S
batchnorm      (F_S, L, 1)     2 F_S
square/pool    (F_S, P, 1)     -
log/dropout    (F_S, P, 1)     -
dense          N_C             F_S P N_C
=============  ==============  ====================

``P`` is the number of valid pooling windows, ``(L - pool_kernel) // pool_stride + 1``.
The first batchnorm shares its scale/shift across the four branches (one pair
per temporal filter index) while keeping separate running statistics for each
of the 4F_T feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops
from .nn import Module, glorot

LOG_FLOOR = 1e-8


@dataclass
class ClassifierConfig:
    n_channels: int = 4
    n_samples: int = 256
    n_temporal: int = 4
    n_spatial: int = 8
    kernels: tuple[int, ...] = (64, 40, 26, 16)
    pool_kernel: int = 75
    pool_stride: int = 15
    n_classes: int = 4
    dropout: float = 0.5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        for name in ("n_channels", "n_samples", "n_temporal", "n_spatial", "pool_kernel",
                     "pool_stride", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ClassifierConfig.{name} must be >= 1")
        if not self.kernels or min(self.kernels) < 1:
            raise ValueError("ClassifierConfig.kernels must be non-empty positive lengths")
        if self.pool_kernel > self.n_samples:
            raise ValueError(
                f"pool kernel {self.pool_kernel} longer than window {self.n_samples}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def pooled_len(self) -> int:
        return (self.n_samples - self.pool_kernel) // self.pool_stride + 1

    @property
    def n_features(self) -> int:
        return self.n_spatial * self.pooled_len

    @classmethod
    def full_size(cls, n_channels: int = 44, n_classes: int = 4, **kw) -> "ClassifierConfig":
        """Full-size window of 1125 samples (4.5 s at 250 Hz)."""
        kw.setdefault("n_temporal", 10)
        kw.setdefault("n_spatial", 10)
        return cls(n_channels=n_channels, n_samples=1125, n_classes=n_classes, **kw)


def param_count_closed_form(cfg: ClassifierConfig) -> int:
    """Closed-form parameter total of the architecture table."""
    ft, fs, c, nc = cfg.n_temporal, cfg.n_spatial, cfg.n_channels, cfg.n_classes
    p = cfg.pooled_len
    nb = len(cfg.kernels)
    return sum(cfg.kernels) * ft + 2 * ft + nb * c * ft * fs + 2 * fs + fs * p * nc


def log_power(x, pool_kernel: int, pool_stride: int, eps: float = LOG_FLOOR) -> Tensor:
    """``log(avg_pool(x**2) + eps)`` over the last axis."""
    return ops.log(ops.add(ops.avg_pool_1d(ops.square(x), pool_kernel, pool_stride), eps))


class FilterBankTrunk(Module):
    """Everything up to (and including) dropout.

    With ``per_node=False`` the spatial convolution mixes all M channels and the
    output is (B, F_S * P). With ``per_node=True`` the trunk is the single-input
    network replicated over channels with shared weights: each channel goes
    through its own (1-channel) spatial filter bank and normalisation statistics
    are kept per channel, so channel m's features depend on row m only. Output
    is (B, M, F_S * P).
    """

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator, per_node: bool = False):
        super().__init__()
        self.cfg = cfg
        self.per_node = per_node
        # when set, normalisation uses running statistics even in training mode
        self.freeze_stats = False
        ft, fs, m = cfg.n_temporal, cfg.n_spatial, cfg.n_channels
        nb = len(cfg.kernels)
        self.temporal = [
            self.param(f"timeconv{i + 1}", glorot(rng, (ft, 1, k), k, ft * k))
            for i, k in enumerate(cfg.kernels)
        ]
        self.bn1_gamma = self.param("bn1.gamma", np.ones(ft))
        self.bn1_beta = self.param("bn1.beta", np.zeros(ft))
        if per_node:
            self.spatial = self.param("spatialconv", glorot(rng, (nb * ft, fs), nb * ft, fs))
            self.bn1_mean = self.buffer("bn1.running_mean", np.zeros((1, m, nb * ft, 1)))
            self.bn1_var = self.buffer("bn1.running_var", np.ones((1, m, nb * ft, 1)))
            self.bn2_mean = self.buffer("bn2.running_mean", np.zeros((1, m, fs, 1)))
            self.bn2_var = self.buffer("bn2.running_var", np.ones((1, m, fs, 1)))
        else:
            self.spatial = self.param(
                "spatialconv", glorot(rng, (fs, nb * ft, m), nb * ft * m, fs))
            self.bn1_mean = self.buffer("bn1.running_mean", np.zeros((1, 1, nb * ft, 1)))
            self.bn1_var = self.buffer("bn1.running_var", np.ones((1, 1, nb * ft, 1)))
            self.bn2_mean = self.buffer("bn2.running_mean", np.zeros((1, fs, 1)))
            self.bn2_var = self.buffer("bn2.running_var", np.ones((1, fs, 1)))
        self.bn2_gamma = self.param("bn2.gamma", np.ones(fs))
        self.bn2_beta = self.param("bn2.beta", np.zeros(fs))
        self.last_shapes: dict[str, tuple[int, ...]] = {}

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.n_samples):
            raise ShapeError("msfbcnn.forward", x.shape, (None, cfg.n_channels, cfg.n_samples))
        b, m, L = x.shape
        ft, fs, nb = cfg.n_temporal, cfg.n_spatial, len(cfg.kernels)
        shapes = {}
        xr = ops.reshape(x, (b * m, 1, L))
        branches = [ops.conv1d_same(xr, w) for w in self.temporal]
        shapes["timeconv"] = (b, ft, L, m)
        h = ops.concat(branches, axis=1)  # (B*M, 4F_T, L)
        h = ops.reshape(h, (b, m, nb * ft, L))
        shapes["concat"] = (b, nb * ft, L, m)
        gamma = ops.reshape(ops.concat([self.bn1_gamma] * nb, axis=0), (1, 1, nb * ft, 1))
        beta = ops.reshape(ops.concat([self.bn1_beta] * nb, axis=0), (1, 1, nb * ft, 1))
        bn_axes = (0, 3) if self.per_node else (0, 1, 3)
        batch_stats = self.training and not self.freeze_stats
        h = ops.batchnorm(h, gamma, beta, self.bn1_mean, self.bn1_var, bn_axes,
                          batch_stats, cfg.bn_momentum)
        if self.per_node:
            # shared 4F_T -> F_S map applied to every channel separately
            h = ops.matmul(ops.transpose(h, (0, 1, 3, 2)), self.spatial)  # (B, M, L, F_S)
            h = ops.transpose(h, (0, 1, 3, 2))  # (B, M, F_S, L)
            h = ops.batchnorm(h, ops.reshape(self.bn2_gamma, (1, 1, fs, 1)),
                              ops.reshape(self.bn2_beta, (1, 1, fs, 1)),
                              self.bn2_mean, self.bn2_var, (0, 3), batch_stats, cfg.bn_momentum)
            shapes["spatialconv"] = (b, m, fs, L, 1)
        else:
            hw = ops.reshape(ops.transpose(h, (0, 3, 2, 1)), (b, L, nb * ft * m))
            wmat = ops.transpose(ops.reshape(self.spatial, (fs, nb * ft * m)), (1, 0))
            h = ops.transpose(ops.matmul(hw, wmat), (0, 2, 1))  # (B, F_S, L)
            h = ops.batchnorm(h, ops.reshape(self.bn2_gamma, (1, fs, 1)),
                              ops.reshape(self.bn2_beta, (1, fs, 1)),
                              self.bn2_mean, self.bn2_var, (0, 2), batch_stats, cfg.bn_momentum)
            shapes["spatialconv"] = (b, fs, L, 1)
        h = log_power(h, cfg.pool_kernel, cfg.pool_stride)
        h = ops.dropout(h, cfg.dropout, rng, self.training)
        p = cfg.pooled_len
        if self.per_node:
            shapes["pool"] = (b, m, fs, p, 1)
            out = ops.reshape(h, (b, m, fs * p))
        else:
            shapes["pool"] = (b, fs, p, 1)
            out = ops.reshape(h, (b, fs * p))
        self.last_shapes = shapes
        return out


class MSFBCNN(Module):
    """Task classifier: trunk plus a bias-free dense readout to class logits."""

    def __init__(self, cfg: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.trunk = self.child("trunk", FilterBankTrunk(cfg, rng))
        nf = cfg.n_features
        self.dense = self.param("dense", glorot(rng, (nf, cfg.n_classes), nf, cfg.n_classes))

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        return ops.matmul(self.trunk(x, rng), self.dense)
