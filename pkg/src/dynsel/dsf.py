"""Dynamic spatial filtering: an input-dependent linear re-weighting of the
(masked) channels, X~ = W X^ + b 1^T, where (W, b) come from a small MLP on
the vectorised covariance (1/L) X^ X^T."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops
from .nn import MLP, Module


def masked_covariance(x_hat) -> Tensor:
    """(1/L) X^ X^T for a (M, L) window or a (B, M, L) batch."""
    x_hat = as_tensor(x_hat)
    if x_hat.ndim not in (2, 3) or x_hat.shape[-1] < 1:
        raise ShapeError("masked_covariance", x_hat.shape, detail="expected (..., M, L>=1)")
    perm = (1, 0) if x_hat.ndim == 2 else (0, 2, 1)
    return ops.mul(ops.matmul(x_hat, ops.transpose(x_hat, perm)), 1.0 / x_hat.shape[-1])


class DynamicSpatialFilter(Module):
    """The output layer starts at zero weights with bias vec(I) || 0, so a freshly
    inserted filter is the identity map."""

    def __init__(self, n_channels: int, rng: np.random.Generator, hidden: int = 50):
        super().__init__()
        m = n_channels
        self.n_channels = m
        self.mlp = self.child("mlp", MLP(m * m, hidden, m * m + m, rng, zero_last=True))
        self.mlp.fc2.bias.data[: m * m] = np.eye(m).reshape(-1)

    def filters(self, x_hat) -> tuple[Tensor, Tensor]:
        """(W, b) with shapes (B, M, M) and (B, M)."""
        x_hat = as_tensor(x_hat)
        m = self.n_channels
        if x_hat.ndim != 3 or x_hat.shape[1] != m:
            raise ShapeError("apply_dsf", x_hat.shape, (None, m, None))
        b = x_hat.shape[0]
        cov = masked_covariance(x_hat)
        out = self.mlp(ops.reshape(cov, (b, m * m)))
        w = ops.reshape(ops.slice_axis(out, 0, m * m, axis=1), (b, m, m))
        return w, ops.slice_axis(out, m * m, m * m + m, axis=1)

    def __call__(self, x_hat) -> Tensor:
        w, bias = self.filters(x_hat)
        return ops.add(ops.matmul(w, as_tensor(x_hat)), ops.reshape(bias, (*bias.shape, 1)))


def apply_dsf(x_hat, dsf: DynamicSpatialFilter) -> Tensor:
    """X~ = W X^ + b 1^T for a (M, L) window or a (B, M, L) batch."""
    x_hat = as_tensor(x_hat)
    if x_hat.ndim == 2:
        out = dsf(ops.reshape(x_hat, (1, *x_hat.shape)))
        return ops.reshape(out, x_hat.shape)
    return dsf(x_hat)
