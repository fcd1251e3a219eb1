"""Differentiable primitives.

Each function takes Tensors (or array-likes for non-differentiable operands)
and returns a Tensor. Shape problems raise :class:`ShapeError` naming the
primitive and the offending shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", a.data * b.data, (a, b), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return record(
        "log_softmax", out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),)
    )


def straight_through(x_continuous, x_discrete) -> Tensor:
    """Forward value of ``x_discrete``, identity Jacobian onto ``x_continuous``."""
    xc, xd = as_tensor(x_continuous), as_tensor(x_discrete)
    if xc.shape != xd.shape:
        raise ShapeError("straight_through", xc.shape, xd.shape)
    return record("straight_through", xd.data.copy(), (xc, xd), lambda g: (g, None))


# ----------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("mean", out, (x,), vjp)


def max_over_axis(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the subgradient goes to the first maximiser only."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return record("max_over_axis", out, (x,), vjp)


# ------------------------------------------------------------------ structure


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes must permute all dims")
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", xs[0].shape, x.shape, detail=f"axis={axis}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return record(
        "concat",
        np.concatenate([x.data for x in xs], axis=ax),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def slice_axis(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """``x[..., start:stop, ...]`` along one axis."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError("slice_axis", x.shape, (start, stop), detail=f"axis={axis}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record("slice_axis", x.data[index], (x,), vjp)


def pad_last(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return record(
        "pad_last", np.pad(x.data, width), (x,), lambda g: (g[..., left : left + n],)
    )


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), vjp)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (N, Cin, Lp) -> (N * Lout, Cin * K)
    win = sliding_window_view(x, k, axis=-1)  # (N, Cin, Lout, K)
    n, cin, lout, _ = win.shape
    return win.transpose(0, 2, 1, 3).reshape(n * lout, cin * k)


def _corr_valid(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    # x (N, Cin, Lp), w (Cout, Cin, K) -> (N, Cout, Lp-K+1); cross-correlation
    cout, cin, k = w.shape
    n, lout = x.shape[0], x.shape[-1] - k + 1
    if cols is None:
        cols = _im2col(x, k)
    out = cols @ w.reshape(cout, cin * k).T
    return out.reshape(n, lout, cout).transpose(0, 2, 1)


def conv1d_valid(x, w) -> Tensor:
    """Cross-correlation along the last axis without padding.

    ``x`` is (N, Cin, L), ``w`` is (Cout, Cin, K); output is (N, Cout, L-K+1).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or w.shape[2] > x.shape[2]:
        raise ShapeError("conv1d_valid", x.shape, w.shape)
    cout, cin, k = w.shape
    cols = _im2col(x.data, k)
    out = _corr_valid(x.data, w.data, cols)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
            wf = np.ascontiguousarray(w.data[:, :, ::-1].transpose(1, 0, 2))
            gx = _corr_valid(gpad, wf)
        if w.requires_grad:
            g2 = g.transpose(0, 2, 1).reshape(-1, cout)
            gw = (g2.T @ cols).reshape(cout, cin, k)
        return gx, gw

    return record("conv1d_valid", out, (x, w), vjp)


def conv1d_same(x, w) -> Tensor:
    """Length-preserving cross-correlation; even kernels pad one extra on the right."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d_same", x.shape, w.shape)
    k = w.shape[2]
    left = (k - 1) // 2
    return conv1d_valid(pad_last(x, left, k - 1 - left), w)


def avg_pool_1d(x, kernel: int, stride: int) -> Tensor:
    """Valid average pooling over the last axis."""
    x = as_tensor(x)
    n = x.shape[-1]
    if kernel < 1 or stride < 1 or kernel > n:
        raise ShapeError("avg_pool_1d", x.shape, (kernel, stride), detail="kernel must fit the input")
    out = sliding_window_view(x.data, kernel, axis=-1)[..., ::stride, :].mean(axis=-1)
    p = out.shape[-1]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gk = g / kernel
        for i in range(p):
            gx[..., i * stride : i * stride + kernel] += gk[..., i : i + 1]
        return (gx,)

    return record("avg_pool_1d", out, (x,), vjp)


# ------------------------------------------------------------------- layers


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axes: Sequence[int],
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise over ``axes`` then apply ``gamma * xhat + beta``.

    ``running_mean``/``running_var`` have the keepdims reduced shape and are
    updated in place in training mode as ``r = momentum * r + (1 - momentum) * batch``.
    ``gamma``/``beta`` must broadcast against ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(a % x.ndim for a in axes)
    if running_mean.shape != running_var.shape or np.broadcast_shapes(
        running_mean.shape, x.shape
    ) != x.shape:
        raise ShapeError("batchnorm", x.shape, running_mean.shape)
    try:
        np.broadcast_shapes(gamma.shape, beta.shape, x.shape)
    except ValueError:
        raise ShapeError("batchnorm", x.shape, gamma.shape, beta.shape) from None

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = int(np.prod([x.shape[a] for a in axes]))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                n = xhat.size // inv.size
                s1 = gxhat.sum(axis=axes, keepdims=True) / n
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / n
                gx = inv * (gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return record("batchnorm", out, (x, gamma, beta), vjp)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in training mode")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- composites


def cross_entropy(logits, y: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels ``y`` under ``logits``."""
    logits = as_tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return mean(sum(mul(log_softmax(logits, axis=1), onehot), axis=1)) * -1.0


def binary_cross_entropy(p, target: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean BCE between probabilities ``p`` and fixed targets in [0, 1]."""
    p = as_tensor(p)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError("binary_cross_entropy", p.shape, t.shape)
    pos = mul(log(add(p, eps)), t)
    neg = mul(log(add(sub(1.0, p), eps)), 1.0 - t)
    return mean(add(pos, neg)) * -1.0
