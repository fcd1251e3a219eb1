from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``lr`` may be a per-parameter mapping. Every gradient is checked before
    anything is modified, so a non-finite gradient leaves params untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        step = lr[name] if isinstance(lr, dict) else lr
        p -= step * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over named parameters, with a learning rate per parameter group."""

    def __init__(self, groups: dict[str, dict[str, Tensor]], lrs: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        missing = set(groups) - set(lrs)
        if missing:
            raise ValueError(f"no learning rate for groups {sorted(missing)}")
        self.groups = groups
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def named_params(self) -> dict[str, Tensor]:
        return {n: p for grp in self.groups.values() for n, p in grp.items()}

    def lr_of(self, name: str) -> float:
        for grp, params in self.groups.items():
            if name in params:
                return self.lrs[grp]
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    def step(self) -> None:
        params, grads, lrs = {}, {}, {}
        for grp, named in self.groups.items():
            for name, p in named.items():
                if p.grad is None:
                    continue
                params[name] = p.data
                grads[name] = p.grad
                lrs[name] = self.lrs[grp]
        if self.clip_norm is not None and grads:
            total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
            if np.isfinite(total) and total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        adam_step(params, grads, self.state, lrs, self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.state.m:
            out[f"m/{n}"] = self.state.m[n]
            out[f"v/{n}"] = self.state.v[n]
            out[f"t/{n}"] = np.array(self.state.t[n], dtype=np.float64)
        return out

    def load_state_dict(self, blobs: dict[str, np.ndarray]) -> None:
        self.state = AdamState()
        for key, arr in blobs.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                self.state.m[name] = np.array(arr, dtype=np.float64)
            elif kind == "v":
                self.state.v[name] = np.array(arr, dtype=np.float64)
            elif kind == "t":
                self.state.t[name] = int(arr)
