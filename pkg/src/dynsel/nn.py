"""Parameter containers and a couple of reusable layers."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops


class Module:
    """Holds named parameters, non-trainable buffers and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + n: p for n, p in self.params.items()}
        for cname, c in self.children.items():
            out.update(c.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + n: b for n, b in self.buffers.items()}
        for cname, c in self.children.items():
            out.update(c.named_buffers(f"{prefix}{cname}."))
        return out

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self.children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            target = params[k].data if k in params else buffers.get(k)
            if target is None:
                continue
            if target.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {target.shape}")
            target[...] = v


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    """y = x W + b, with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, (n_in, n_out), n_in, n_out)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class MLP(Module):
    """Two-layer perceptron with a ReLU hidden layer."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator,
                 zero_last: bool = False):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(n_in, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, n_out, rng, zero=zero_last))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))
