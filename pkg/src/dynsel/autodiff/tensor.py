"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive that touches a tensor with ``requires_grad`` records a node
carrying a monotonically increasing sequence number. ``backward`` collects the
nodes reachable from the loss and replays their vector-Jacobian products in
exact reverse execution order. Nothing is kept globally: once the last Python
reference to a graph is dropped the graph is gone, so the tape is rebuilt on
every forward pass.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (inference, metric evaluation)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One executed primitive: its output, inputs and the VJP closure."""

    __slots__ = ("seq", "op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    # let numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive; multiply by a reciprocal")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and, if any input needs a gradient, append a tape node.

    ``vjp(g)`` must return one gradient array (or None) per input.
    """
    out = Tensor(out_data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp)
    return out


class Tape:
    """The recorded operations reachable from a root, in execution order."""

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[tuple[int, Tensor]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                continue
            nodes.append((t.node.seq, t))
            stack.extend(t.node.inputs)
        nodes.sort(key=lambda p: p[0])
        self.outputs: list[Tensor] = [t for _, t in nodes]

    def __len__(self) -> int:
        return len(self.outputs)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.outputs]

    def __iter__(self) -> Iterable[Tensor]:
        return iter(self.outputs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad ancestor.

    The tape is consumed: intermediate gradients are freed and every node is
    detached afterwards, so the graph cannot be replayed. Rebuild it with a new
    forward pass before calling again.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor with requires_grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        node = out.node
        out.node = None
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{node.op} (backward)", gi.shape, inp.shape)
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
