"""Tape-based reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation executed while it is
active. :func:`backward` replays the records in exact reverse order and
accumulates adjoints into ``Variable.grad``. Leaf variables (parameters,
inputs) belong to no tape and can be used by any tape; non-leaf variables
may only feed operations on the tape that produced them.

Example::

    w = Variable(np.array(3.0), requires_grad=True)
    with Tape():
        y = w * w
    backward(y)
    w.grad  # 6.0
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["Variable", "Tape", "TapeError", "record", "backward", "active_tape", "Adam"]

_ids = itertools.count()
_TAPE_STACK: list["Tape"] = []


class TapeError(RuntimeError):
    """Raised for cross-tape mixing and malformed backward calls."""


class Variable:
    """A tensor value with an accumulating gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "node_id", "name", "uid")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.name = name
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g.astype(self.value.dtype, copy=False)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in cganet.functional.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other) if isinstance(other, Variable) else F.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other) if isinstance(other, Variable) else F.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add_scalar(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other) if isinstance(other, Variable) else F.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other) if isinstance(other, Variable) else F.scale(self, 1.0 / other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Variable], value: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Variable:
    """Wrap ``value`` as the output of ``op`` and record it on the active tape.

    Nothing is recorded when no tape is active or no input needs a gradient;
    the result is then a plain constant.
    """
    tape = active_tape()
    inputs = tuple(inputs)
    for v in inputs:
        if v.tape is not None and v.tape is not tape:
            raise TapeError(f"{op}: input {v!r} was recorded on a different tape")
    needs_grad = tape is not None and any(v.requires_grad for v in inputs)
    out = Variable(value, requires_grad=False)
    if not needs_grad:
        return out
    out.requires_grad = True
    out.tape = tape
    out.node_id = len(tape.records)
    tape.records.append(_Record(op, inputs, out, backward_fn))
    return out


def backward(root: Variable, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(v) into ``v.grad`` for every requires-grad ancestor."""
    if seed is None:
        if root.value.size != 1:
            raise TapeError(f"backward: root of shape {root.shape} is not scalar; pass a seed gradient")
        seed = np.ones_like(root.value)
    else:
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise TapeError(f"backward: seed shape {seed.shape} differs from root shape {root.shape}")
    if root.tape is None:
        if root.requires_grad:
            root._accumulate(seed)
        return
    tape = root.tape
    adjoints: dict[int, np.ndarray] = {root.uid: seed}
    for rec in reversed(tape.records[: root.node_id + 1]):
        g = adjoints.pop(rec.output.uid, None)
        if g is None:
            continue
        rec.output._accumulate(g)
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise TapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp.tape is None:
                inp._accumulate(gi)
            elif inp.uid in adjoints:
                adjoints[inp.uid] = adjoints[inp.uid] + gi
            else:
                adjoints[inp.uid] = gi


class Adam:
    """Adam with L2 weight decay folded into the gradient.

    ``g <- grad + weight_decay * w`` is applied before the moment update, so
    the decay is coupled to the adaptive step (classic L2 regularization).
    """

    def __init__(self, params: dict[str, Variable], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.int64)}
        for name in self.params:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for name in self.params:
            self.m[name] = np.array(state[f"m/{name}"], dtype=self.params[name].dtype)
            self.v[name] = np.array(state[f"v/{name}"], dtype=self.params[name].dtype)
