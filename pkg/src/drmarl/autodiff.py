"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only what the value-factorization losses need: dense layers, a few activations,
hinge and reduction ops, gathers and stop-gradient. Every op checks its output is
finite and tags itself with a node id so a blow-up can be located.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_kink_log: Optional[list[float]] = None


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def track_kinks():
    """Record the distance of every kinked op input to its kink while active."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kink(dist: np.ndarray) -> None:
    if _kink_log is not None and dist.size:
        _kink_log.append(float(np.min(dist)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        if not requires_grad:
            for p in _parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad
        self._parents = _parents if requires_grad else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op
        self.id = next(_ids)
        # a sum is non-finite iff some entry is (or the finite entries overflow it)
        if op != "leaf" and not np.isfinite(self.data.sum()):
            raise NonFiniteError(self.id, op)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # graph construction -------------------------------------------------------

    def _make(self, data, parents, op, backward) -> "Tensor":
        out = Tensor(data, _parents=parents, op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        grads = {self.id: grad}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in node._backward(g):
                if p.requires_grad:
                    grads[p.id] = grads[p.id] + pg if p.id in grads else pg

    # arithmetic -----------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        o = as_tensor(other)
        a, b = self.shape, o.shape
        return self._make(self.data + o.data, (self, o), "add",
                          lambda g: ((self, _unbroadcast(g, a)), (o, _unbroadcast(g, b))))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._make(-self.data, (self,), "neg", lambda g: ((self, -g),))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        o = as_tensor(other)
        a, b = self.shape, o.shape
        return self._make(self.data * o.data, (self, o), "mul",
                          lambda g: ((self, _unbroadcast(g * o.data, a)),
                                     (o, _unbroadcast(g * self.data, b))))

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        o = as_tensor(other)
        if self.data.ndim != 2 or o.data.ndim != 2 or self.shape[1] != o.shape[0]:
            raise ShapeError(f"matmul shapes {self.shape} and {o.shape}")
        return self._make(self.data @ o.data, (self, o), "matmul",
                          lambda g: ((self, g @ o.data.T), (o, self.data.T @ g)))

    # shape ops ------------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return self._make(self.data.reshape(*shape), (self,), "reshape",
                          lambda g: ((self, g.reshape(old)),))

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        old = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, old).copy()),)
        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", back)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def max(self, axis: int = -1) -> "Tensor":
        """Max over an axis; the gradient goes to the first maximiser."""
        idx = np.argmax(self.data, axis=axis)
        if _kink_log is not None and self.shape[axis] > 1:
            part = -np.partition(-self.data, 1, axis=axis)
            top2 = np.take(part, [0, 1], axis=axis)
            _note_kink(np.abs(np.take(top2, 0, axis=axis) - np.take(top2, 1, axis=axis)))
        val = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def back(g):
            out = np.zeros_like(self.data)
            np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return ((self, out),)
        return self._make(val, (self,), "max", back)

    def gather(self, index: np.ndarray) -> "Tensor":
        """Pick ``self[b, index[b]]`` along the last axis of a 2-D tensor."""
        idx = np.asarray(index, dtype=np.int64)
        rows = np.arange(self.shape[0])

        def back(g):
            out = np.zeros_like(self.data)
            np.add.at(out, (rows, idx), g)
            return ((self, out),)
        return self._make(self.data[rows, idx], (self,), "gather", back)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), op="stop_gradient")

    # elementwise nonlinearities ------------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        _note_kink(np.abs(self.data))
        return self._make(self.data * mask, (self,), "relu", lambda g: ((self, g * mask),))

    clamp0 = relu   # [x]_+

    def neg_part(self) -> "Tensor":
        """min(x, 0)."""
        mask = self.data < 0
        _note_kink(np.abs(self.data))
        return self._make(self.data * mask, (self,), "min0", lambda g: ((self, g * mask),))

    def abs(self) -> "Tensor":
        sgn = np.sign(self.data)
        _note_kink(np.abs(self.data))
        return self._make(np.abs(self.data), (self,), "abs", lambda g: ((self, g * sgn),))

    def elu(self) -> "Tensor":
        x = self.data
        neg = np.expm1(np.minimum(x, 0.0))
        out = np.where(x > 0, x, neg)
        d = np.where(x > 0, 1.0, neg + 1.0)
        return self._make(out, (self,), "elu", lambda g: ((self, g * d),))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0.0, x)
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._make(out, (self,), "softplus", lambda g: ((self, g * sig),))

    def sigmoid(self) -> "Tensor":
        s = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return self._make(s, (self,), "sigmoid", lambda g: ((self, g * s * (1.0 - s)),))

    def square(self) -> "Tensor":
        x = self.data
        return self._make(x * x, (self,), "square", lambda g: ((self, 2.0 * x * g),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        mask = (self.data > lo) & (self.data < hi)
        _note_kink(np.minimum(np.abs(self.data - lo), np.abs(self.data - hi)))
        return self._make(np.clip(self.data, lo, hi), (self,), "clip", lambda g: ((self, g * mask),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(zip(ts, np.split(g, sizes, axis=axis)))
    return ts[0]._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat", back)


def stack_sum(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = out + t
    return out


# parameters -------------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with snapshot support for target networks."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def subset(self, prefixes: Iterable[str]) -> list[str]:
        pre = tuple(prefixes)
        return [n for n in self.params if n.startswith(pre)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self.params.items():
            out.params[n] = Tensor(t.data.copy(), requires_grad=False)
        return out

    def load_from(self, other: "ParamStore") -> None:
        for n, t in other.params.items():
            self.params[n].data = t.data.copy()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(self.params[n].data.tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        """JSON checkpoint; float64 values round-trip exactly through hex strings."""
        doc = {n: {"shape": list(t.shape), "data": [float(x).hex() for x in t.data.ravel()]}
               for n, t in self.params.items()}
        Path(path).write_text(json.dumps({"format": "drmarl-params", "version": 1, "params": doc}))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "drmarl-params":
            raise ValueError("not a parameter checkpoint")
        out = cls()
        for n, e in doc["params"].items():
            arr = np.array([float.fromhex(x) for x in e["data"]], dtype=np.float64).reshape(e["shape"])
            out.add(n, arr)
        return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def dense(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def add_dense(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.w", glorot(rng, fan_in, fan_out))
    store.add(f"{name}.b", np.zeros(fan_out))


# optimizers ---------------------------------------------------------------------------------


@dataclass
class RMSprop:
    lr: float = 5e-4
    decay: float = 0.99
    eps: float = 1e-5
    state: dict = field(default_factory=dict)

    def step(self, store: ParamStore, names: Optional[Sequence[str]] = None) -> None:
        for n in (names if names is not None else store.names()):
            p = store[n]
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"gradient shape {p.grad.shape} != parameter {n} {p.data.shape}")
            v = self.state.get(n)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.decay * v + (1.0 - self.decay) * p.grad * p.grad
            self.state[n] = v
            p.data = p.data - self.lr * p.grad / (np.sqrt(v) + self.eps)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def step(self, store: ParamStore, names: Optional[Sequence[str]] = None) -> None:
        for n in (names if names is not None else store.names()):
            p = store[n]
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"gradient shape {p.grad.shape} != parameter {n} {p.data.shape}")
            m, v, t = self.state.get(n, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            self.state[n] = (m, v, t)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(store: ParamStore, names: Sequence[str], max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(store[n].grad ** 2)) for n in names if store[n].grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in names:
            if store[n].grad is not None:
                store[n].grad = store[n].grad * scale
    return total


# gradient checking ------------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    errors: dict[str, float]
    kink_distance: float = np.inf

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        lines = [f"grad check {status} (kink distance {self.kink_distance:.2e})"]
        lines += [f"  {n}: {e:.2e}" for n, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(fn: Callable[[], Tensor], store: ParamStore, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-4, names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; a report
    passes when every parameter's worst entry is within ``tol``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    with track_kinks() as kinks:
        out = fn()
    out.backward()
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None else np.zeros_like(store[n].data))
                for n in names}
    errors = {}
    for n in names:
        p = store[n]
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        a = analytic[n]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        errors[n] = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
    store.zero_grad()
    kd = min(kinks) if kinks else np.inf
    return GradCheckReport(all(e <= tol for e in errors.values()), errors, kd)
