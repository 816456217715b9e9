"""Dense reverse-mode autodiff over float64 numpy arrays.

The graph is define-by-run: every operation returns a new :class:`Value`
holding references to its parents and a closure that pushes the output
gradient back to them. Graphs are rebuilt per batch, so a Value is never
reused across training steps except for parameters (leaves).
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class DiffError(Exception):
    """Base class for autodiff errors."""


class ShapeError(DiffError):
    pass


class NonFiniteError(DiffError):
    pass


class NotScalarError(DiffError):
    pass


class NotAncestorError(DiffError):
    pass


class MissingGradError(DiffError):
    pass


_ids = itertools.count()


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op or 'leaf'})"

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarError(f"item() on value of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def constant(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def parameter(x) -> Value:
    return Value(np.array(x, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Value:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite result in {op}")
    needs = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


# ---------------------------------------------------------------- ops


def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _node(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _node(data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Value:
    a, b = constant(a), constant(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(data, (a, b), backward, "mul")


def scale(a, c: float) -> Value:
    a = constant(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float) -> Value:
    a = constant(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        data = ad**p
    return _node(data, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def matmul(a, b) -> Value:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Value:
    a = constant(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Value:
    a = constant(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}") from exc
    return _node(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [constant(v) for v in values]
    try:
        data = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[v.shape for v in vals]}") from exc
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _node(data, tuple(vals), backward, "concat")


def take(a, index) -> Value:
    a = constant(a)
    data = a.data[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(data, dtype=np.float64), (a,), backward, "take")


def sum_(a, axis=None) -> Value:
    a = constant(a)
    shape = a.shape
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(data), (a,), backward, "sum")


def mean(a, axis=None) -> Value:
    a = constant(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / n)


def relu(a) -> Value:
    a = constant(a)
    mask = a.data > 0  # derivative at the kink is 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Value:
    a = constant(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def identity(a) -> Value:
    return constant(a)


def exp(a) -> Value:
    a = constant(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Value:
    a = constant(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(ad)
    return _node(data, (a,), lambda g: (g / ad,), "log")


def squared_error(pred, target) -> Value:
    """Sum of squared differences (no normalisation)."""
    d = sub(pred, target)
    return sum_(mul(d, d))


def sq_l2norm(a) -> Value:
    return sum_(mul(a, a))


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Value:
    """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are excluded."""
    a = constant(a)
    x = a.data
    keep = np.ones_like(x, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
    if not np.all(keep.any(axis=axis)):
        raise ShapeError("logsumexp: a row has no unmasked entries")
    masked = np.where(keep, x, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    data = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(data, (a,), backward, "logsumexp")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Value:
    a = constant(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise NonFiniteError("l2_normalize: vector norm below threshold")
    u = x / norm

    def backward(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return _node(u, (a,), backward, "l2_normalize")


def cosine_similarity(a, b, axis: int = -1) -> Value:
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis)


ACTIVATIONS: dict[str, Callable[[Value], Value]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
}


# ---------------------------------------------------------------- backward


def _topo(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Value) -> tuple[list[Value], dict[int, np.ndarray]]:
    if root.data.size != 1:
        raise NotScalarError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo(root)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return order, grads


def backward(root: Value) -> None:
    """Populate ``.grad`` on every ancestor of ``root`` that requires grad.

    Leaves accumulate into an existing gradient; interior nodes are overwritten.
    """
    order, grads = _backprop(root)
    for node in order:
        g = grads.get(node.id)
        if g is None:
            continue
        if node._parents or node.grad is None:
            node.grad = g.copy() if node._parents else np.array(g, dtype=np.float64)
        else:
            node.grad = node.grad + g


def grad_wrt_activation(root: Value, target: Value) -> np.ndarray:
    """Return d(root)/d(target) without touching any ``.grad`` field."""
    if not target.requires_grad:
        raise NotAncestorError("target does not require grad, so it cannot be an ancestor")
    order, grads = _backprop(root)
    if all(n.id != target.id for n in order):
        raise NotAncestorError("target is not an ancestor of root")
    return grads.get(target.id, np.zeros_like(target.data))


# ---------------------------------------------------------------- layers


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected network; ``activations[i]`` follows layer ``i``."""

    def __init__(
        self,
        widths: Sequence[int],
        activations: Sequence[str] | None = None,
        rng: np.random.Generator | None = None,
        zero_last: bool = False,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"invalid layer widths {widths}")
        n_layers = len(widths) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ShapeError("one activation per layer required")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = widths
        self.activations = list(activations)
        self.weights: list[Value] = []
        self.biases: list[Value] = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            w = glorot_uniform(rng, fi, fo)
            if zero_last and i == n_layers - 1:
                w = np.zeros_like(w)
            self.weights.append(parameter(w))
            self.biases.append(parameter(np.zeros(fo)))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Value]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, x) -> Value:
        x = constant(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"Mlp expects (batch, {self.in_dim}), got {x.shape}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = ACTIVATIONS[act](add(matmul(x, w), b))
        return x

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError("state length mismatch")
        for p, a in zip(params, arrays):
            a = _as_array(a)
            if a.shape != p.shape:
                raise ShapeError(f"state shape {a.shape} vs {p.shape}")
            p.data = a.copy()
            p.grad = None

    def copy(self) -> "Mlp":
        clone = Mlp(self.widths, self.activations)
        clone.load_state(self.state())
        for src, dst in zip(self.parameters(), clone.parameters()):
            dst.requires_grad = src.requires_grad
        return clone


# ---------------------------------------------------------------- optimizers


class Optimizer:
    """Parameter groups are dicts with ``params`` and ``lr``; a flat list gets ``lr``."""

    def __init__(self, params, lr: float = 1e-3):
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = [dict(g) for g in params]
        else:
            groups = [{"params": params, "lr": lr}]
        for g in groups:
            if g["lr"] <= 0:
                raise ValueError("learning rate must be positive")
            g["params"] = list(g["params"])
        self.groups = groups
        self.steps = 0

    def parameters(self) -> list[Value]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _check(self) -> None:
        for p in self.parameters():
            if p.grad is None:
                raise MissingGradError(f"parameter of shape {p.shape} has no gradient")

    def step(self) -> None:
        self._check()
        self.steps += 1
        for g in self.groups:
            for p in g["params"]:
                self._update(p, g["lr"])
        self.zero_grad()

    def _update(self, p: Value, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, p, lr):
        p.data = p.data - lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {p.id: np.zeros_like(p.data) for p in self.parameters()}
        self.v = {p.id: np.zeros_like(p.data) for p in self.parameters()}

    def _update(self, p, lr):
        m = self.m[p.id] = self.beta1 * self.m[p.id] + (1 - self.beta1) * p.grad
        v = self.v[p.id] = self.beta2 * self.v[p.id] + (1 - self.beta2) * p.grad**2
        mhat = m / (1 - self.beta1**self.steps)
        vhat = v / (1 - self.beta2**self.steps)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "motionshift.mlp"
CHECKPOINT_VERSION = 1


def save_mlp(mlp: Mlp, path: str | Path) -> None:
    """Write an Mlp as JSON; python float repr round-trips float64 exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": mlp.widths,
        "activations": mlp.activations,
        "shapes": [list(a.shape) for a in mlp.state()],
        "arrays": [a.tolist() for a in mlp.state()],
    }
    Path(path).write_text(json.dumps(payload))


def load_mlp(path: str | Path) -> Mlp:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an mlp checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {payload.get('version')}")
    mlp = Mlp(payload["widths"], payload["activations"])
    arrays = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(payload["arrays"], payload["shapes"])]
    mlp.load_state(arrays)
    return mlp


def params_digest(params: Iterable[Value]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
