"""Dense reverse-mode automatic differentiation over 2-D float64 matrices.

Every value is a ``Tensor`` holding a ``(rows, cols)`` numpy array.  Ops build
a backward graph; :meth:`Tensor.backward` walks it in reverse topological
order and accumulates exact analytic gradients into leaf tensors.

Broadcasting is limited to ``(1, c)`` row vectors, ``(n, 1)`` column vectors
and ``(1, 1)`` scalars on the elementwise binary ops.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

CHECKPOINT_FORMAT = "circuitgcl-params"
CHECKPOINT_VERSION = 1

# tanh-approximation GELU constant sqrt(2/pi)
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeMismatch(ValueError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op, self.shape_a, self.shape_b = op, a, b


class NotScalar(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    # operator sugar
    def __add__(self, o): return add(self, _lift(o))
    def __radd__(self, o): return add(_lift(o), self)
    def __sub__(self, o): return sub(self, _lift(o))
    def __rsub__(self, o): return sub(_lift(o), self)
    def __mul__(self, o):
        return scalar_mul(self, o) if isinstance(o, (int, float)) else mul(self, o)
    def __rmul__(self, o):
        return scalar_mul(self, o) if isinstance(o, (int, float)) else mul(o, self)
    def __truediv__(self, o):
        return scalar_mul(self, 1.0 / o) if isinstance(o, (int, float)) else div(self, o)
    def __neg__(self): return scalar_mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.shape != (1, 1) and grad is None:
            raise NotScalar(f"backward() needs a 1x1 loss, got {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if grad is None
                                        else np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, _parents=parents if req else (),
                 _backward=backward if req else None)
    # intermediate nodes propagate but never store .grad
    out.requires_grad = req
    return out


def constant(data) -> Tensor:
    return Tensor(data)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- broadcasting

def _bshape(op: str, a: tuple, b: tuple) -> tuple[int, int]:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeMismatch(op, a, b)
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _bshape("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _bshape("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (with row/column/scalar broadcast)."""
    _bshape("hadamard", a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


hadamard = mul


def div(a: Tensor, b: Tensor) -> Tensor:
    _bshape("div", a.shape, b.shape)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _make(out, (a,), back)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != rows:
            raise ShapeMismatch("concat_cols", parts[0].shape, p.shape)
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, cuts[i]:cuts[i + 1]] for i in range(len(parts)))
    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def row_sum(a: Tensor) -> Tensor:
    """Sum across columns: (n, c) -> (n, 1)."""
    return _make(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def col_sum(a: Tensor) -> Tensor:
    """Sum across rows: (n, c) -> (1, c)."""
    return _make(a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def total(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,),
                 lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,),
                 lambda g: (np.full(a.shape, g[0, 0] / n),))


def _scatter_matrix(index: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(index)
    return sp.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(num_segments, n))


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id: (n, c) -> (num_segments, c)."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ShapeMismatch("segment_sum", a.shape, ids.shape)
    if len(ids) and (ids.min() < 0 or ids.max() >= num_segments):
        raise ValueError("segment id out of range")
    mat = _scatter_matrix(ids, num_segments)
    out = np.asarray(mat @ a.data) if len(ids) else np.zeros((num_segments, a.shape[1]))
    return _make(out, (a,), lambda g: (g[ids],))


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        if len(idx) == 0:
            return (np.zeros(a.shape),)
        return (np.asarray(_scatter_matrix(idx, n) @ g),)
    return _make(a.data[idx], (a,), back)


# ---------------------------------------------------------------- row-wise

def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)
    return _make(out, (a,), back)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)
    return _make(out, (a,), back)


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance per row (no affine part)."""
    x = a.data
    c = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=1, keepdims=True)
                       - y * (g * y).sum(axis=1, keepdims=True) / c),)
    return _make(y, (a,), back)


def l2_normalize_rows(a: Tensor) -> Tensor:
    x = a.data
    norm = np.sqrt((x ** 2).sum(axis=1, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroVector("l2_normalize_rows: zero row")
    y = x / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)
    return _make(y, (a,), back)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- params

class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` map with checkpoint I/O."""

    def add(self, name: str, data) -> Tensor:
        if name in self:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = param(data, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self.values())

    def to_dict(self) -> dict:
        return {k: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for k, t in self.items()}

    def load_dict(self, blob: dict, strict: bool = True):
        if strict and set(blob) != set(self):
            missing = sorted(set(self) - set(blob))
            extra = sorted(set(blob) - set(self))
            raise KeyError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for k, v in blob.items():
            if k not in self:
                continue
            arr = np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            if arr.shape != self[k].shape:
                raise ShapeMismatch(f"load {k}", self[k].shape, arr.shape)
            self[k].data = arr
            self[k].zero_grad()


def save_checkpoint(path, params: ParamSet, meta: dict | None = None):
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "meta": meta or {}, "params": params.to_dict()}
    Path(path).write_text(json.dumps(blob))


def read_checkpoint(path) -> dict:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


# ---------------------------------------------------------------- optimizer

class AdamState:
    def __init__(self, params: Iterable[Tensor]):
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in params}
        self.v = {id(p): np.zeros_like(p.data) for p in params}


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One in-place Adam update using each param's accumulated ``grad``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m[id(p)]
        v = state.v[id(p)]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState(self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.betas, self.eps)
