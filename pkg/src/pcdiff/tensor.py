"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor requiring gradients records a node with a
strictly increasing id.  :func:`backward` walks the reachable nodes in
decreasing id order, which is a valid reverse topological order because a
node can only be created after all of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "AdamHyper",
    "AdamState",
    "ShapeError",
    "DomainError",
    "ContractError",
    "make_rng",
    "as_tensor",
    "forward_op",
    "backward",
    "adam_step",
    "OPS",
]

LEAKY_SLOPE = 0.01

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator over the counter-based Philox bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, *, allow_nonfinite: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise DomainError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str, bw) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._id = next(_ids)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = bw
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), "detach", None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        grads = _run_backward(self)
        for node, g in grads.items():
            if node._backward is None and node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar ------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), "add",
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), "sub",
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), "mul",
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` may be a 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return Tensor._result(out, (a, b), "matmul", bw)


# -- reductions ---------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

    return Tensor._result(np.cumsum(a.data, axis=ax), (a,), "cumsum", bw)


# -- elementwise unary ---------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be positive")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor._result(out, (a,), "softplus",
                          lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return Tensor._result(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(np.sin(ad), (a,), "sin", lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(np.cos(ad), (a,), "cos", lambda g: (-g * np.sin(ad),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return Tensor._result(out, (a,), "sqrt", bw)


def clamp_min(a, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    keep = a.data > lo
    return Tensor._result(np.where(keep, a.data, lo), (a,), "clamp_min", lambda g: (g * keep,))


# -- row-wise ------------------------------------------------------------------
def l2_norm_rows(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis.

    The gradient at an exactly zero row is taken as zero.
    """
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt(np.einsum("...i,...i->...", ad, ad) + eps)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return ((g / safe)[..., None] * ad * (out > 0)[..., None],)

    return Tensor._result(out, (a,), "l2_norm_rows", bw)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), "softmax_rows", bw)


# -- structural ------------------------------------------------------------------
def gather_rows(a, idx) -> Tensor:
    """``a[idx]`` along axis 0 for an integer array ``idx`` of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (ga,)

    return Tensor._result(a.data[idx], (a,), "gather_rows", bw)


def index(a, key) -> Tensor:
    """Basic slicing; the adjoint scatters back into a zero array."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        np.add.at(ga, key, g)
        return (ga,)

    return Tensor._result(np.array(a.data[key]), (a,), "index", bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return Tensor._result(out, (a,), "broadcast", lambda g: (_unbroadcast(g, sa),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {sa} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), "reshape", lambda g: (g.reshape(sa),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), "transpose",
                          lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), "concat", bw)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
    "sum": tsum,
    "mean": mean,
    "cumsum": cumsum,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "leaky-relu": leaky_relu,
    "sin": sin,
    "cos": cos,
    "square": square,
    "sqrt": sqrt,
    "clamp-min": clamp_min,
    "l2-norm-rows": l2_norm_rows,
    "softmax-rows": softmax_rows,
    "gather-rows": gather_rows,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the op registered under ``kind`` (e.g. ``"softmax-rows"``)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------------
def _run_backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n._id in nodes:
            continue
        nodes[n._id] = n
        stack.extend(p for p in n._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = np.array(pg, dtype=np.float64) if prev is None else prev + pg
    return leaves


class ParamStore:
    """Named trainable tensors; iteration is in lexicographic name order."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, self._params[n]) for n in self.names())

    def __iter__(self):
        return iter(self.names())

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing the same tensors for names under ``prefix``."""
        view = ParamStore()
        view._params = {n: t for n, t in self._params.items() if n.startswith(prefix)}
        return view

    def set(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        if value.shape != t.shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} != {t.shape}")
        t.data = np.array(value, dtype=np.float64)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())


def backward(loss: Tensor, store: ParamStore) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every parameter in ``store``.

    Parameters the loss does not depend on get zero gradients.
    """
    leaves = _run_backward(loss)
    return {
        name: np.array(leaves[t]) if t in leaves else np.zeros(t.shape)
        for name, t in store.items()
    }


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], hyper: AdamHyper,
              state: AdamState) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update, in place on ``store`` and ``state``."""
    missing = [n for n in store.names() if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing[:3]}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in store.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return store, state
