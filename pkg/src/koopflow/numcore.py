"""Dense float64 tensors with reverse-mode gradient accumulation.

Every op builds a node that remembers its parents and a closure mapping the
upstream gradient to parent gradients. ``backward`` orders the reachable nodes
topologically (the tape) and replays them in reverse.

Elementwise arithmetic only broadcasts scalars against tensors. Row-wise bias
addition and reductions are separate ops with explicit gradient rules.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "log1p",
    "tanh",
    "sigmoid",
    "silu",
    "atan",
    "square",
    "sqrt",
    "elementwise",
    "bias_add",
    "row_mul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "concat",
    "pairwise_sqdist",
    "build_tape",
    "backward",
    "finite_diff_grad",
    "parameters_grad_check",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; record it on the graph when any parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _broadcast_pair(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if _is_scalar(a) or _is_scalar(b):
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting)")


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if grad.shape == like.shape:
        return grad
    return np.full(like.shape, grad.sum())


# --------------------------------------------------------------------------- binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * ad / (bd * bd), b)),
        "div",
    )


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bias_add(x, b) -> Tensor:
    """``x[..., k] + b[k]`` for every leading index."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "bias_add")


def row_mul(x, s) -> Tensor:
    """``x[..., k] * s[k]`` for every leading index."""
    x, s = as_tensor(x), as_tensor(s)
    if s.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ValueError(f"row_mul: scale {s.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    xd, sd = x.data, s.data
    return _make(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=lead)), "row_mul")


# --------------------------------------------------------------------------- unary


def _unary(x, fn, dfn, op) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fn(x.data)
    xd = x.data
    return _make(out, (x,), lambda g: (g * dfn(xd, out),), op)


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda x, y: -np.ones_like(x), "neg")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda x, y: y, "exp")


def log(x) -> Tensor:
    return _unary(x, np.log, lambda x, y: 1.0 / x, "log")


def log1p(x) -> Tensor:
    return _unary(x, np.log1p, lambda x, y: 1.0 / (1.0 + x), "log1p")


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def _silu_grad(x, y):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def silu(x) -> Tensor:
    return _unary(x, lambda v: v * _sigmoid(v), _silu_grad, "silu")


def atan(x) -> Tensor:
    return _unary(x, np.arctan, lambda x, y: 1.0 / (1.0 + x * x), "atan")


def square(x) -> Tensor:
    return _unary(x, np.square, lambda x, y: 2.0 * x, "square")


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "log1p": log1p,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "silu": silu,
    "atan": atan,
    "square": square,
    "sqrt": sqrt,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name, e.g. ``elementwise("silu", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------------------- shape / reduction


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def take(x, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros(shape)
        g_moved = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        full_moved = np.moveaxis(full, ax, 0)
        np.add.at(full_moved, idx, g_moved)
        return (full,)

    return _make(np.take(x.data, idx, axis=ax), (x,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def pairwise_sqdist(x, centers) -> Tensor:
    """``out[n, j] = ||x[n] - centers[j]||^2`` for ``x: N x p`` and ``centers: m x p``."""
    x, c = as_tensor(x), as_tensor(centers)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"pairwise_sqdist: incompatible shapes {x.shape}, {c.shape}")
    xd, cd = x.data, c.data
    diff = xd[:, None, :] - cd[None, :, :]
    out = np.einsum("njk,njk->nj", diff, diff)

    def bw(g):
        gx = 2.0 * np.einsum("nj,njk->nk", g, diff)
        gc = -2.0 * np.einsum("nj,njk->jk", g, diff)
        return gx, gc

    return _make(out, (x, c), bw, "pairwise_sqdist")


# --------------------------------------------------------------------------- reverse pass


def build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded graph reaching ``root``; inputs precede outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(f: Callable, x, h: float = 1e-5, target: Tensor | None = None) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    With ``target`` given, that tensor's data is perturbed in place (and restored)
    instead of passing a fresh tensor to ``f``; used for parameter checks.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if target is not None:
        # perturbing in place needs a real array (a numpy scalar would reshape to a copy)
        target.data = np.array(target.data, dtype=np.float64)
        base = target.data
    else:
        base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.shape)

    def value(arr):
        with no_grad():
            v = f(target if target is not None else Tensor(arr.reshape(base.shape)))
        return float(v.item() if isinstance(v, Tensor) else v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(flat)
        flat[i] = orig - h
        fm = value(flat)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def parameters_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences over ``params``.

    The error of each parameter tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = finite_diff_grad(lambda _: loss_fn(), p, h, target=p).data
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
