"""Invertible blocks and the base flow architectures built from them.

All blocks act on row batches ``x`` of shape ``(N, D)`` and implement

* ``forward(x) -> (y, logdet)`` with ``logdet`` of shape ``(N,)``
* ``inverse(y) -> x``

Coupling, ActNorm, permutation and split-residual blocks invert exactly.
Spectrally normalized residual blocks invert by fixed-point iteration; under
an active graph their inverse carries implicit-function gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .nn import MLP, Linear, Module, activation
from .numcore import Tensor

__all__ = [
    "Partition",
    "CouplingLayer",
    "ActNorm",
    "PermutationLayer",
    "SpectralResidualBlock",
    "SplitResidualLayer",
    "FlowStack",
    "PowerIterationState",
    "ConvergenceError",
    "ARCHITECTURES",
    "soft_clamp",
    "coupling_forward",
    "coupling_inverse",
    "actnorm_init",
    "iresnet_forward",
    "iresnet_invert",
    "power_iterate",
    "spectral_normalize",
    "build_architecture",
]

ARCHITECTURES = ("nice", "realnvp", "allinone", "iresnet", "revnet")


class ConvergenceError(RuntimeError):
    """Fixed-point inversion did not reach the tolerance."""


def _batch(x) -> Tensor:
    x = nc.as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"expected a (N, D) batch, got shape {x.shape}")
    return x


def _zero_logdet(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape[0]))


@dataclass(frozen=True)
class Partition:
    """Disjoint, nonempty index sets ``A`` (conditioning) and ``B`` (transformed)."""

    A: tuple
    B: tuple

    def __post_init__(self):
        a, b = set(self.A), set(self.B)
        if not a or not b:
            raise ValueError("both partition halves must be nonempty")
        if a & b:
            raise ValueError("partition halves overlap")
        if a | b != set(range(len(a) + len(b))):
            raise ValueError("partition must cover 0..D-1")

    @property
    def dim(self) -> int:
        return len(self.A) + len(self.B)

    @classmethod
    def halves(cls, dim: int, swap: bool = False) -> "Partition":
        """First ceil(D/2) indices vs the rest; ``swap`` exchanges the roles."""
        if dim < 2:
            raise ValueError("coupling needs D >= 2")
        cut = (dim + 1) // 2
        first, rest = tuple(range(cut)), tuple(range(cut, dim))
        return cls(rest, first) if swap else cls(first, rest)

    def restore_order(self) -> np.ndarray:
        """Column gather that maps ``[A | B]`` back to ``0..D-1``."""
        return np.argsort(np.array(self.A + self.B))


class Block(Module):
    dim: int

    def forward(self, x, with_logdet: bool = True) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y) -> Tensor:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def soft_clamp(q, clamp: float):
    """Bounded log-scale ``clamp * 2/pi * atan(q / clamp)``, strictly inside (-clamp, clamp)."""
    if isinstance(q, Tensor):
        return nc.mul(nc.atan(nc.mul(q, 1.0 / clamp)), clamp * 2.0 / math.pi)
    return clamp * 2.0 / math.pi * np.arctan(np.asarray(q) / clamp)


class CouplingLayer(Block):
    def __init__(
        self,
        partition: Partition,
        mode: str,
        hidden: Sequence[int],
        rng: np.random.Generator,
        clamp: float = 2.0,
        activation_name: str = "tanh",
    ):
        if mode not in ("additive", "affine"):
            raise ValueError(f"unknown coupling mode {mode!r}")
        if clamp <= 0:
            raise ValueError("clamp must be positive")
        self.partition = partition
        self.mode = mode
        self.clamp = float(clamp)
        self.dim = partition.dim
        n_a, n_b = len(partition.A), len(partition.B)
        n_out = n_b if mode == "additive" else 2 * n_b
        self.conditioner = MLP([n_a, *hidden, n_out], rng, activation_name, zero_last=True)
        self._a = np.array(partition.A)
        self._b = np.array(partition.B)
        self._restore = partition.restore_order()

    def _shift_scale(self, x_a: Tensor):
        q = self.conditioner(x_a)
        if self.mode == "additive":
            return q, None
        n_b = len(self._b)
        s = soft_clamp(q[:, :n_b], self.clamp)
        return q[:, n_b:], s

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        x_a, x_b = nc.take(x, self._a, 1), nc.take(x, self._b, 1)
        t, s = self._shift_scale(x_a)
        if s is None:
            y_b, logdet = x_b + t, _zero_logdet(x)
        else:
            y_b, logdet = x_b * nc.exp(s) + t, nc.sum(s, axis=1)
        return nc.take(nc.concat([x_a, y_b], 1), self._restore, 1), logdet

    def inverse(self, y):
        y = _batch(y)
        y_a, y_b = nc.take(y, self._a, 1), nc.take(y, self._b, 1)
        t, s = self._shift_scale(y_a)
        x_b = y_b - t if s is None else (y_b - t) * nc.exp(-s)
        return nc.take(nc.concat([y_a, x_b], 1), self._restore, 1)


def coupling_forward(layer: CouplingLayer, x):
    return layer.forward(x)


def coupling_inverse(layer: CouplingLayer, y):
    return layer.inverse(y)


class ActNorm(Block):
    """``y = exp(log_scale) * x + bias`` per dimension; identity until initialized."""

    _buffer_names = ("initialized",)

    def __init__(self, dim: int):
        self.dim = dim
        self.log_scale = Tensor(np.zeros(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.initialized = np.array(0.0)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        y = nc.bias_add(nc.row_mul(x, nc.exp(self.log_scale)), self.bias)
        logdet = nc.mul(nc.sum(self.log_scale), Tensor(np.ones(x.shape[0])))
        return y, logdet

    def inverse(self, y):
        y = _batch(y)
        return nc.row_mul(nc.bias_add(y, -self.bias), nc.exp(-self.log_scale))


def actnorm_init(layer: ActNorm, batch, center: bool = True) -> None:
    """Data-dependent init: the batch maps to zero mean, unit (population) std per dimension.

    With ``center=False`` the bias stays zero and each dimension is divided by its
    root mean square instead, so the origin remains a fixed point of the layer.
    """
    data = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("ActNorm init needs a batch of at least two rows")
    mean = data.mean(axis=0) if center else np.zeros(data.shape[1])
    std = np.sqrt(np.mean((data - mean) ** 2, axis=0))
    if np.any(std <= 1e-8):
        bad = np.flatnonzero(std <= 1e-8).tolist()
        raise ValueError(f"degenerate (constant) dimensions in ActNorm init batch: {bad}")
    layer.log_scale.data = -np.log(std)
    layer.bias.data = -mean / std
    layer.initialized = np.array(1.0)


class PermutationLayer(Block):
    _buffer_names = ("perm",)

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.perm = rng.permutation(dim)

    @property
    def inverse_perm(self) -> np.ndarray:
        return np.argsort(self.perm)

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        return nc.take(x, self.perm, 1), _zero_logdet(x)

    def inverse(self, y):
        return nc.take(_batch(y), self.inverse_perm, 1)


# --------------------------------------------------------------------------- spectral normalization


@dataclass
class PowerIterationState:
    """Left/right singular vector estimates ``a`` (rows of W) and ``b`` (columns)."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, shape, rng: np.random.Generator) -> "PowerIterationState":
        a = rng.normal(size=shape[0])
        b = rng.normal(size=shape[1])
        return cls(a / np.linalg.norm(a), b / np.linalg.norm(b))


def _normalized(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return fallback if n < 1e-300 else v / n


def power_iterate(weight: np.ndarray, state: PowerIterationState, iters: int = 1) -> float:
    """Refine ``state`` in place; returns the estimate ``a^T W b`` of the top singular value."""
    for _ in range(iters):
        state.b = _normalized(weight.T @ state.a, state.b)
        state.a = _normalized(weight @ state.b, state.a)
    return float(state.a @ weight @ state.b)


def _apply_spectral(weight: Tensor, state: PowerIterationState, c: float) -> Tensor:
    sigma = nc.sum(nc.mul(nc.matmul(Tensor(state.a[None, :]), weight), Tensor(state.b[None, :])))
    if sigma.item() <= c:
        return weight
    return nc.mul(weight, nc.div(c, sigma))


def spectral_normalize(weight, state: PowerIterationState, c: float, iters: int = 1) -> Tensor:
    """``W * min(1, c / sigma_hat(W))`` after ``iters`` power iterations on ``state``."""
    if not 0 < c < 1:
        raise ValueError("Lipschitz target c must lie in (0, 1)")
    if iters < 1:
        raise ValueError("at least one power iteration is required")
    weight = nc.as_tensor(weight)
    power_iterate(weight.data, state, iters)
    return _apply_spectral(weight, state, c)


def _solve_rows(mats: np.ndarray, r: Tensor) -> Tensor:
    """``out[n] = mats[n]^{-1} r[n]`` with ``mats`` treated as constants."""
    out = np.linalg.solve(mats, r.data[..., None])[..., 0]
    return nc._make(
        out,
        (r,),
        lambda g: (np.linalg.solve(np.swapaxes(mats, 1, 2), g[..., None])[..., 0],),
        "solve_rows",
    )


class SpectralResidualBlock(Block):
    """``g(x) = x + F(x)`` with every weight of ``F`` scaled to spectral norm <= c."""

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int],
        rng: np.random.Generator,
        c: float = 0.9,
        activation_name: str = "tanh",
        tol: float = 1e-9,
        max_iter: int = 200,
    ):
        if not 0 < c < 1:
            raise ValueError("Lipschitz target c must lie in (0, 1)")
        if activation_name not in ("tanh", "linear"):
            # the Lipschitz bound needs a 1-Lipschitz activation
            raise ValueError("iresnet blocks support 'tanh' or 'linear' activations")
        self.dim = dim
        self.c = float(c)
        self.tol = tol
        self.max_iter = max_iter
        self.activation_name = activation_name
        sizes = [dim, *hidden, dim]
        self.layers = [
            Linear(a, b, rng, zero=i == len(sizes) - 2) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.sn = [PowerIterationState.random(layer.weight.shape, rng) for layer in self.layers]
        self.update_spectral(iters=20)

    def named_buffers(self, prefix: str = ""):
        for i, st in enumerate(self.sn):
            yield f"{prefix}sn.{i}.a", st.a
            yield f"{prefix}sn.{i}.b", st.b

    def update_spectral(self, iters: int = 1) -> None:
        for layer, st in zip(self.layers, self.sn):
            power_iterate(layer.weight.data, st, iters)

    def normalized_weights(self) -> list[Tensor]:
        return [_apply_spectral(layer.weight, st, self.c) for layer, st in zip(self.layers, self.sn)]

    def spectral_estimates(self) -> list[float]:
        return [float(st.a @ w.data @ st.b) for st, w in zip(self.sn, self.normalized_weights())]

    def residual(self, x, weights=None) -> Tensor:
        weights = self.normalized_weights() if weights is None else weights
        act = activation(self.activation_name)
        h = nc.as_tensor(x)
        for i, (layer, w) in enumerate(zip(self.layers, weights)):
            h = layer(h, weight=w)
            if i < len(self.layers) - 1:
                h = act(h)
        return h

    def _residual_np(self, x: np.ndarray, mats) -> np.ndarray:
        h = x
        for i, (layer, w) in enumerate(zip(self.layers, mats)):
            h = h @ w + layer.bias.data
            if i < len(self.layers) - 1 and self.activation_name == "tanh":
                h = np.tanh(h)
        return h

    def jacobian(self, x: np.ndarray, mats=None) -> np.ndarray:
        """Per-row Jacobian ``dF_j / dx_i`` of the residual branch, shape ``(N, D, D)``."""
        if mats is None:
            with nc.no_grad():
                mats = [w.data for w in self.normalized_weights()]
        n = x.shape[0]
        J = None
        h = x
        for i, (layer, w) in enumerate(zip(self.layers, mats)):
            z = h @ w + layer.bias.data
            J = np.broadcast_to(w.T, (n, *w.T.shape)) if J is None else np.matmul(w.T, J)
            if i < len(self.layers) - 1 and self.activation_name == "tanh":
                h = np.tanh(z)
                J = (1.0 - h * h)[:, :, None] * J
            else:
                h = z
        return np.array(J)

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        y = x + self.residual(x)
        if not with_logdet:
            return y, _zero_logdet(x)
        J = self.jacobian(x.data)
        _, logdet = np.linalg.slogdet(np.eye(self.dim) + J)
        return y, Tensor(logdet)

    def invert_array(self, y: np.ndarray, tol=None, max_iter=None, history=None):
        """Banach iteration ``x <- y - F(x)`` from ``x = y``; returns ``(x, iterations)``."""
        tol = self.tol if tol is None else tol
        max_iter = self.max_iter if max_iter is None else max_iter
        with nc.no_grad():
            mats = [w.data for w in self.normalized_weights()]
        x = np.array(y, dtype=np.float64)
        for it in range(1, max_iter + 1):
            fx = self._residual_np(x, mats)
            err = float(np.max(np.abs(x + fx - y))) if x.size else 0.0
            if history is not None:
                history.append(err)
            if err <= tol:
                return x, it
            x = y - fx
        raise ConvergenceError(
            f"fixed-point inversion did not reach tol={tol:g} in {max_iter} iterations (residual {err:.3e})"
        )

    def inverse(self, y):
        y = _batch(y)
        x_star, _ = self.invert_array(y.data)
        params_need_grad = any(p.requires_grad for p in self.parameters())
        if not nc.is_grad_enabled() or not (y.requires_grad or params_need_grad):
            return Tensor(x_star)
        # implicit function theorem: d x = -(I + J)^{-1} d(x* + F(x*) - y); value stays x*
        weights = self.normalized_weights()
        mats = [w.data for w in weights]
        A = np.eye(self.dim) + self.jacobian(x_star, mats)
        xs = Tensor(x_star)
        r = xs + self.residual(xs, weights) - y
        corr = _solve_rows(A, r)
        return (xs + corr.detach()) - corr


def iresnet_forward(block: SpectralResidualBlock, x) -> Tensor:
    x = _batch(x)
    return x + block.residual(x)


def iresnet_invert(block: SpectralResidualBlock, y, tol: float = 1e-9, max_iter: int = 200, history=None):
    """Fixed-point inverse of one block; returns ``(x, iterations)`` as numpy."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    return block.invert_array(y, tol, max_iter, history)


class SplitResidualLayer(Block):
    """``y_A = x_A + F(x_B)``, then ``y_B = x_B + G(y_A)``; volume preserving."""

    def __init__(self, partition: Partition, hidden: Sequence[int], rng: np.random.Generator, activation_name="tanh"):
        self.partition = partition
        self.dim = partition.dim
        n_a, n_b = len(partition.A), len(partition.B)
        self.F = MLP([n_b, *hidden, n_a], rng, activation_name, zero_last=True)
        self.G = MLP([n_a, *hidden, n_b], rng, activation_name, zero_last=True)
        self._a = np.array(partition.A)
        self._b = np.array(partition.B)
        self._restore = partition.restore_order()

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        x_a, x_b = nc.take(x, self._a, 1), nc.take(x, self._b, 1)
        y_a = x_a + self.F(x_b)
        y_b = x_b + self.G(y_a)
        return nc.take(nc.concat([y_a, y_b], 1), self._restore, 1), _zero_logdet(x)

    def inverse(self, y):
        y = _batch(y)
        y_a, y_b = nc.take(y, self._a, 1), nc.take(y, self._b, 1)
        x_b = y_b - self.G(y_a)
        x_a = y_a - self.F(x_b)
        return nc.take(nc.concat([x_a, x_b], 1), self._restore, 1)


class FlowStack(Block):
    """Blocks composed in order; the empty stack is the identity map."""

    def __init__(self, blocks: Sequence[Block], dim: int, name: str = "identity"):
        for b in blocks:
            if b.dim != dim:
                raise ValueError(f"block of dim {b.dim} in a stack of dim {dim}")
        self.blocks = list(blocks)
        self.dim = dim
        self.name = name

    def __len__(self):
        return len(self.blocks)

    def forward(self, x, with_logdet=True):
        x = _batch(x)
        logdet = _zero_logdet(x)
        for b in self.blocks:
            x, ld = b.forward(x, with_logdet)
            if with_logdet:
                logdet = logdet + ld
        return x, logdet

    def inverse(self, y):
        y = _batch(y)
        for b in reversed(self.blocks):
            y = b.inverse(y)
        return y

    def encode(self, x) -> Tensor:
        return self.forward(x, with_logdet=False)[0]

    def initialize(self, batch, center: bool = True) -> None:
        """Data-dependent init of every uninitialized ActNorm, in stack order."""
        with nc.no_grad():
            h = _batch(batch)
            for b in self.blocks:
                if isinstance(b, ActNorm) and not b.initialized:
                    actnorm_init(b, h, center)
                h, _ = b.forward(h, with_logdet=False)

    def update_spectral(self, iters: int = 1) -> None:
        for b in self.blocks:
            if isinstance(b, SpectralResidualBlock):
                b.update_spectral(iters)


def build_architecture(
    name: str,
    dim: int,
    depth: int,
    hidden: Sequence[int] = (64, 64),
    rng: np.random.Generator | int | None = None,
    clamp: float = 2.0,
    lipschitz: float = 0.9,
    activation_name: str = "tanh",
) -> FlowStack:
    """Assemble one of ``nice``, ``realnvp``, ``allinone``, ``iresnet``, ``revnet``.

    Every stack starts as the identity map: conditioner and residual output
    layers are zero and ActNorm passes through until initialized.
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if dim < 2:
        raise ValueError("flows need D >= 2")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hidden = list(hidden)
    blocks: list[Block] = []
    for k in range(depth):
        part = Partition.halves(dim, swap=bool(k % 2))
        if name == "nice":
            blocks.append(CouplingLayer(part, "additive", hidden, rng, clamp, activation_name))
        elif name == "realnvp":
            blocks.append(CouplingLayer(part, "affine", hidden, rng, clamp, activation_name))
        elif name == "allinone":
            blocks.append(ActNorm(dim))
            blocks.append(PermutationLayer(dim, rng))
            blocks.append(CouplingLayer(part, "affine", hidden, rng, clamp, activation_name))
        elif name == "iresnet":
            act = activation_name if activation_name in ("tanh", "linear") else "tanh"
            blocks.append(SpectralResidualBlock(dim, hidden, rng, lipschitz, act))
        else:
            blocks.append(SplitResidualLayer(part, hidden, rng, activation_name))
    return FlowStack(blocks, dim, name)
