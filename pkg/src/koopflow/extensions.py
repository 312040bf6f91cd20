"""Non-invertible feature extensions and the hybrid encoder/decoder.

The hybrid encoder concatenates ``[flow(x) | extension(x)]``. Decoding inverts
the flow on the first ``p`` latent coordinates and never reads the rest.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .flows import FlowStack
from .nn import Linear, Module, activation
from .numcore import Tensor

__all__ = [
    "EXTENSIONS",
    "ExtensionNet",
    "RBFExtension",
    "MultiScaleConvExtension",
    "MultiTimescaleExtension",
    "HybridEncoder",
    "rbf_features",
    "median_gamma",
    "multiscale_conv_features",
    "multitimescale_features",
    "build_extension",
    "identity_ablation_encoder",
]

EXTENSIONS = ("multiscale_conv", "rbf_kernel", "multitimescale")


def _rows(x) -> tuple[Tensor, bool]:
    x = nc.as_tensor(x)
    if x.ndim == 1:
        return nc.reshape(x, (1, -1)), True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or (N, p) batch, got shape {x.shape}")
    return x, False


class ExtensionNet(Module):
    variant = "none"
    p: int
    m: int

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        x, single = _rows(x)
        if x.shape[1] != self.p:
            raise ValueError(f"{self.variant} extension expects input dim {self.p}, got {x.shape[1]}")
        out = self.features(x)
        return nc.reshape(out, (-1,)) if single else out


# --------------------------------------------------------------------------- RBF


def rbf_features(x, centers, gamma) -> Tensor:
    """``exp(-gamma * ||x - c_j||^2)`` for each center row ``c_j``."""
    x, single = _rows(x)
    gamma = nc.as_tensor(gamma)
    if np.any(gamma.data <= 0):
        raise ValueError("gamma must be positive")
    out = nc.exp(nc.neg(nc.mul(nc.pairwise_sqdist(x, centers), gamma)))
    return nc.reshape(out, (-1,)) if single else out


def median_gamma(centers: np.ndarray) -> float:
    """``1 / (2 * median^2)`` over distinct pairwise center distances."""
    c = np.asarray(centers, dtype=np.float64)
    if c.shape[0] < 2:
        return 1.0
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    med = np.median(d[np.triu_indices(c.shape[0], k=1)])
    return 1.0 / (2.0 * med**2) if med > 0 else 1.0


class RBFExtension(ExtensionNet):
    """Gaussian kernel features against frozen centers; ``gamma`` is trained in log space."""

    variant = "rbf_kernel"
    _buffer_names = ("centers",)

    def __init__(self, centers, gamma: float | None = None):
        self.centers = np.array(centers, dtype=np.float64)
        self.m, self.p = self.centers.shape
        gamma = median_gamma(self.centers) if gamma is None else gamma
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.log_gamma = Tensor(np.log(gamma), requires_grad=True)

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma.data))

    @classmethod
    def from_data(cls, states, m: int, rng: np.random.Generator) -> "RBFExtension":
        states = np.asarray(states, dtype=np.float64)
        idx = rng.choice(states.shape[0], size=m, replace=states.shape[0] < m)
        return cls(states[idx])

    def features(self, x):
        return rbf_features(x, self.centers, nc.exp(self.log_gamma))


# --------------------------------------------------------------------------- multi-scale convolution


def _unfold_index(p: int, width: int) -> np.ndarray:
    return np.arange(p)[:, None] + np.arange(width)[None, :]


def multiscale_conv_features(x, kernels, biases=None, activation_name: str = "silu") -> Tensor:
    """Same-padded 1-D cross-correlation per kernel, activation, then mean over positions.

    ``kernels`` is a sequence of ``(channels, width)`` banks (odd widths); the
    per-bank channel means are concatenated in order.
    """
    x, single = _rows(x)
    n, p = x.shape
    act = activation(activation_name)
    outs = []
    for i, bank in enumerate(kernels):
        bank = nc.as_tensor(bank)
        channels, width = bank.shape
        pad = width // 2
        zeros = Tensor(np.zeros((n, pad)))
        padded = nc.concat([zeros, x, zeros], axis=1) if pad else x
        patches = nc.reshape(nc.take(padded, _unfold_index(p, width), axis=1), (n * p, width))
        pre = nc.matmul(patches, nc.transpose(bank))
        if biases is not None:
            pre = nc.bias_add(pre, nc.as_tensor(biases[i]))
        outs.append(nc.mean(nc.reshape(act(pre), (n, p, channels)), axis=1))
    out = nc.concat(outs, axis=1) if len(outs) > 1 else outs[0]
    return nc.reshape(out, (-1,)) if single else out


def _split_channels(m: int, k: int) -> list[int]:
    return [m // k + (1 if i < m % k else 0) for i in range(k)]


class MultiScaleConvExtension(ExtensionNet):
    variant = "multiscale_conv"

    def __init__(
        self,
        p: int,
        m: int,
        rng: np.random.Generator,
        widths: Sequence[int] = (3, 5, 9),
        activation_name: str = "silu",
    ):
        used = [w for w in widths if w <= p]
        if not used:
            raise ValueError(f"input dim {p} is narrower than every kernel width {tuple(widths)}")
        counts = _split_channels(m, len(used))
        self.p, self.m = p, m
        self.widths = [w for w, c in zip(used, counts) if c > 0]
        self.activation_name = activation_name
        self.kernels = [
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(w), (c, w)), requires_grad=True)
            for w, c in zip(used, counts)
            if c > 0
        ]
        self.biases = [Tensor(np.zeros(k.shape[0]), requires_grad=True) for k in self.kernels]

    def named_parameters(self, prefix: str = ""):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}kernels.{i}", k
            yield f"{prefix}biases.{i}", b

    def features(self, x):
        return multiscale_conv_features(x, self.kernels, self.biases, self.activation_name)


# --------------------------------------------------------------------------- residual SiLU network


class _ResidualBlock(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.inner = Linear(width, width, rng)
        self.outer = Linear(width, width, rng)

    def __call__(self, h):
        return h + self.outer(nc.silu(self.inner(h)))


class MultiTimescaleExtension(ExtensionNet):
    """Input projection, residual SiLU blocks with skip connections, output projection."""

    variant = "multitimescale"

    def __init__(self, p: int, m: int, rng: np.random.Generator, hidden: int = 64, n_blocks: int = 4):
        self.p, self.m = p, m
        self.w_in = Linear(p, hidden, rng)
        self.blocks = [_ResidualBlock(hidden, rng) for _ in range(n_blocks)]
        self.w_out = Linear(hidden, m, rng)

    def features(self, x):
        h = self.w_in(x)
        for block in self.blocks:
            h = block(h)
        return self.w_out(h)


def multitimescale_features(x, net: MultiTimescaleExtension) -> Tensor:
    return net(x)


def build_extension(
    variant: str | None,
    p: int,
    m: int | None = None,
    rng: np.random.Generator | int | None = None,
    states=None,
    **kwargs,
) -> ExtensionNet | None:
    """Factory; ``m`` defaults to ``p``. RBF centers are drawn from ``states``."""
    if variant in (None, "none"):
        return None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    m = p if m is None else m
    if variant == "rbf_kernel":
        if states is None:
            raise ValueError("rbf_kernel extension needs training states for its centers")
        return RBFExtension.from_data(states, m, rng)
    if variant == "multiscale_conv":
        return MultiScaleConvExtension(p, m, rng, **kwargs)
    if variant == "multitimescale":
        return MultiTimescaleExtension(p, m, rng, **kwargs)
    raise ValueError(f"unknown extension {variant!r}; choose from {EXTENSIONS}")


# --------------------------------------------------------------------------- hybrid encoder


class HybridEncoder(Module):
    def __init__(self, flow: FlowStack, extension: ExtensionNet | None = None):
        if extension is not None and extension.p != flow.dim:
            raise ValueError("extension input dim must equal the flow dim")
        self.flow = flow
        self.extension = extension

    @property
    def p(self) -> int:
        return self.flow.dim

    @property
    def m(self) -> int:
        return 0 if self.extension is None else self.extension.m

    @property
    def latent_dim(self) -> int:
        return self.p + self.m

    def encode(self, x) -> Tensor:
        x, single = _rows(x)
        if x.shape[1] != self.p:
            raise ValueError(f"encoder expects dim {self.p}, got {x.shape[1]}")
        z = self.flow.encode(x)
        if self.extension is not None:
            z = nc.concat([z, self.extension(x)], axis=1)
        return nc.reshape(z, (-1,)) if single else z

    def decode(self, z) -> Tensor:
        z, single = _rows(z)
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"decoder expects latent dim {self.latent_dim}, got {z.shape[1]}")
        x = self.flow.inverse(z[:, : self.p])
        return nc.reshape(x, (-1,)) if single else x

    def initialize(self, batch, center: bool = True) -> None:
        self.flow.initialize(batch, center)


def identity_ablation_encoder(extension: ExtensionNet | None, p: int | None = None) -> HybridEncoder:
    """Identity in place of the invertible part: latent ``[x | a(x)]``."""
    if extension is None and p is None:
        raise ValueError("need the state dimension when there is no extension")
    dim = extension.p if extension is not None else p
    return HybridEncoder(FlowStack([], dim), extension)
