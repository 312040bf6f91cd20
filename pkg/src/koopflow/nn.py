"""Parameter containers and dense layers on top of :mod:`koopflow.numcore`."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

ACTIVATIONS = {
    "tanh": nc.tanh,
    "silu": nc.silu,
    "linear": lambda x: x,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


class Module:
    """Walks its attributes to find parameters, buffers and submodules.

    Parameters are ``Tensor`` attributes with ``requires_grad``. Buffers are
    numpy arrays whose names are listed in ``_buffer_names``; they are saved in
    checkpoints but not optimized.
    """

    _buffer_names: tuple = ()

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(expected) | buffers) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in expected.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()
            p.zero_grad()
        for name in buffers:
            owner, attr = self._resolve(name)
            old = getattr(owner, attr)
            setattr(owner, attr, np.asarray(state[name], dtype=np.asarray(old).dtype).reshape(np.shape(old)))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        i = 0
        while i < len(parts) - 1:
            nxt = getattr(obj, parts[i])
            if isinstance(nxt, (list, tuple)):
                i += 1
                nxt = nxt[int(parts[i])]
            obj = nxt
            i += 1
        return obj, parts[-1]


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        y = nc.matmul(x, self.weight if weight is None else weight)
        return y if self.bias is None else nc.bias_add(y, self.bias)


class MLP(Module):
    """Dense network with a shared hidden activation and a linear output layer."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation_name: str = "tanh",
        zero_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.activation_name = activation_name
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        act = activation(self.activation_name)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = act(h)
        return h
