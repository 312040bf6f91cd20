"""Linear latent dynamics: operator, rollout, training losses and the EDMD fit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .nn import Module
from .numcore import Tensor

__all__ = [
    "KoopmanOperator",
    "KoopmanModel",
    "LossReport",
    "SingularFitError",
    "rollout",
    "sliding_windows",
    "loss_terms",
    "koopman_consistency_loss",
    "prediction_loss",
    "total_loss",
    "edmd_fit",
]


class SingularFitError(np.linalg.LinAlgError):
    """Normal equations are singular and no ridge term was given."""


class KoopmanOperator(Module):
    """Square latent operator acting on column states, ``z_{t+1} = K z_t``."""

    def __init__(self, dim: int, K=None):
        K = np.eye(dim) if K is None else np.array(K, dtype=np.float64)
        if K.shape != (dim, dim):
            raise ValueError(f"Koopman matrix must be {dim}x{dim}, got {K.shape}")
        self.K = Tensor(K, requires_grad=True)

    @property
    def dim(self) -> int:
        return self.K.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.K.data

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.K.data))))

    def step(self, z: Tensor) -> Tensor:
        """One step for a row batch ``z`` of shape ``(N, dim)``."""
        return nc.matmul(z, nc.transpose(self.K))


def _operator(K) -> KoopmanOperator:
    if isinstance(K, KoopmanOperator):
        return K
    arr = K.data if isinstance(K, Tensor) else np.asarray(K, dtype=np.float64)
    op = KoopmanOperator(arr.shape[0], arr)
    if isinstance(K, Tensor):
        op.K = K
    return op


def rollout(K, z0, H: int) -> list[Tensor]:
    """``[K z0, K^2 z0, ..., K^H z0]`` by repeated matrix-vector products.

    ``z0`` may be a single state ``(q,)`` or a row batch ``(N, q)``; outputs
    keep that layout.
    """
    if H < 1:
        raise ValueError("horizon must be >= 1")
    op = _operator(K)
    z = nc.as_tensor(z0)
    single = z.ndim == 1
    if single:
        z = nc.reshape(z, (1, -1))
    out = []
    for _ in range(H):
        z = op.step(z)
        out.append(nc.reshape(z, (-1,)) if single else z)
    return out


class KoopmanModel(Module):
    """Encoder, latent operator and a decoder that reads only the invertible coordinates."""

    def __init__(self, encoder, koopman: KoopmanOperator | None = None):
        self.encoder = encoder
        self.koopman = koopman if koopman is not None else KoopmanOperator(encoder.latent_dim)
        if self.koopman.dim != encoder.latent_dim:
            raise ValueError("Koopman dimension must match the encoder's latent dimension")

    @property
    def p(self) -> int:
        return self.encoder.p

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    def encode(self, x) -> Tensor:
        return self.encoder.encode(x)

    def decode(self, z) -> Tensor:
        return self.encoder.decode(z)

    def predict(self, x0, steps: int, reencode_every: int = 0, truth=None) -> np.ndarray:
        """Decoded rollout ``[x0_hat, x1_hat, ..., x_steps_hat]`` from one state.

        With ``reencode_every = k > 0`` the latent is re-encoded from ``truth``
        every ``k`` steps (diagnostic teacher forcing).
        """
        with nc.no_grad():
            x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
            z = self.encode(x0)
            zs = [z]
            for k in range(1, steps + 1):
                if reencode_every and truth is not None and k % reencode_every == 0:
                    z = self.encode(np.atleast_2d(truth[k]))
                else:
                    z = self.koopman.step(z)
                zs.append(z)
            Z = nc.concat(zs, axis=0)
            return self.decode(Z).data


@dataclass
class LossReport:
    prediction_loss: float
    koopman_loss: float
    total: float
    per_horizon: list = field(default_factory=list)


def sliding_windows(sequences, H: int) -> np.ndarray:
    """All length ``H + 1`` windows of a ``(B, L, D)`` batch (or list of ``(L, D)`` arrays)."""
    if isinstance(sequences, np.ndarray) and sequences.ndim == 3:
        sequences = list(sequences)
    wins = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.shape[0] < H + 1:
            raise ValueError(f"horizon {H} needs sequences of length >= {H + 1}, got {seq.shape[0]}")
        w = np.lib.stride_tricks.sliding_window_view(seq, H + 1, axis=0)
        wins.append(np.moveaxis(w, -1, 1))
    return np.concatenate(wins, axis=0)


def loss_terms(model: KoopmanModel, windows, H: int):
    """Prediction and Koopman losses over windows ``(B, H + 1, D)`` sharing one encode pass.

    Returns ``(prediction, koopman, per_horizon)``; the first two are scalar
    tensors, ``per_horizon`` is the prediction loss at each step as numpy.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] < H + 1:
        raise ValueError(f"windows must be (B, >= {H + 1}, D); got {windows.shape}")
    windows = windows[:, : H + 1]
    B, L, D = windows.shape
    q = model.latent_dim
    z = nc.reshape(model.encode(windows.reshape(B * L, D)), (B, L, q))
    zk = z[:, 0, :]
    preds = []
    for _ in range(H):
        zk = model.koopman.step(zk)
        preds.append(nc.reshape(zk, (B, 1, q)))
    zhat = nc.concat(preds, axis=1)
    koop = nc.sum(nc.square(zhat - z[:, 1:, :])) * (1.0 / (B * H))
    xhat = model.decode(nc.reshape(zhat, (B * H, q)))
    err = nc.square(xhat - Tensor(windows[:, 1:, :].reshape(B * H, D)))
    pred = nc.sum(err) * (1.0 / (B * H))
    per_h = err.data.reshape(B, H, D).sum(axis=2).mean(axis=0)
    return pred, koop, per_h


def _as_windows(batch, H):
    arr = batch if isinstance(batch, np.ndarray) and batch.ndim == 3 and batch.shape[1] == H + 1 else None
    return arr if arr is not None else sliding_windows(batch, H)


def koopman_consistency_loss(model: KoopmanModel, batch, H: int) -> Tensor:
    """Mean over start times and steps of ``||K^k z_t - encode(x_{t+k})||^2`` on the full latent."""
    return loss_terms(model, _as_windows(batch, H), H)[1]


def prediction_loss(model: KoopmanModel, batch, H: int) -> Tensor:
    """Mean over start times and steps of ``||decode(K^k encode(x_t)) - x_{t+k}||^2``."""
    return loss_terms(model, _as_windows(batch, H), H)[0]


def total_loss(pred, koop, lam: float = 1.0):
    """``log1p(pred) + lam * log1p(koop)``; tensors in, tensor out."""
    if lam <= 0:
        raise ValueError("loss weight must be positive")
    pv = pred.item() if isinstance(pred, Tensor) else float(pred)
    kv = koop.item() if isinstance(koop, Tensor) else float(koop)
    if pv < 0 or kv < 0:
        raise ValueError("component losses must be nonnegative")
    if isinstance(pred, Tensor) or isinstance(koop, Tensor):
        return nc.log1p(nc.as_tensor(pred)) + nc.log1p(nc.as_tensor(koop)) * lam
    return float(np.log1p(pv) + lam * np.log1p(kv))


def edmd_fit(observables, targets, ridge: float = 1e-8) -> KoopmanOperator:
    """Least-squares operator with ``targets ~ observables @ K^T`` (rows are samples).

    Solves ``(Z0^T Z0 + ridge I) K^T = Z0^T Z1``.
    """
    Z0 = np.atleast_2d(np.asarray(observables.data if isinstance(observables, Tensor) else observables, dtype=np.float64))
    Z1 = np.atleast_2d(np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64))
    if Z0.shape != Z1.shape:
        raise ValueError(f"observables {Z0.shape} and targets {Z1.shape} differ")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    q = Z0.shape[1]
    G = Z0.T @ Z0 + ridge * np.eye(q)
    if ridge == 0 and np.linalg.matrix_rank(G) < q:
        raise SingularFitError("singular normal matrix; pass ridge > 0")
    KT = np.linalg.solve(G, Z0.T @ Z1)
    return KoopmanOperator(q, KT.T)
