"""Experiment configuration, training loop, evaluation metrics and checkpoints."""
from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .extensions import EXTENSIONS, HybridEncoder, RBFExtension, build_extension, identity_ablation_encoder
from .flows import ARCHITECTURES, ConvergenceError, FlowStack, build_architecture
from .gridsim import Dataset, Trajectory, delay_embed
from .koopman import KoopmanModel, KoopmanOperator, edmd_fit, loss_terms, sliding_windows, total_loss
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "Preprocessing",
    "Forecaster",
    "EvalReport",
    "TrainResult",
    "TrainingDiverged",
    "rrmse",
    "per_trajectory_rrmse",
    "invertibility_error",
    "build_model",
    "train",
    "evaluate",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "HISTORY_FIELDS",
]

HISTORY_FIELDS = ("epoch", "pred_loss", "koop_loss", "total", "val_pred")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"training diverged in epoch {epoch}: {cause}")
        self.epoch = epoch


# --------------------------------------------------------------------------- metrics


def _pair_arrays(true, pred):
    true = [np.asarray(t, dtype=np.float64) for t in true]
    pred = [np.asarray(p, dtype=np.float64) for p in pred]
    if len(true) != len(pred):
        raise ValueError(f"{len(true)} true vs {len(pred)} predicted trajectories")
    for t, p in zip(true, pred):
        if t.shape != p.shape:
            raise ValueError(f"trajectory shapes differ: {t.shape} vs {p.shape}")
    return true, pred


def rrmse(true, pred) -> float:
    """Pooled relative RMSE in percent over all trajectories, steps and buses."""
    true, pred = _pair_arrays(true, pred)
    num = sum(float(np.sum((t - p) ** 2)) for t, p in zip(true, pred))
    den = sum(float(np.sum(t**2)) for t in true)
    if den == 0.0:
        raise ValueError("RRMSE undefined: ground truth is identically zero")
    return 100.0 * float(np.sqrt(num / den))


def per_trajectory_rrmse(true, pred, ids: Sequence[str] | None = None) -> list[tuple[str, float]]:
    true, pred = _pair_arrays(true, pred)
    ids = [str(i) for i in range(len(true))] if ids is None else list(ids)
    return [(i, rrmse([t], [p])) for i, t, p in zip(ids, true, pred)]


def invertibility_error(flow: FlowStack, samples) -> float:
    """Worst ``max |x - inverse(forward(x))|`` over the sample rows."""
    x = np.atleast_2d(np.asarray(samples.data if isinstance(samples, nc.Tensor) else samples, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValueError("need at least one sample")
    with nc.no_grad():
        back = flow.inverse(flow.encode(x)).data
    return float(np.max(np.abs(x - back)))


# --------------------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    architecture: str = "allinone"
    extension: str | None = None
    extension_dim: int | None = None
    depth: int = 4
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    clamp: float = 2.0
    lipschitz: float = 0.9
    delay: int = 4
    horizon: int = 16
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    dataset: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    stride: int = 1
    post_fault_only: bool = True
    n_validation: int = 1
    max_batches_per_epoch: int | None = None
    koopman_init: str = "identity"
    # False keeps the origin (the grid equilibrium) fixed so latent dynamics stay linear
    actnorm_center: bool = False

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.architecture in ARCHITECTURES, f"architecture must be one of {ARCHITECTURES}"),
            (self.extension in (None, *EXTENSIONS), f"extension must be null or one of {EXTENSIONS}"),
            (self.extension_dim is None or self.extension_dim >= 1, "extension_dim must be >= 1"),
            (self.depth >= 1, "depth must be >= 1"),
            (all(h >= 1 for h in self.hidden), "hidden sizes must be >= 1"),
            (self.activation in ("tanh", "silu", "linear"), "activation must be tanh, silu or linear"),
            (self.clamp > 0, "clamp must be positive"),
            (0 < self.lipschitz < 1, "lipschitz must lie in (0, 1)"),
            (self.delay >= 1, "delay must be >= 1"),
            (self.horizon >= 1, "horizon must be >= 1"),
            (self.lam > 0, "lam must be positive"),
            (self.lr > 0, "lr must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)"),
            (self.eps > 0, "eps must be positive"),
            (self.grad_clip > 0, "grad_clip must be positive"),
            (self.stride >= 1, "stride must be >= 1"),
            (self.n_validation >= 0, "n_validation must be >= 0"),
            (self.max_batches_per_epoch is None or self.max_batches_per_epoch >= 1, "max_batches_per_epoch must be >= 1"),
            (self.koopman_init in ("identity", "edmd"), "koopman_init must be 'identity' or 'edmd'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid config: {msg}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"invalid config: unknown keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------- preprocessing


@dataclass
class Preprocessing:
    """Crop to post-fault samples, subsample, scale per bus, delay-embed."""

    delay: int
    stride: int
    post_fault_only: bool
    scale: list

    @classmethod
    def for_dataset(cls, dataset: Dataset, delay: int, stride: int = 1, post_fault_only: bool = True):
        std = np.asarray(dataset.normalization()["std"])
        std = np.where(std > 0, std, 1.0)
        return cls(delay, stride, post_fault_only, std.tolist())

    @property
    def n_bus(self) -> int:
        return len(self.scale)

    def raw_states(self, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
        states = traj.post_fault() if self.post_fault_only else traj.states
        offset = traj.states.shape[0] - states.shape[0]
        times = (offset + np.arange(states.shape[0])) * traj.dt
        return states[:: self.stride], times[:: self.stride]

    def embed(self, traj: Trajectory):
        """``(embedded, truth, times)``; row ``k`` of ``truth`` is the newest snapshot in ``embedded[k]``."""
        states, times = self.raw_states(traj)
        X = delay_embed(states / np.asarray(self.scale), self.delay)
        return X, states[self.delay - 1 :], times[self.delay - 1 :]


@dataclass
class Forecaster:
    model: KoopmanModel
    prep: Preprocessing
    config: ExperimentConfig

    def predict(self, traj: Trajectory, teacher_forcing_interval: int = 0):
        """Full-horizon rollout from the first embedded state; returns ``(times, truth, pred)`` raw units."""
        X, truth, times = self.prep.embed(traj)
        decoded = self.model.predict(X[0], X.shape[0] - 1, teacher_forcing_interval, X)
        pred = decoded[:, : self.prep.n_bus] * np.asarray(self.prep.scale)
        return times, truth, pred


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rrmse_train: float
    rrmse_test: float
    per_trajectory: list
    invertibility_error: float
    spectral_radius: float
    architecture: str = ""
    extension: str = "none"

    CSV_FIELDS = ("architecture", "extension", "rrmse_train", "rrmse_test", "invertibility_error", "spectral_radius")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_trajectory"] = [[i, v] for i, v in self.per_trajectory]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_trajectory"] = [(str(i), float(v)) for i, v in d["per_trajectory"]]
        return cls(**d)

    def csv_row(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in self.CSV_FIELDS}

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in self.csv_row().items()})
        return buf.getvalue()


@dataclass
class TrainResult:
    forecaster: Forecaster
    report: EvalReport
    history: list

    @property
    def model(self) -> KoopmanModel:
        return self.forecaster.model

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in self.history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()


# --------------------------------------------------------------------------- model construction / training


def build_model(config: ExperimentConfig, dim: int, rng: np.random.Generator | int | None = None, states=None) -> KoopmanModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(config.seed if rng is None else rng)
    flow = build_architecture(
        config.architecture, dim, config.depth, config.hidden, rng, config.clamp, config.lipschitz, config.activation
    )
    m = config.extension_dim
    if config.extension == "rbf_kernel" and states is None:
        # placeholder centers, overwritten when a checkpoint is loaded
        ext = RBFExtension(np.zeros((dim if m is None else m, dim)), gamma=1.0)
    else:
        ext = build_extension(config.extension, dim, m, rng, states=states)
    encoder = HybridEncoder(flow, ext)
    return KoopmanModel(encoder, KoopmanOperator(encoder.latent_dim))


def _split_validation(seqs, n_val):
    if n_val and len(seqs) > n_val:
        return seqs[:-n_val], seqs[-n_val:]
    return seqs, []


def _fit_koopman_lstsq(model: KoopmanModel, seqs, ridge=1e-8) -> None:
    with nc.no_grad():
        Z = [model.encode(s).data for s in seqs]
    op = edmd_fit(np.concatenate([z[:-1] for z in Z]), np.concatenate([z[1:] for z in Z]), ridge)
    model.koopman.K.data = op.matrix.copy()


def _mean_pred_loss(model, windows, H, chunk=256) -> float:
    total = 0.0
    with nc.no_grad():
        for s in range(0, len(windows), chunk):
            w = windows[s : s + chunk]
            pred, _, _ = loss_terms(model, w, H)
            total += pred.item() * len(w)
    return total / len(windows)


def train(config: ExperimentConfig, dataset: Dataset, progress=None) -> TrainResult:
    """Mini-batch Adam on ``log1p(pred) + lam * log1p(koop)``; keeps the best-validation epoch."""
    if not dataset.train:
        raise ValueError("dataset has no training trajectories")
    rng = np.random.default_rng(config.seed)
    prep = Preprocessing.for_dataset(dataset, config.delay, config.stride, config.post_fault_only)
    H = config.horizon
    seqs = [prep.embed(t)[0] for t in dataset.train]
    fit_seqs, val_seqs = _split_validation(seqs, config.n_validation)
    fit_seqs = [s for s in fit_seqs if s.shape[0] >= H + 1]
    val_seqs = [s for s in val_seqs if s.shape[0] >= H + 1]
    if not fit_seqs:
        raise ValueError(f"no training trajectory is long enough for horizon {H}")
    windows = sliding_windows(fit_seqs, H)
    val_windows = sliding_windows(val_seqs, H) if val_seqs else None
    dim = windows.shape[2]

    model = build_model(config, dim, rng, states=np.concatenate(fit_seqs))
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    history: list[dict] = []
    best_val, best_state = np.inf, model.state_dict()

    n_batches = int(np.ceil(len(windows) / config.batch_size))
    if config.max_batches_per_epoch is not None:
        n_batches = min(n_batches, config.max_batches_per_epoch)

    for epoch in range(config.epochs):
        order = rng.permutation(len(windows))
        sums = np.zeros(3)
        try:
            for b in range(n_batches):
                batch = windows[order[b * config.batch_size : (b + 1) * config.batch_size]]
                if epoch == 0 and b == 0:
                    model.encoder.initialize(batch.reshape(-1, dim), config.actnorm_center)
                    if config.koopman_init == "edmd":
                        _fit_koopman_lstsq(model, fit_seqs)
                model.encoder.flow.update_spectral(1)
                pred, koop, _ = loss_terms(model, batch, H)
                loss = total_loss(pred, koop, config.lam)
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(params, config.grad_clip)
                opt.step()
                sums += (pred.item(), koop.item(), loss.item())
            if val_windows is not None:
                val = _mean_pred_loss(model, val_windows, H)
            else:
                val = sums[0] / n_batches
        except (nc.NonFiniteError, ConvergenceError, np.linalg.LinAlgError) as exc:
            raise TrainingDiverged(epoch, exc) from exc
        if not np.isfinite(val):
            raise TrainingDiverged(epoch, ValueError("non-finite validation loss"))
        row = dict(zip(HISTORY_FIELDS, (epoch, *(sums / n_batches), val)))
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d pred %.3e koop %.3e val %.3e", epoch, row["pred_loss"], row["koop_loss"], val)
        if val < best_val:
            best_val, best_state = val, model.state_dict()

    model.load_state_dict(best_state)
    forecaster = Forecaster(model, prep, config)
    return TrainResult(forecaster, evaluate(forecaster, dataset), history)


def _predict_or_inf(forecaster: Forecaster, traj: Trajectory, teacher_forcing_interval: int):
    try:
        return forecaster.predict(traj, teacher_forcing_interval)
    except nc.NonFiniteError:
        # the rollout overflowed; score it as an infinitely bad prediction
        _, truth, times = forecaster.prep.embed(traj)
        return times, truth, np.full(truth.shape, np.inf)


def evaluate(forecaster: Forecaster, dataset: Dataset, teacher_forcing_interval: int = 0) -> EvalReport:
    """Full-horizon rollouts on both splits plus invertibility and spectral diagnostics."""
    results = {}
    for split in ("train", "test"):
        trajs = getattr(dataset, split)
        outs = [_predict_or_inf(forecaster, t, teacher_forcing_interval) for t in trajs]
        results[split] = ([o[1] for o in outs], [o[2] for o in outs], [t.id for t in trajs])
    tr_true, tr_pred, _ = results["train"]
    te_true, te_pred, te_ids = results["test"]
    probe = dataset.test or dataset.train
    samples = np.concatenate([forecaster.prep.embed(t)[0] for t in probe])
    cfg = forecaster.config
    return EvalReport(
        rrmse_train=rrmse(tr_true, tr_pred) if tr_true else float("nan"),
        rrmse_test=rrmse(te_true, te_pred) if te_true else float("nan"),
        per_trajectory=per_trajectory_rrmse(te_true, te_pred, te_ids) if te_true else [],
        invertibility_error=invertibility_error(forecaster.model.encoder.flow, samples),
        spectral_radius=forecaster.model.koopman.spectral_radius(),
        architecture=cfg.architecture if len(forecaster.model.encoder.flow) else "identity",
        extension=cfg.extension or "none",
    )


def run_ablation(
    dataset: Dataset,
    extension: str | None = None,
    delay: int = 4,
    stride: int = 1,
    ridge: float = 1e-8,
    seed: int = 0,
    extension_dim: int | None = None,
    post_fault_only: bool = True,
) -> tuple[Forecaster, EvalReport]:
    """Identity map in place of the flow; fit K by EDMD on ``[x | a(x)]`` and evaluate."""
    rng = np.random.default_rng(seed)
    prep = Preprocessing.for_dataset(dataset, delay, stride, post_fault_only)
    seqs = [prep.embed(t)[0] for t in dataset.train]
    dim = seqs[0].shape[1]
    ext = build_extension(extension, dim, extension_dim, rng, states=np.concatenate(seqs))
    model = KoopmanModel(identity_ablation_encoder(ext, dim))
    _fit_koopman_lstsq(model, seqs, ridge)
    config = ExperimentConfig(
        architecture="nice", extension=extension, extension_dim=extension_dim, delay=delay,
        stride=stride, seed=seed, epochs=0, post_fault_only=post_fault_only,
    )
    forecaster = Forecaster(model, prep, config)
    return forecaster, evaluate(forecaster, dataset)


# --------------------------------------------------------------------------- checkpoints


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def save_checkpoint(path, forecaster: Forecaster) -> Path:
    """Architecture descriptor plus little-endian float64 parameters, in one JSON file."""
    model = forecaster.model
    descriptor = {
        "config": forecaster.config.to_dict(),
        "dim": model.p,
        "identity_flow": len(model.encoder.flow) == 0,
        "extension": None if model.encoder.extension is None else model.encoder.extension.variant,
        "extension_dim": model.encoder.m,
        "preprocessing": dataclasses.asdict(forecaster.prep),
    }
    state = {"encoder." + k: v for k, v in model.encoder.state_dict().items()}
    state["koopman.K"] = model.koopman.K.data
    payload = {
        "format": "koopflow-checkpoint/1",
        "architecture": descriptor,
        "params": {k: _encode_array(v) for k, v in state.items()},
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> Forecaster:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "koopflow-checkpoint/1":
        raise ValueError(f"{path}: not a koopflow checkpoint")
    desc = payload["architecture"]
    config = ExperimentConfig.from_dict(desc["config"])
    state = {k: _decode_array(v) for k, v in payload["params"].items()}
    dim = desc["dim"]
    if desc["identity_flow"]:
        ext_cfg = dataclasses.replace(config, extension=desc["extension"], extension_dim=desc["extension_dim"] or None)
        if desc["extension"] == "rbf_kernel":
            ext = RBFExtension(np.zeros((desc["extension_dim"], dim)), gamma=1.0)
        else:
            ext = build_extension(desc["extension"], dim, ext_cfg.extension_dim, config.seed)
        model = KoopmanModel(identity_ablation_encoder(ext, dim))
    else:
        model = build_model(config, dim)
    model.encoder.load_state_dict({k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")})
    model.koopman.K.data = state["koopman.K"].copy()
    prep = Preprocessing(**desc["preprocessing"])
    return Forecaster(model, prep, config)
