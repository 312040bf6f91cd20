"""Swing-equation surrogate for bus-frequency fault trajectories.

Each bus carries a rotor angle ``theta_i`` and frequency deviation ``omega_i``::

    M_i * d(omega_i)/dt = P_i(t) - D_i * omega_i - sum_j B_ij * sin(theta_i - theta_j)

A fault is a temporary step ``dP`` on the injection of one bus. Trajectories
start at the pre-fault equilibrium and record ``omega`` at every RK4 step.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "IEEE14_EDGES",
    "GridModel",
    "FaultEvent",
    "Trajectory",
    "Dataset",
    "SimulationError",
    "ieee14",
    "swing_rhs",
    "find_equilibrium",
    "integrate",
    "energy",
    "make_faults",
    "generate_dataset",
    "delay_embed",
]

# 0-indexed branch list of the IEEE 14-bus test case.
IEEE14_EDGES = [
    (0, 1), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (3, 4), (3, 6), (3, 8), (4, 5),
    (5, 10), (5, 11), (5, 12), (6, 7), (6, 8), (8, 9), (8, 13), (9, 10), (11, 12), (12, 13),
]

OMEGA_BLOWUP = 10.0


class SimulationError(RuntimeError):
    """Raised when the equilibrium solve or the integration fails."""


@dataclass
class GridModel:
    inertia: np.ndarray
    damping: np.ndarray
    injection: np.ndarray
    susceptance: np.ndarray

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=np.float64)
        self.damping = np.asarray(self.damping, dtype=np.float64)
        self.injection = np.asarray(self.injection, dtype=np.float64)
        self.susceptance = np.asarray(self.susceptance, dtype=np.float64)
        self.validate()

    @property
    def n_bus(self) -> int:
        return self.inertia.shape[0]

    def validate(self) -> None:
        n = self.inertia.shape[0]
        B = self.susceptance
        if n < 2:
            raise ValueError("a grid needs at least two buses")
        for name in ("damping", "injection"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if B.shape != (n, n):
            raise ValueError(f"susceptance must have shape ({n}, {n})")
        if np.any(self.inertia <= 0) or np.any(self.damping <= 0):
            raise ValueError("inertia and damping must be positive")
        if not np.allclose(B, B.T, rtol=0, atol=0):
            raise ValueError("susceptance matrix must be symmetric")
        if np.any(np.diag(B) != 0) or np.any(B < 0):
            raise ValueError("susceptance needs a zero diagonal and nonnegative entries")
        if abs(self.injection.sum()) > 1e-12:
            raise ValueError("injections must sum to zero")
        if not _connected(B > 0):
            raise ValueError("grid graph is not connected")

    @classmethod
    def from_edges(cls, n_bus, edges, inertia, damping, injection, b=5.0):
        B = np.zeros((n_bus, n_bus))
        for i, j in edges:
            if i == j or not (0 <= i < n_bus and 0 <= j < n_bus):
                raise ValueError(f"invalid edge ({i}, {j})")
            B[i, j] = B[j, i] = b
        return cls(inertia, damping, injection, B)

    def to_dict(self) -> dict:
        return {
            "inertia": self.inertia.tolist(),
            "damping": self.damping.tolist(),
            "injection": self.injection.tolist(),
            "susceptance": self.susceptance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridModel":
        return cls(d["inertia"], d["damping"], d["injection"], d["susceptance"])


def _connected(adj: np.ndarray) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == adj.shape[0]


def random_injection(n_bus: int, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    p = rng.uniform(-scale, scale, n_bus)
    p -= p.mean()
    # exact zero sum, not just to rounding
    p[-1] = -p[:-1].sum()
    return p


def ieee14(seed: int = 0, b: float = 5.0, edges=None, n_bus: int = 14) -> GridModel:
    """Desk-scale default: IEEE-14 topology, uniform line susceptance, seeded M, D, P."""
    rng = np.random.default_rng(seed)
    edges = IEEE14_EDGES if edges is None else edges
    inertia = rng.uniform(2.0, 6.0, n_bus)
    damping = rng.uniform(2.0, 4.0, n_bus)
    return GridModel.from_edges(n_bus, edges, inertia, damping, random_injection(n_bus, rng), b=b)


@dataclass(frozen=True)
class FaultEvent:
    bus: int
    t_start: float = 0.5
    duration: float = 0.1
    magnitude: float = -0.3

    def __post_init__(self):
        if self.t_start < 0 or self.duration <= 0:
            raise ValueError("fault needs t_start >= 0 and duration > 0")

    def active(self, t: float) -> bool:
        # half-open window; the epsilon keeps grid-aligned boundaries on the right side
        eps = 1e-9
        return self.t_start - eps <= t < self.t_start + self.duration - eps

    @property
    def t_clear(self) -> float:
        return self.t_start + self.duration


@dataclass
class Trajectory:
    """Frequency deviations ``states[k, i]`` of bus ``i`` at ``t = k * dt`` (rad/s)."""

    dt: float
    states: np.ndarray
    fault: FaultEvent | None = None
    id: str = "traj"

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt

    @property
    def n_bus(self) -> int:
        return self.states.shape[1]

    def post_fault(self) -> np.ndarray:
        """Samples from the first step after the fault has cleared."""
        if self.fault is None:
            return self.states
        k = int(np.ceil(self.fault.t_clear / self.dt - 1e-9))
        return self.states[k:]


def _flow_injection(model: GridModel, t: float, fault: FaultEvent | None) -> np.ndarray:
    p = model.injection
    if fault is not None and fault.active(t):
        p = p.copy()
        p[fault.bus] += fault.magnitude
    return p


def _rhs(model: GridModel, theta, omega, p):
    diff = theta[:, None] - theta[None, :]
    flow = (model.susceptance * np.sin(diff)).sum(axis=1)
    return omega, (p - model.damping * omega - flow) / model.inertia


def swing_rhs(model: GridModel, theta, omega, t: float = 0.0, fault: FaultEvent | None = None):
    """Time derivatives ``(dtheta, domega)`` of the swing equation."""
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    return _rhs(model, theta, omega, _flow_injection(model, t, fault))


def energy(model: GridModel, theta, omega) -> float:
    """Lyapunov-like energy, non-increasing along unforced trajectories."""
    diff = theta[:, None] - theta[None, :]
    return float(
        0.5 * np.sum(model.inertia * omega**2)
        - np.sum(model.injection * theta)
        - 0.5 * np.sum(model.susceptance * np.cos(diff))
    )


def find_equilibrium(model: GridModel, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Newton solve of ``P_i = sum_j B_ij sin(theta_i - theta_j)`` with ``theta_0 = 0``."""
    B = model.susceptance
    theta = np.zeros(model.n_bus)
    for _ in range(max_iter):
        diff = theta[:, None] - theta[None, :]
        resid = (B * np.sin(diff)).sum(axis=1) - model.injection
        if np.max(np.abs(resid)) < tol:
            return theta
        C = B * np.cos(diff)
        J = -C
        J[np.diag_indices_from(J)] = C.sum(axis=1)
        try:
            step = np.linalg.solve(J[1:, 1:], resid[1:])
        except np.linalg.LinAlgError as exc:
            raise SimulationError("singular power-flow Jacobian") from exc
        theta[1:] -= step
        if not np.all(np.isfinite(theta)):
            break
    raise SimulationError(f"Newton did not converge in {max_iter} iterations (infeasible injections?)")


def integrate(
    model: GridModel,
    fault: FaultEvent | None = None,
    dt: float = 0.005,
    t_end: float = 10.0,
    id: str = "traj",
    return_angles: bool = False,
):
    """Classic RK4 from the pre-fault equilibrium, recording omega at every step.

    The injection is held fixed across the four stages of a step, evaluated at
    the step's start time, so fault windows on the time grid are resolved exactly.
    """
    if not 0 < dt <= 0.01 + 1e-12:
        raise ValueError("dt must be in (0, 0.01] to resolve a 0.1 s fault with >= 10 steps")
    if fault is not None:
        if not 0 <= fault.bus < model.n_bus:
            raise ValueError(f"fault bus {fault.bus} out of range")
        if fault.t_clear >= t_end:
            raise ValueError("fault must clear before t_end")
    n_steps = int(round(t_end / dt))
    theta = find_equilibrium(model)
    omega = np.zeros(model.n_bus)
    out = np.empty((n_steps, model.n_bus))
    angles = np.empty((n_steps, model.n_bus)) if return_angles else None
    for k in range(n_steps):
        out[k] = omega
        if angles is not None:
            angles[k] = theta
        if k == n_steps - 1:
            break
        p = _flow_injection(model, k * dt, fault)
        k1t, k1w = _rhs(model, theta, omega, p)
        k2t, k2w = _rhs(model, theta + 0.5 * dt * k1t, omega + 0.5 * dt * k1w, p)
        k3t, k3w = _rhs(model, theta + 0.5 * dt * k2t, omega + 0.5 * dt * k2w, p)
        k4t, k4w = _rhs(model, theta + dt * k3t, omega + dt * k3w, p)
        theta = theta + dt / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t)
        omega = omega + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
        if not np.all(np.isfinite(omega)) or np.max(np.abs(omega)) > OMEGA_BLOWUP:
            raise SimulationError(f"state blowup at t={(k + 1) * dt:.3f} s")
    traj = Trajectory(dt=dt, states=out, fault=fault, id=id)
    if return_angles:
        return traj, angles
    return traj


def make_faults(
    n_faults: int,
    n_bus: int,
    seed: int = 0,
    t_start: float = 0.5,
    duration: float = 0.1,
    magnitude: float = -0.3,
) -> list[FaultEvent]:
    """Distinct buses while they last; beyond ``n_bus`` events buses repeat with jittered magnitude."""
    rng = np.random.default_rng(seed)
    events = []
    while len(events) < n_faults:
        first_pass = not events
        for bus in rng.permutation(n_bus):
            if len(events) == n_faults:
                break
            mag = magnitude if first_pass else magnitude * rng.uniform(0.5, 1.5)
            events.append(FaultEvent(int(bus), t_start, duration, float(mag)))
    return events


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("KOOPMAN_FLOW_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Dataset:
    model: GridModel
    train: list[Trajectory]
    test: list[Trajectory]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_bus(self) -> int:
        return self.model.n_bus

    @property
    def dt(self) -> float:
        return (self.train or self.test)[0].dt

    def normalization(self) -> dict:
        """Per-bus mean and std over the training split."""
        stacked = np.concatenate([t.states for t in self.train], axis=0)
        return {"mean": stacked.mean(axis=0).tolist(), "std": stacked.std(axis=0).tolist()}

    def trajectory(self, tid: str) -> Trajectory:
        for t in self.train + self.test:
            if t.id == tid:
                return t
        raise KeyError(f"unknown trajectory id {tid!r}")

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for split, trajs in (("train", self.train), ("test", self.test)):
            for traj in trajs:
                fname = f"{traj.id}.csv"
                _write_csv(directory / fname, traj)
                entries.append(
                    {"id": traj.id, "split": split, "file": fname,
                     "fault": None if traj.fault is None else asdict(traj.fault)}
                )
        sidecar = {
            "model": self.model.to_dict(),
            "dt": self.dt,
            "seed": self.seed,
            "split": [len(self.train), len(self.test)],
            "units": "rad/s frequency deviation",
            "normalization": self.normalization(),
            "trajectories": entries,
            **self.meta,
        }
        with open(directory / "dataset.json", "w") as fh:
            json.dump(sidecar, fh, indent=1)
        return directory

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        sidecar_path = directory / "dataset.json"
        if not sidecar_path.exists():
            raise FileNotFoundError(f"no dataset.json in {directory}")
        with open(sidecar_path) as fh:
            side = json.load(fh)
        train, test = [], []
        for e in side["trajectories"]:
            fault = None if e["fault"] is None else FaultEvent(**e["fault"])
            traj = _read_csv(directory / e["file"], side["dt"], fault, e["id"])
            (train if e["split"] == "train" else test).append(traj)
        known = {"model", "dt", "seed", "split", "units", "normalization", "trajectories"}
        meta = {k: v for k, v in side.items() if k not in known}
        return cls(GridModel.from_dict(side["model"]), train, test, side["seed"], meta)


def _write_csv(path: Path, traj: Trajectory) -> None:
    header = ",".join(["t"] + [f"bus_{i}" for i in range(traj.n_bus)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write(",".join(format(v, ".17g") for v in (t, *row)) + "\n")


def _read_csv(path: Path, dt: float, fault, tid: str) -> Trajectory:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(dt=dt, states=np.ascontiguousarray(arr[:, 1:]), fault=fault, id=tid)


def generate_dataset(
    model: GridModel,
    faults: Sequence[int | FaultEvent],
    seed: int = 0,
    dt: float = 0.005,
    t_end: float = 10.0,
    train_frac: float = 9 / 11,
    n_train: int | None = None,
) -> Dataset:
    """One trajectory per fault; seeded shuffle, then a train/test split.

    ``n_train`` overrides ``train_frac`` when given.
    """
    events = [f if isinstance(f, FaultEvent) else FaultEvent(int(f)) for f in faults]
    if not events:
        raise ValueError("at least one fault is required")
    for ev in events:
        if not 0 <= ev.bus < model.n_bus:
            raise ValueError(f"fault bus {ev.bus} out of range for {model.n_bus} buses")

    def run(args):
        idx, ev = args
        return integrate(model, ev, dt, t_end, id=f"traj_{idx:03d}")

    with ThreadPoolExecutor(max_workers=_n_threads()) as pool:
        trajs = list(pool.map(run, enumerate(events)))

    order = np.random.default_rng(seed).permutation(len(trajs))
    trajs = [trajs[i] for i in order]
    if n_train is None:
        n_train = int(round(train_frac * len(trajs)))
    if not 0 <= n_train <= len(trajs):
        raise ValueError("invalid split")
    return Dataset(model, trajs[:n_train], trajs[n_train:], seed=seed)


def delay_embed(traj, d: int) -> np.ndarray:
    """Stack ``d`` consecutive snapshots, newest first: row ``k`` is ``[x_t | x_{t-1} | ... ]``.

    Accepts a :class:`Trajectory` or a ``(T, n)`` array and returns ``(T - d + 1, n * d)``.
    """
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    T = states.shape[0]
    if d < 1:
        raise ValueError("delay depth must be >= 1")
    if T < d:
        raise ValueError(f"trajectory of length {T} is shorter than delay depth {d}")
    cols = [states[d - 1 - j : T - j] for j in range(d)]
    return np.concatenate(cols, axis=1)
