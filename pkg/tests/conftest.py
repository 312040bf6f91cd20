import numpy as np
import pytest

from koopflow import numcore as nc
from koopflow.flows import ActNorm, FlowStack, SpectralResidualBlock, actnorm_init
from koopflow.gridsim import generate_dataset, ieee14, make_faults


def randomize(flow: FlowStack, rng: np.random.Generator, scale: float = 0.3, init_batch=None) -> FlowStack:
    """Give every parameter random values so the flow is far from identity."""
    for p in flow.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    if init_batch is not None:
        h = nc.tensor(init_batch)
        with nc.no_grad():
            for b in flow.blocks:
                if isinstance(b, ActNorm):
                    actnorm_init(b, h)
                h, _ = b.forward(h, with_logdet=False)
    for b in flow.blocks:
        if isinstance(b, SpectralResidualBlock):
            b.update_spectral(30)
    return flow


def fd_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a map R^D -> R^D at a single point."""
    d = x.size
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        J[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


@pytest.fixture(scope="session")
def small_dataset():
    """Four short faulted trajectories on the 14-bus surrogate (3 train / 1 test)."""
    model = ieee14(0)
    return generate_dataset(model, make_faults(4, 14, seed=0), seed=0, t_end=2.0, n_train=3)


@pytest.fixture(scope="session")
def default_dataset():
    """The default 9/2 split of 11 faults, 10 s each."""
    model = ieee14(0)
    return generate_dataset(model, make_faults(11, 14, seed=0), seed=0)


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
