import numpy as np
import pytest

from koopflow.gridsim import (
    IEEE14_EDGES,
    Dataset,
    FaultEvent,
    GridModel,
    SimulationError,
    Trajectory,
    delay_embed,
    energy,
    find_equilibrium,
    generate_dataset,
    ieee14,
    integrate,
    make_faults,
    random_injection,
    swing_rhs,
)


def two_bus(p=0.5, b=1.0):
    B = np.array([[0.0, b], [b, 0.0]])
    return GridModel([1.0, 1.0], [1.0, 1.0], [p, -p], B)


# ---------------------------------------------------------------- model


def test_model_validation():
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        GridModel([1.0, -1.0], [1.0, 1.0], [0.0, 0.0], B)
    with pytest.raises(ValueError):
        GridModel([1.0, 1.0], [1.0, 1.0], [0.1, 0.0], B)
    with pytest.raises(ValueError):
        GridModel([1.0, 1.0], [1.0, 1.0], [0.0, 0.0], np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValueError):
        GridModel.from_edges(3, [(0, 1)], np.ones(3), np.ones(3), np.zeros(3))  # disconnected
    with pytest.raises(ValueError):
        FaultEvent(0, duration=0.0)


def test_ieee14_defaults():
    m = ieee14(0)
    assert m.n_bus == 14 and len(IEEE14_EDGES) == 20
    assert np.all((m.inertia >= 2) & (m.inertia <= 6))
    assert np.all(m.susceptance[m.susceptance > 0] == 5.0)
    assert m.injection.sum() == 0.0
    m2 = GridModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(m2.susceptance, m.susceptance)


def test_random_injection_exact_balance():
    for s in range(20):
        assert random_injection(14, np.random.default_rng(s)).sum() == 0.0


# ---------------------------------------------------------------- dynamics


def test_rhs_fixed_point_and_symmetry():
    m = ieee14(1)
    theta = find_equilibrium(m)
    _, dw = swing_rhs(m, theta, np.zeros(14))
    assert np.max(np.abs(dw)) < 1e-10
    sym = GridModel([2.0, 2.0], [1.0, 1.0], [0.0, 0.0], np.array([[0.0, 3.0], [3.0, 0.0]]))
    _, dw = swing_rhs(sym, np.array([0.2, -0.2]), np.zeros(2))
    assert dw[0] == -dw[1] and dw[0] != 0


def test_fault_changes_rhs_only_inside_window():
    m = ieee14(0)
    theta, omega = find_equilibrium(m), np.zeros(14)
    f = FaultEvent(3, 0.5, 0.1, -0.3)
    _, inside = swing_rhs(m, theta, omega, 0.55, f)
    _, outside = swing_rhs(m, theta, omega, 0.65, f)
    assert inside[3] == pytest.approx(-0.3 / m.inertia[3])
    assert np.max(np.abs(outside)) < 1e-10


def test_equilibrium_closed_forms_and_residual():
    np.testing.assert_array_equal(find_equilibrium(two_bus(0.0)), 0.0)
    th = find_equilibrium(two_bus(0.5))
    assert th[0] == 0.0
    assert th[0] - th[1] == pytest.approx(np.arcsin(0.5), abs=1e-12)
    for seed in range(5):
        m = ieee14(seed)
        t = find_equilibrium(m)
        resid = (m.susceptance * np.sin(t[:, None] - t[None, :])).sum(1) - m.injection
        assert np.max(np.abs(resid)) < 1e-10


def test_infeasible_equilibrium_raises():
    with pytest.raises(SimulationError):
        find_equilibrium(two_bus(1.5))


def test_energy_non_increasing_after_fault():
    m = ieee14(2)
    f = FaultEvent(5)
    traj, angles = integrate(m, f, 0.005, 4.0, return_angles=True)
    k0 = int(np.ceil(f.t_clear / 0.005)) + 1
    E = np.array([energy(m, angles[k], traj.states[k]) for k in range(k0, traj.states.shape[0])])
    assert np.all(np.diff(E) <= 1e-12)


def test_no_fault_stays_at_equilibrium():
    traj = integrate(ieee14(0), None, 0.005, 10.0)
    assert np.max(np.abs(traj.states)) <= 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fault_peaks_then_decays(seed):
    m = ieee14(seed)
    for bus in (0, 6, 13):
        f = FaultEvent(bus)
        traj = integrate(m, f)
        w = np.abs(traj.states[:, bus])
        k_peak = int(np.argmax(w))
        assert traj.times[k_peak] <= f.t_clear + 1.0
        assert np.max(np.abs(traj.states[-1])) < 0.1 * w[k_peak]
        pre = traj.states[traj.times < f.t_start - 1e-9]
        assert np.max(np.abs(pre)) <= 1e-9


def test_step_halving_agreement():
    m = ieee14(0)
    f = FaultEvent(4)
    coarse = integrate(m, f, 0.005, 10.0)
    fine = integrate(m, f, 0.0025, 10.0)
    assert np.max(np.abs(fine.states[::2] - coarse.states)) < 1e-6


def test_integrate_preconditions():
    m = ieee14(0)
    with pytest.raises(ValueError):
        integrate(m, FaultEvent(0), dt=0.02)
    with pytest.raises(ValueError):
        integrate(m, FaultEvent(20))
    with pytest.raises(ValueError):
        integrate(m, FaultEvent(0, t_start=9.95), t_end=10.0)


def test_blowup_detected():
    m = GridModel([0.01, 0.01], [0.01, 0.01], [0.0, 0.0], np.array([[0.0, 0.1], [0.1, 0.0]]))
    with pytest.raises(SimulationError):
        integrate(m, FaultEvent(0, magnitude=-50.0), 0.005, 2.0)


def test_trajectory_shape_and_post_fault():
    traj = integrate(ieee14(0), FaultEvent(1), 0.005, 2.0)
    assert traj.states.shape == (400, 14)
    assert traj.times[-1] + traj.dt == pytest.approx(2.0)
    assert traj.post_fault().shape[0] == 400 - 120


# ---------------------------------------------------------------- datasets


def test_split_counts_9_2_and_90_9():
    m = ieee14(0)
    ds = generate_dataset(m, make_faults(11, 14, seed=0), seed=0, t_end=1.0)
    assert (len(ds.train), len(ds.test)) == (9, 2)
    ds = generate_dataset(m, make_faults(99, 14, seed=0), seed=0, t_end=0.7, train_frac=90 / 99)
    assert (len(ds.train), len(ds.test)) == (90, 9)


def test_make_faults_distinct_buses_first():
    f = make_faults(14, 14, seed=3)
    assert sorted(e.bus for e in f) == list(range(14))
    f = make_faults(20, 14, seed=3)
    assert len(f) == 20 and len({(e.bus, e.magnitude) for e in f}) == 20


def test_generation_deterministic(tmp_path, monkeypatch):
    m = ieee14(0)
    a = generate_dataset(m, make_faults(4, 14, seed=1), seed=5, t_end=1.0)
    monkeypatch.setenv("KOOPMAN_FLOW_THREADS", "3")
    b = generate_dataset(m, make_faults(4, 14, seed=1), seed=5, t_end=1.0)
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.id == y.id and np.array_equal(x.states, y.states)
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_save_load_bit_exact(tmp_path, small_dataset):
    small_dataset.save(tmp_path)
    header = (tmp_path / f"{small_dataset.train[0].id}.csv").read_text().splitlines()[0]
    assert header == "t," + ",".join(f"bus_{i}" for i in range(14))
    back = Dataset.load(tmp_path)
    for x, y in zip(small_dataset.train + small_dataset.test, back.train + back.test):
        assert x.id == y.id and x.fault == y.fault
        assert np.array_equal(x.states, y.states)
    np.testing.assert_array_equal(back.model.inertia, small_dataset.model.inertia)
    with pytest.raises(FileNotFoundError):
        Dataset.load(tmp_path / "missing")


def test_normalization_uses_train_only(small_dataset):
    stats = small_dataset.normalization()
    stacked = np.concatenate([t.states for t in small_dataset.train])
    np.testing.assert_allclose(stats["std"], stacked.std(0))
    np.testing.assert_allclose(stats["mean"], stacked.mean(0))


# ---------------------------------------------------------------- delay embedding


def test_delay_embed_hand_cases():
    a, b, c = [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]
    X = delay_embed(np.array([a, b, c]), 2)
    np.testing.assert_array_equal(X, [b + a, c + b])
    S = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(delay_embed(S, 1), S)
    with pytest.raises(ValueError):
        delay_embed(S, 5)
    with pytest.raises(ValueError):
        delay_embed(S, 0)


def test_delay_embed_overlap_and_shape():
    traj = Trajectory(0.01, np.random.default_rng(0).normal(size=(30, 5)))
    X = delay_embed(traj, 4)
    assert X.shape == (27, 20)
    for t in range(26):
        assert np.array_equal(X[t + 1, 5:10], X[t, 0:5])
