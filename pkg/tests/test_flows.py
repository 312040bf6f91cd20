import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopflow import numcore as nc
from koopflow.flows import (
    ARCHITECTURES,
    ActNorm,
    ConvergenceError,
    CouplingLayer,
    FlowStack,
    Partition,
    PermutationLayer,
    PowerIterationState,
    SpectralResidualBlock,
    SplitResidualLayer,
    actnorm_init,
    build_architecture,
    coupling_forward,
    coupling_inverse,
    iresnet_forward,
    iresnet_invert,
    power_iterate,
    soft_clamp,
    spectral_normalize,
)

from conftest import fd_jacobian, randomize


def round_trip(flow, x):
    with nc.no_grad():
        return float(np.max(np.abs(flow.inverse(flow.encode(x)).data - x)))


# ---------------------------------------------------------------- partitions


def test_partition_halves_and_alternation():
    p = Partition.halves(5)
    assert p.A == (0, 1, 2) and p.B == (3, 4)
    q = Partition.halves(5, swap=True)
    assert q.A == (3, 4) and q.B == (0, 1, 2)
    with pytest.raises(ValueError):
        Partition((0, 1), (1, 2))
    with pytest.raises(ValueError):
        Partition((), (0, 1))
    with pytest.raises(ValueError):
        Partition.halves(1)


# ---------------------------------------------------------------- coupling layers


def test_zero_conditioner_is_identity():
    rng = np.random.default_rng(0)
    for mode in ("additive", "affine"):
        layer = CouplingLayer(Partition.halves(6), mode, [8], rng)
        x = rng.normal(size=(10, 6))
        y, ld = coupling_forward(layer, x)
        np.testing.assert_array_equal(y.data, x)
        np.testing.assert_array_equal(ld.data, 0.0)
        np.testing.assert_array_equal(coupling_inverse(layer, x).data, x)


def test_additive_hand_example():
    # D=2, A={0}, conditioner Q(x) = x: one linear layer with weight 1, bias 0
    layer = CouplingLayer(Partition((0,), (1,)), "additive", [], np.random.default_rng(0), activation_name="linear")
    layer.conditioner.layers[0].weight.data = np.array([[1.0]])
    y, ld = layer.forward(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(y.data, [[1.0, 3.0]])
    assert ld.data[0] == 0.0
    np.testing.assert_array_equal(layer.inverse(np.array([[1.0, 3.0]])).data, [[1.0, 2.0]])


def test_affine_matches_formula():
    rng = np.random.default_rng(1)
    layer = CouplingLayer(Partition.halves(4), "affine", [6], rng, clamp=2.0)
    for p in layer.parameters():
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=(3, 4))
    q = layer.conditioner(nc.tensor(x[:, :2])).data
    s = 2.0 * (2 / np.pi) * np.arctan(q[:, :2] / 2.0)
    expect = np.hstack([x[:, :2], x[:, 2:] * np.exp(s) + q[:, 2:]])
    y, ld = layer.forward(x)
    np.testing.assert_allclose(y.data, expect, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(ld.data, s.sum(1), rtol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0.1, 10))
def test_soft_clamp_bound(q, clamp):
    assert abs(soft_clamp(q, clamp)) < clamp


def test_volume_preserving_blocks_report_zero_logdet():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 5))
    for block in (
        randomize(FlowStack([CouplingLayer(Partition.halves(5), "additive", [8], rng)], 5), rng).blocks[0],
        PermutationLayer(5, rng),
        randomize(FlowStack([SplitResidualLayer(Partition.halves(5), [8], rng)], 5), rng).blocks[0],
    ):
        _, ld = block.forward(x)
        assert np.all(ld.data == 0.0)


# ---------------------------------------------------------------- ActNorm


def test_actnorm_identity_before_init_and_statistics_after():
    rng = np.random.default_rng(3)
    layer = ActNorm(8)
    x = rng.normal(3.0, 5.0, size=(64, 8))
    np.testing.assert_array_equal(layer.forward(x)[0].data, x)
    actnorm_init(layer, x)
    y = layer.forward(x)[0].data
    assert np.all(np.abs(y.mean(0)) <= 1e-8)
    assert np.all(np.abs(y.std(0) - 1) <= 1e-6)
    assert bool(layer.initialized)


def test_actnorm_closed_form_and_errors():
    layer = ActNorm(1)
    actnorm_init(layer, np.array([[2.0], [4.0]]))
    assert layer.scale[0] == pytest.approx(1.0)  # std of [2, 4] is 1
    assert layer.forward(np.array([[2.0], [4.0]]))[0].data.mean() == pytest.approx(0.0, abs=1e-15)
    std_normal = np.random.default_rng(0).normal(size=(100000, 2))
    layer2 = ActNorm(2)
    actnorm_init(layer2, std_normal)
    np.testing.assert_allclose(layer2.scale, 1.0, atol=0.01)
    with pytest.raises(ValueError):
        actnorm_init(ActNorm(2), np.ones((1, 2)))
    with pytest.raises(ValueError):
        actnorm_init(ActNorm(2), np.array([[1.0, 1.0], [2.0, 1.0]]))


def test_permutation_inverse():
    layer = PermutationLayer(9, np.random.default_rng(4))
    np.testing.assert_array_equal(layer.perm[layer.inverse_perm], np.arange(9))
    x = np.random.default_rng(5).normal(size=(3, 9))
    np.testing.assert_array_equal(layer.inverse(layer.forward(x)[0]).data, x)


# ---------------------------------------------------------------- spectral normalization / iresnet


def test_spectral_normalize_closed_forms():
    rng = np.random.default_rng(6)
    W = np.diag([2.0, 1.0])
    state = PowerIterationState.random(W.shape, rng)
    out = spectral_normalize(W, state, 0.9, iters=50).data
    np.testing.assert_allclose(out, W * 0.45, rtol=1e-12)
    assert np.linalg.svd(out, compute_uv=False)[0] == pytest.approx(0.9, rel=1e-12)

    W2 = np.diag([0.5, 0.1])
    np.testing.assert_array_equal(spectral_normalize(W2, PowerIterationState.random((2, 2), rng), 0.9).data, W2)
    Z = np.zeros((3, 3))
    np.testing.assert_array_equal(spectral_normalize(Z, PowerIterationState.random((3, 3), rng), 0.9).data, Z)
    with pytest.raises(ValueError):
        spectral_normalize(W, state, 1.0)
    with pytest.raises(ValueError):
        spectral_normalize(W, state, 0.5, iters=0)


def test_power_iteration_vs_svd_oracle():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(16, 16))
    sigma = power_iterate(W, PowerIterationState.random(W.shape, rng), 5)
    s1 = np.linalg.svd(W, compute_uv=False)[0]
    # a^T W b with unit a, b never exceeds the top singular value
    assert sigma <= s1 + 1e-12
    sigma = power_iterate(W, PowerIterationState.random(W.shape, rng), 200)
    assert abs(sigma - s1) / s1 < 1e-3


def _random_iresnet_block(dim, rng, c=0.9, hidden=(16, 16)):
    block = SpectralResidualBlock(dim, list(hidden), rng, c=c)
    for p in block.parameters():
        p.data = rng.normal(0, 1.0, p.shape)
    block.update_spectral(50)
    return block


def test_iresnet_normalized_weights_within_bound():
    rng = np.random.default_rng(8)
    block = _random_iresnet_block(6, rng)
    for w in block.normalized_weights():
        assert np.linalg.svd(w.data, compute_uv=False)[0] <= 0.9 + 1e-6


def test_iresnet_zero_residual_is_identity():
    rng = np.random.default_rng(9)
    block = SpectralResidualBlock(4, [8], rng)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(iresnet_forward(block, x).data, x)
    xs, it = iresnet_invert(block, x)
    assert it == 1
    np.testing.assert_array_equal(xs, x)


def test_iresnet_sampled_lipschitz():
    rng = np.random.default_rng(10)
    block = _random_iresnet_block(6, rng)
    a, b = rng.normal(size=(1000, 6)) * 3, rng.normal(size=(1000, 6)) * 3
    with nc.no_grad():
        fa, fb = block.residual(a).data, block.residual(b).data
    ratio = np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(a - b, axis=1)
    assert ratio.max() <= 0.9


def test_iresnet_bijective_no_collisions():
    rng = np.random.default_rng(11)
    flow = build_architecture("iresnet", 4, 4, (16,), rng)
    randomize(flow, rng, scale=1.0)
    a, b = rng.normal(size=(10000, 4)), rng.normal(size=(10000, 4))
    with nc.no_grad():
        ya, yb = flow.encode(a).data, flow.encode(b).data
    # bi-Lipschitz: ||g(a) - g(b)|| >= (1 - c)^depth ||a - b||
    assert np.all(np.linalg.norm(ya - yb, axis=1) >= 0.1**4 * np.linalg.norm(a - b, axis=1))


def test_iresnet_inverse_tolerance_and_contraction():
    rng = np.random.default_rng(12)
    block = _random_iresnet_block(7, rng)
    x = rng.uniform(-10, 10, size=(1000, 7))
    with nc.no_grad():
        y = iresnet_forward(block, x).data
    hist = []
    xs, it = iresnet_invert(block, y, tol=1e-9, max_iter=200, history=hist)
    assert it <= 200
    with nc.no_grad():
        assert np.max(np.abs(iresnet_forward(block, xs).data - y)) <= 1e-9
    assert np.max(np.abs(xs - x)) <= 1e-8
    h = np.array(hist)
    ratios = h[1:] / h[:-1]
    assert np.all(ratios[h[1:] > 1e-13] <= 0.9 + 1e-9)


def test_iresnet_non_convergence_error():
    rng = np.random.default_rng(13)
    block = _random_iresnet_block(5, rng)
    with nc.no_grad():
        y = iresnet_forward(block, rng.normal(size=(4, 5)) * 5).data
    with pytest.raises(ConvergenceError):
        iresnet_invert(block, y, tol=1e-15, max_iter=3)


def test_iresnet_rejects_non_lipschitz_activation():
    with pytest.raises(ValueError):
        SpectralResidualBlock(4, [8], np.random.default_rng(0), activation_name="silu")
    with pytest.raises(ValueError):
        SpectralResidualBlock(4, [8], np.random.default_rng(0), c=1.2)


def test_iresnet_jacobian_vs_finite_differences():
    rng = np.random.default_rng(14)
    block = _random_iresnet_block(5, rng)
    x = rng.normal(size=(3, 5))
    J = block.jacobian(x)
    for n in range(3):
        Jfd = fd_jacobian(lambda v: block._residual_np(v[None], [w.data for w in block.normalized_weights()])[0], x[n])
        np.testing.assert_allclose(J[n], Jfd, atol=1e-8)


# ---------------------------------------------------------------- architectures


def test_build_nice_structure():
    flow = build_architecture("nice", 4, 3, (8,), 0)
    assert len(flow) == 3
    parts = [(b.partition.A, b.partition.B) for b in flow.blocks]
    assert parts == [((0, 1), (2, 3)), ((2, 3), (0, 1)), ((0, 1), (2, 3))]
    assert all(b.mode == "additive" for b in flow.blocks)


def test_build_allinone_structure():
    flow = build_architecture("allinone", 4, 2, (8,), 0)
    kinds = [type(b).__name__ for b in flow.blocks]
    assert kinds == ["ActNorm", "PermutationLayer", "CouplingLayer"] * 2
    assert all(b.mode == "affine" for b in flow.blocks if isinstance(b, CouplingLayer))


def test_build_errors():
    with pytest.raises(ValueError):
        build_architecture("glow", 4, 2)
    with pytest.raises(ValueError):
        build_architecture("nice", 1, 2)
    with pytest.raises(ValueError):
        build_architecture("nice", 4, 0)


@pytest.mark.parametrize("name", ARCHITECTURES)
@pytest.mark.parametrize("dim", [4, 7])
def test_identity_at_initialization(name, dim):
    flow = build_architecture(name, dim, 3, (8,), 0)
    x = np.random.default_rng(15).normal(size=(20, dim))
    with nc.no_grad():
        y = flow.encode(x).data
    if name == "allinone":
        # only the fixed shuffles act at init; the map is their composition
        perm = np.arange(dim)
        for b in flow.blocks:
            if isinstance(b, PermutationLayer):
                perm = perm[b.perm]
        np.testing.assert_array_equal(y, x[:, perm])
    else:
        np.testing.assert_array_equal(y, x)


@pytest.mark.parametrize("name", ARCHITECTURES)
@pytest.mark.parametrize("dim", [4, 7, 14])
def test_round_trip_random_parameters(name, dim):
    rng = np.random.default_rng(dim)
    flow = build_architecture(name, dim, 4, (16, 16), rng)
    x = rng.uniform(-10, 10, size=(1000, dim))
    randomize(flow, rng, init_batch=x[:64])
    tol = 1e-8 if name == "iresnet" else 1e-10
    assert round_trip(flow, x) <= tol


@pytest.mark.parametrize("name", ["realnvp", "allinone", "nice", "revnet", "iresnet"])
def test_logdet_vs_finite_difference_jacobian(name):
    rng = np.random.default_rng(16)
    dim = 6
    flow = build_architecture(name, dim, 3, (12,), rng)
    pts = rng.normal(size=(50, dim))
    randomize(flow, rng, init_batch=pts)
    with nc.no_grad():
        _, ld = flow.forward(pts)
        fn = lambda v: flow.encode(v[None]).data[0]  # noqa: E731
        for n in range(50):
            det = abs(np.linalg.det(fd_jacobian(fn, pts[n])))
            assert abs(np.exp(ld.data[n]) - det) / det < 1e-4


def test_stack_logdet_is_sum_of_blocks():
    rng = np.random.default_rng(17)
    flow = randomize(build_architecture("realnvp", 5, 2, (8,), rng), rng)
    x = rng.normal(size=(4, 5))
    with nc.no_grad():
        _, total = flow.forward(x)
        y1, l1 = flow.blocks[0].forward(x)
        _, l2 = flow.blocks[1].forward(y1)
    np.testing.assert_allclose(total.data, l1.data + l2.data, rtol=1e-14)


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_parameter_gradients(name):
    rng = np.random.default_rng(18)
    flow = build_architecture(name, 5, 2, (6,), rng)
    x = nc.tensor(rng.normal(size=(4, 5)))
    randomize(flow, rng, init_batch=x.data)
    w = nc.tensor(rng.normal(size=(4, 5)))

    def loss():
        y, ld = flow.forward(x)
        back = flow.inverse(y * 1.1)
        out = nc.sum(nc.tanh(y) * w) + nc.sum(nc.square(back)) * 0.05
        # iresnet log-dets are diagnostics computed outside the graph
        return out if name == "iresnet" else out + nc.sum(ld) * 0.1

    assert nc.parameters_grad_check(loss, flow.parameters()) < 1e-5


def test_iresnet_logdet_is_a_constant():
    rng = np.random.default_rng(21)
    flow = randomize(build_architecture("iresnet", 4, 1, (8,), rng), rng)
    _, ld = flow.forward(rng.normal(size=(3, 4)))
    assert not ld.requires_grad


def test_iresnet_inverse_input_gradient():
    rng = np.random.default_rng(19)
    flow = randomize(build_architecture("iresnet", 4, 2, (8,), rng), rng, scale=1.0)
    y = nc.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert nc.parameters_grad_check(lambda: nc.sum(nc.square(flow.inverse(y))), [y]) < 1e-5


def test_state_dict_round_trip_is_bit_exact():
    rng = np.random.default_rng(20)
    a = build_architecture("allinone", 6, 2, (8,), 1)
    x = rng.normal(size=(10, 6))
    randomize(a, rng, init_batch=x)
    b = build_architecture("allinone", 6, 2, (8,), 99)
    b.load_state_dict(a.state_dict())
    with nc.no_grad():
        np.testing.assert_array_equal(a.encode(x).data, b.encode(x).data)


def test_actnorm_uncentered_init_keeps_origin_fixed():
    x = np.array([[1.0, -2.0], [3.0, 2.0], [2.0, 4.0]])
    layer = ActNorm(2)
    actnorm_init(layer, x, center=False)
    np.testing.assert_array_equal(layer.bias.data, 0.0)
    y, _ = layer.forward(x)
    np.testing.assert_allclose(np.mean(y.data**2, axis=0), 1.0, rtol=1e-14)
    np.testing.assert_array_equal(layer.forward(np.zeros((1, 2)))[0].data, 0.0)
