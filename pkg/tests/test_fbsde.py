import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpfbsde.benchmarks import (
    affine_problem,
    builtin_models,
    divergent_model,
    lq_model,
    no_jump_pair,
    nonlinear_base_control,
    nonlinear_model,
    pure_forward_model,
)
from jumpfbsde.errors import PicardDiverged
from jumpfbsde.fbsde import (
    ControlProcess,
    PicardConfig,
    condexp,
    estimate_cost,
    simulate_forward,
    solve_adjoint,
    solve_fbsde,
    solve_variational,
    write_trajectory_csv,
)
from jumpfbsde.model import FiltrationSpec

from conftest import batch_for

P14 = 2**14


def zero_control(batch, k=1):
    return ControlProcess.constant(np.zeros(k), batch.P, batch.grid.N, k)


# ---------------------------------------------------------------------------
# forward pass


def test_constant_state():
    spec = affine_problem(a=[1.5])
    b = batch_for(spec)
    x, _, _ = simulate_forward(spec, b, zero_control(b))
    assert np.all(x == 1.5)


def test_constant_drift_exact():
    spec = affine_problem(b={"const": [2.0]})
    b = batch_for(spec, N=10, P=8)
    x, _, _ = simulate_forward(spec, b, zero_control(b))
    np.testing.assert_allclose(x[:, :, 0], np.broadcast_to(0.2 * np.arange(11), (8, 11)), rtol=0, atol=1e-14)


def test_brownian_terminal_moments():
    spec = affine_problem(g={"const": [[1.0]]})
    b = batch_for(spec, N=16, P=P14, seed=2)
    xT = simulate_forward(spec, b, zero_control(b))[0][:, -1, 0]
    assert abs(xT.mean()) <= 3 / np.sqrt(P14)
    assert abs(xT.var(ddof=1) - 1) <= 0.05


# ---------------------------------------------------------------------------
# state system


def test_zero_fixed_point_one_pass():
    spec = affine_problem(a=[0.4], atoms=[1.0], weights=[1.0], b={"const": [0.1], "A_x": [[-0.5]]},
                          g={"const": [[0.3]]}, sigma={"const": [[0.2]]})
    b = batch_for(spec)
    u = zero_control(b)
    tr = solve_fbsde(spec, b, u)
    x, _, _ = simulate_forward(spec, b, u)
    assert np.array_equal(tr.x, x)
    assert not np.any(tr.y) and not np.any(tr.z) and not np.any(tr.r)
    assert tr.iterations == 1


@pytest.mark.parametrize("c", [0.7, -1.3])
def test_constant_driver_gives_linear_y(c):
    spec = affine_problem(f={"const": [c]})
    b = batch_for(spec, N=20, P=64)
    tr = solve_fbsde(spec, b, zero_control(b))
    t = b.grid.t
    np.testing.assert_allclose(tr.y[:, :, 0], np.broadcast_to(c * (1 - t), (64, 21)), rtol=0, atol=1e-12)
    assert not np.any(tr.z) and not np.any(tr.r)


def test_coupled_linear_two_point_problem():
    # x' = y, y' = -x, x(0) = 1, y(T) = 0 has x = cos t + tan(T) sin t
    T = 0.5
    spec = affine_problem(T=T, a=[1.0], b={"A_y": [[1.0]]}, f={"A_x": [[1.0]]})
    b = batch_for(spec, N=200, P=4)
    tr = solve_fbsde(spec, b, zero_control(b), PicardConfig(max_iter=200, tol=1e-12))
    t = b.grid.t
    x_exact = np.cos(t) + np.tan(T) * np.sin(t)
    y_exact = -np.sin(t) + np.tan(T) * np.cos(t)
    assert np.max(np.abs(tr.x[0, :, 0] - x_exact)) <= 1e-3
    assert np.max(np.abs(tr.y[0, :, 0] - y_exact)) <= 1e-3


def test_terminal_pinning():
    spec = nonlinear_model()
    b = batch_for(spec, N=16, P=1024)
    tr = solve_fbsde(spec, b, ControlProcess(nonlinear_base_control(b.grid, b.P)))
    xi = spec.terminal.fn(b.B_T, b.counts_T)
    assert np.array_equal(tr.y[:, -1], xi)
    assert np.all(tr.x[:, 0] == spec.a)
    y0 = tr.y[:, 0]
    assert np.all(y0 == y0[0])


def test_divergent_raises_with_residual_log():
    spec = divergent_model()
    b = batch_for(spec, N=50, P=64)
    with pytest.raises(PicardDiverged) as exc:
        solve_fbsde(spec, b, zero_control(b))
    res = exc.value.residuals
    assert len(res) >= 2 and res[-1] >= res[0]


@pytest.mark.parametrize("name", ["nonlinear", "no-jump", "no-jump-twin", "lq", "pure-forward"])
def test_picard_residual_monotone_tail(name):
    spec = builtin_models()[name]
    b = batch_for(spec, N=32, P=2048)
    tr = solve_fbsde(spec, b, zero_control(b), PicardConfig(tol=1e-10))
    res = tr.residuals
    tail = res[-3:]
    assert all(a > c for a, c in zip(tail, tail[1:])) or len(res) <= 2


def test_pure_forward_backward_vanishes():
    spec = pure_forward_model()
    b = batch_for(spec, N=32, P=2048)
    tr = solve_fbsde(spec, b, zero_control(b))
    assert max(np.abs(tr.y).max(), np.abs(tr.z).max(), np.abs(tr.r).max()) <= 1e-8


def test_no_jump_twin_bit_identical():
    base, twin = no_jump_pair()
    bb = batch_for(base, N=32, P=2048, seed=5)
    bt = batch_for(twin, N=32, P=2048, seed=5)
    assert np.array_equal(bb.dB, bt.dB)
    tb = solve_fbsde(base, bb, zero_control(bb))
    tt = solve_fbsde(twin, bt, zero_control(bt))
    for f in ("x", "y", "z", "y_hat", "u"):
        assert np.array_equal(getattr(tb, f), getattr(tt, f)), f
    assert tb.r.shape[2] == 0 and not np.any(tt.r)
    assert estimate_cost(base, bb, tb).J == estimate_cost(twin, bt, tt).J


# ---------------------------------------------------------------------------
# adjoint


def _solved(spec, N=16, P=512):
    b = batch_for(spec, N=N, P=P)
    u = zero_control(b, spec.dims.k)
    return b, solve_fbsde(spec, b, u)


def test_adjoint_zero_data():
    spec = affine_problem(atoms=[1.0], weights=[1.0], b={"const": [0.2]}, g={"const": [[0.5]]})
    b, tr = _solved(spec)
    ad = solve_adjoint(spec, b, tr)
    for arr in (ad.p, ad.q, ad.beta, ad.k):
        assert not np.any(arr)


def test_adjoint_p_constant_one():
    spec = affine_problem(atoms=[1.0], weights=[1.0], b={"const": [0.2]}, g={"const": [[0.5]]}, phi={"lin": [1.0]})
    b, tr = _solved(spec)
    ad = solve_adjoint(spec, b, tr)
    np.testing.assert_allclose(ad.p, 1.0, rtol=0, atol=1e-12)
    assert np.abs(ad.q).max() <= 1e-12 and np.abs(ad.beta).max() <= 1e-12


def test_adjoint_k_constant():
    spec = affine_problem(h={"lin": [1.0]}, f={"const": [0.3]})
    b, tr = _solved(spec)
    ad = solve_adjoint(spec, b, tr)
    assert np.all(ad.k == -1.0)


def test_adjoint_boundary_conditions():
    spec = nonlinear_model()
    b, tr = _solved(spec, N=16, P=1024)
    ad = solve_adjoint(spec, b, tr)
    np.testing.assert_array_equal(ad.p[:, -1], spec.coeffs.phi.grad(tr.x[:, -1]))
    np.testing.assert_array_equal(ad.k[:, 0], -spec.coeffs.h.grad(tr.y[:, 0]))


def test_adjoint_no_marks_empty_beta():
    base, _ = no_jump_pair()
    b, tr = _solved(base)
    ad = solve_adjoint(base, b, tr)
    assert ad.beta.shape[2] == 0


# ---------------------------------------------------------------------------
# variational system


def test_variational_zero_direction():
    spec = nonlinear_model()
    b, tr = _solved(spec)
    var = solve_variational(spec, b, tr, np.zeros_like(tr.u))
    for arr in (var.X1, var.Y1, var.Z1, var.R1):
        assert not np.any(arr)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.sampled_from([2.0, -0.5, 3.0]))
def test_variational_scaling_linear(seed, scale):
    spec = nonlinear_model()
    b, tr = _solved(spec, N=8, P=256)
    theta = np.random.default_rng(seed).uniform(-1, 1, tr.u.shape)
    v1 = solve_variational(spec, b, tr, theta, PicardConfig(tol=1e-13, max_iter=200))
    v2 = solve_variational(spec, b, tr, scale * theta, PicardConfig(tol=1e-13, max_iter=200))
    for f in ("X1", "Y1", "Z1", "R1"):
        a, c = getattr(v1, f), getattr(v2, f)
        np.testing.assert_allclose(c, scale * a, rtol=1e-9, atol=1e-12)
    assert np.all(v1.X1[:, 0] == 0) and np.all(v1.Y1[:, -1] == 0)


@pytest.fixture(scope="module")
def difference_quotient_gap():
    spec = nonlinear_model()
    b = batch_for(spec, N=32, P=2048, seed=1)
    u0 = nonlinear_base_control(b.grid, b.P)
    pc = PicardConfig(tol=1e-12, max_iter=200)
    tr = solve_fbsde(spec, b, ControlProcess(u0), pc)
    theta = np.broadcast_to(np.sin(3 * b.grid.t[:-1])[None, :, None], u0.shape).copy()
    var = solve_variational(spec, b, tr, theta, pc)
    y = 1e-4
    tp = solve_fbsde(spec, b, ControlProcess(u0 + y * theta), pc)
    return np.abs((tp.x - tr.x) / y - var.X1)[:, :, 0]


@pytest.mark.xfail(strict=True, reason="the gap grows with |x| and stacked jumps; tail paths carry "
                                       "the degree-2 regression extrapolation error (sup ~0.014)")
def test_variational_difference_quotient_sup_all_paths(difference_quotient_gap):
    assert difference_quotient_gap.max() <= 1e-2


def test_variational_difference_quotient_rms(difference_quotient_gap):
    assert np.sqrt(np.mean(difference_quotient_gap**2)) <= 1e-3


# ---------------------------------------------------------------------------
# cost


def test_cost_unit_running():
    spec = affine_problem(l={"const": 1.0})
    b, tr = _solved(spec)
    est = estimate_cost(spec, b, tr)
    assert est.J == pytest.approx(1.0, abs=1e-14) and est.se == 0.0


def test_cost_terminal_linear():
    spec = affine_problem(b={"const": [2.0]}, phi={"lin": [1.0]})
    b, tr = _solved(spec)
    assert estimate_cost(spec, b, tr).J == pytest.approx(2.0, abs=1e-13)


@pytest.mark.parametrize("c", [0.5, -2.0])
def test_cost_initial_backward(c):
    spec = affine_problem(terminal={"const": [c]}, h={"quad": [[2.0]]})
    b, tr = _solved(spec)
    assert estimate_cost(spec, b, tr).J == pytest.approx(c * c, abs=1e-13)


# ---------------------------------------------------------------------------
# invariances


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 10**5))
def test_path_permutation_invariance(seed):
    spec = nonlinear_model()
    b = batch_for(spec, N=8, P=512, seed=3)
    u = ControlProcess(nonlinear_base_control(b.grid, b.P))
    perm = np.random.default_rng(seed).permutation(b.P)
    tr = solve_fbsde(spec, b, u)
    tp = solve_fbsde(spec, b.subset(perm), u)
    np.testing.assert_allclose(tp.x, tr.x[perm], rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(tp.y, tr.y[perm], rtol=1e-9, atol=1e-11)


def test_delayed_policy_uses_lagged_state():
    spec = lq_model(filtration=FiltrationSpec("delayed", 0.25))
    b = batch_for(spec, N=16, P=256)
    seen = []

    def policy(i, t, X):
        seen.append((i, X.shape[1]))
        return np.zeros((X.shape[0], 1))

    solve_fbsde(spec, b, ControlProcess(policy=policy, filtration=spec.filtration))
    assert all(w == 0 for i, w in seen if i <= 4) and all(w == 1 for i, w in seen if i > 4)


def test_csv_layout(tmp_path):
    spec = lq_model()
    b, tr = _solved(spec, N=4, P=3)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, tr, b.grid)
    lines = path.read_text().splitlines()
    assert lines[0] == "path,step,t,x_1,y_1,z_1_1,r_1_1,r_2_1"
    assert len(lines) == 1 + 3 * 5
    assert float(lines[1].split(",")[3]) == tr.x[0, 0, 0]
