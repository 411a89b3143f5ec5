import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpfbsde.benchmarks import affine_problem, builtin_models, lq_model, no_jump_pair, pure_control_model
from jumpfbsde.fbsde import ControlProcess, solve_adjoint, solve_fbsde
from jumpfbsde.hamiltonian import (
    candidate_grid,
    convexity_probe,
    eval_H,
    grad_H,
    gradient_fd_check,
    max_condition_check,
    terminal_convexity_probe,
)
from jumpfbsde.model import argument_shapes

from conftest import batch_for

ONE = np.ones(1)


def _point(spec, rng=None, scale=1.0):
    rng = rng or np.random.default_rng(0)
    shp = argument_shapes(spec.dims, spec.marks.M)
    w = {b: scale * rng.standard_normal(s) for b, s in shp.items()}
    d = spec.dims
    mult = (rng.standard_normal(d.n), rng.standard_normal((d.n, d.d)), rng.standard_normal((spec.marks.M, d.n)),
            rng.standard_normal(d.m))
    return w, mult


def _args(w):
    return (w["x"], w["y"], w["z"], w["r"], w["v"])


def test_all_zero_hamiltonian(scalar_zero):
    w, _ = _point(scalar_zero)
    zeros = (np.zeros(1), np.zeros((1, 1)), np.zeros((0, 1)), np.zeros(1))
    assert eval_H(scalar_zero, 0.3, *_args(w), *zeros) == 0.0


def test_worked_example_value():
    spec = affine_problem(atoms=[1.0], weights=[2.0], b={"const": [4.0]}, g={"const": [[7.0]]},
                          sigma={"const": [[3.0]]}, f={"const": [5.0]}, l={"const": 1.0})
    w, _ = _point(spec)
    H = eval_H(spec, 0.0, *_args(w), np.array([2.0]), np.array([[1.0]]), np.array([[2.0]]), np.array([3.0]))
    assert H == 13.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), name=st.sampled_from(sorted(builtin_models())))
def test_bilinear_in_multipliers(seed, name):
    spec = builtin_models()[name]
    rng = np.random.default_rng(seed)
    w, m1 = _point(spec, rng)
    _, m2 = _point(spec, rng)
    zero = tuple(np.zeros_like(a) for a in m1)
    summed = tuple(a + b for a, b in zip(m1, m2))
    H = lambda m: eval_H(spec, 0.2, *_args(w), *m)  # noqa: E731
    lhs = H(summed) - H(m1) - H(m2) + H(zero)
    assert abs(lhs) <= 1e-12 * (1 + abs(H(m1)) + abs(H(m2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(-3, 3))
def test_scaling_in_multipliers(seed, a):
    spec = builtin_models()["nonlinear"]
    rng = np.random.default_rng(seed)
    w, m = _point(spec, rng)
    zero = tuple(np.zeros_like(x) for x in m)
    H0 = eval_H(spec, 0.2, *_args(w), *zero)
    Hm = eval_H(spec, 0.2, *_args(w), *m)
    Ha = eval_H(spec, 0.2, *_args(w), *(a * x for x in m))
    assert Ha - H0 == pytest.approx(a * (Hm - H0), rel=1e-10, abs=1e-10)


def test_state_free_coefficients_give_zero_state_gradient():
    spec = affine_problem(atoms=[1.0], weights=[1.0], b={"const": [1.0], "A_v": [[1.0]]},
                          g={"const": [[0.4]]}, f={"const": [2.0]})
    w, m = _point(spec)
    g = grad_H(spec, 0.1, *_args(w), *m)
    for blk in "xyzr":
        assert not np.any(g.block(blk))


def test_control_gradient_through_drift():
    spec = affine_problem(b={"A_v": [[1.0]]})
    w, _ = _point(spec)
    g = grad_H(spec, 0.0, *_args(w), np.array([2.0]), np.zeros((1, 1)), np.zeros((0, 1)), np.zeros(1))
    assert g.v[0] == 2.0


@pytest.mark.parametrize("name", sorted(builtin_models()))
def test_gradient_matches_finite_differences(name):
    res = gradient_fd_check(builtin_models()[name], probe_count=100)
    assert all(ok for ok, _ in res.values()), res


def test_no_marks_drops_jump_term():
    base, twin = no_jump_pair()
    rng = np.random.default_rng(1)
    w, m = _point(base, rng)
    wt = dict(w, r=np.zeros((1, 1)))
    mt = (m[0], m[1], np.array([[5.0]]), m[3])
    # twin's jump coefficient is zero, so beta drops out and H agrees with the base model
    assert eval_H(base, 0.3, *_args(w), *m) == pytest.approx(eval_H(twin, 0.3, *_args(wt), *mt), abs=1e-14)
    assert grad_H(base, 0.3, *_args(w), *m).r.shape == (0, 1)


def test_convexity_lq_passes():
    spec = lq_model()
    rng = np.random.default_rng(3)
    _, m = _point(spec, rng)
    assert convexity_probe(spec, m, samples=1000).passed


def test_convexity_detects_concave_control_cost():
    spec = affine_problem(l={"quad": np.diag([0.0, 0.0, 0.0, -2.0])})
    rep = convexity_probe(spec, (np.zeros(1), np.zeros((1, 1)), np.zeros((0, 1)), np.zeros(1)), samples=200)
    assert not rep.passed and rep.worst_violation < 0


@pytest.mark.parametrize("name", ["lq", "nonlinear", "pure-forward"])
def test_terminal_convexity(name):
    spec = builtin_models()[name]
    assert terminal_convexity_probe(spec.coeffs.phi, spec.dims.n).passed
    assert terminal_convexity_probe(spec.coeffs.h, spec.dims.m).passed


def test_candidate_grid_default_size():
    grid = candidate_grid(pure_control_model())
    assert grid.shape == (11, 1) and grid.min() == -1 and grid.max() == 1


def _pure_control_check(level, candidates=None):
    spec = pure_control_model()
    b = batch_for(spec, N=8, P=64)
    tr = solve_fbsde(spec, b, ControlProcess.constant(level, b.P, b.grid.N))
    ad = solve_adjoint(spec, b, tr)
    return max_condition_check(spec, b, tr, ad, candidates=candidates)


def test_max_condition_at_minimizer_passes():
    assert _pure_control_check(0.3).passed


def test_max_condition_at_zero_fails():
    rep = _pure_control_check(0.0, candidates=[[-1.0], [0.0], [0.3], [1.0]])
    assert not rep.passed
    np.testing.assert_allclose(rep.margins, 0.09, atol=1e-12)
    assert np.all(rep.candidates[rep.argmin] == 0.3)
    assert not _pure_control_check(0.0).passed


def test_max_condition_noise_allowance_scales_with_distance():
    spec = pure_control_model()
    b = batch_for(spec, N=4, P=32)
    tr = solve_fbsde(spec, b, ControlProcess.constant(0.0, b.P, b.grid.N))
    ad = solve_adjoint(spec, b, tr)
    cands = [[0.3]]
    # allowance 3 * se * |0 - 0.3| = 0.09 exactly cancels the margin
    se = np.full((b.P, b.grid.N), 0.1)
    rep = max_condition_check(spec, b, tr, ad, candidates=cands, gradient_se=se)
    np.testing.assert_allclose(rep.margins, 0.0, atol=1e-12)
