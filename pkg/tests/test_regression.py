import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpfbsde.errors import NonFiniteValue, SingularRegression
from jumpfbsde.fbsde import condexp
from jumpfbsde.model import FiltrationSpec
from jumpfbsde.regression import Projector, path_mean


def _x(P=2000, q=1, seed=0):
    return np.random.default_rng(seed).standard_normal((P, q))


def test_linear_target_recovered_exactly():
    X = _x()
    y = 2 * X[:, 0] + 1
    np.testing.assert_allclose(Projector(X, degree=2).project(y), y, atol=1e-8)


def test_constant_target_returned_exactly():
    X = _x()
    y = np.full(X.shape[0], 0.37)
    assert np.array_equal(Projector(X).project(y), y)


def test_trivial_regressor_gives_mean():
    y = _x()[:, 0]
    out = Projector(None).project(y)
    assert np.all(out == out[0]) and out[0] == pytest.approx(y.mean(), abs=1e-15)


def test_fit_predict_matches_projection():
    X = _x(q=2)
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    fit, vals = Projector(X, 3).fit_project(y)
    np.testing.assert_allclose(fit.predict(X), vals, atol=1e-12)


def test_vector_targets_keep_shape():
    X = _x()
    y = np.stack([X[:, 0], X[:, 0] ** 2], axis=1)[:, :, None]
    assert Projector(X).project(y).shape == y.shape


def test_collinear_regressor_is_ill_conditioned_without_ridge():
    x = _x()
    X = np.concatenate([x, 2 * x + 1], axis=1)
    with pytest.raises(SingularRegression):
        Projector(X, degree=2, ridge=0.0)


def test_non_finite_input_raises():
    X = _x()
    y = np.ones(X.shape[0])
    y[3] = np.nan
    with pytest.raises(NonFiniteValue):
        Projector(X).project(y)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), degree=st.integers(0, 3))
def test_projection_idempotent(seed, degree):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((500, 2))
    y = rng.standard_normal(500) + X[:, 0] ** 3
    proj = Projector(X, degree)
    once = proj.project(y)
    np.testing.assert_allclose(proj.project(once), once, atol=1e-8 * (1 + np.abs(once).max()))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), degree=st.integers(0, 3))
def test_projection_non_expansive(seed, degree):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((400, 1))
    y1, y2 = rng.standard_normal((2, 400))
    proj = Projector(X, degree)
    assert np.linalg.norm(proj.project(y1) - proj.project(y2)) <= np.linalg.norm(y1 - y2) * (1 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), degree=st.integers(1, 3))
def test_tower_property(seed, degree):
    # projecting to the trivial sigma-field after any projection keeps the mean
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((600, 2))
    y = np.exp(0.3 * X[:, 0]) * rng.standard_normal(600) + X[:, 1]
    inner = Projector(X, degree).project(y)
    outer = Projector(None).project(inner)
    assert abs(outer[0] - y.mean()) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((300, 1))
    y = X[:, 0] ** 2 + rng.standard_normal(300)
    perm = rng.permutation(300)
    a = Projector(X).project(y)[perm]
    b = Projector(X[perm]).project(y[perm])
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_path_mean_exact_on_constants():
    v = np.full((7, 2), 1 / 3)
    assert np.array_equal(path_mean(v), v[0])


class _Traj:
    def __init__(self, x):
        self.x = x


@pytest.mark.parametrize("filt", [FiltrationSpec("full"), FiltrationSpec("trivial"), FiltrationSpec("delayed", 0.5)])
def test_condexp_constant_any_filtration(filt):
    from jumpfbsde.model import MarkSpace
    from jumpfbsde.scenario import TimeGrid, generate

    b = generate(TimeGrid(1.0, 8), MarkSpace.empty(), 256, 1, rng=0)
    x = np.cumsum(np.concatenate([np.zeros((256, 1, 1)), b.dB], axis=1), axis=1)
    out = condexp(np.full((256, 1), 2.5), 6, filt, b, _Traj(x))
    assert np.array_equal(out, np.full((256, 1), 2.5))


def test_condexp_delay_beyond_horizon_is_mean():
    from jumpfbsde.model import MarkSpace
    from jumpfbsde.scenario import TimeGrid, generate

    b = generate(TimeGrid(1.0, 8), MarkSpace.empty(), 256, 1, rng=0)
    x = np.cumsum(np.concatenate([np.zeros((256, 1, 1)), b.dB], axis=1), axis=1)
    vals = x[:, 7] ** 2
    out = condexp(vals, 7, FiltrationSpec("delayed", 1.0), b, _Traj(x))
    np.testing.assert_allclose(out, vals.mean(axis=0, keepdims=True).repeat(256, 0), atol=1e-14)


def test_condexp_full_linear_recovery():
    from jumpfbsde.model import MarkSpace
    from jumpfbsde.scenario import TimeGrid, generate

    b = generate(TimeGrid(1.0, 8), MarkSpace.empty(), 512, 1, rng=0)
    x = np.cumsum(np.concatenate([np.zeros((512, 1, 1)), b.dB], axis=1), axis=1)
    vals = 2 * x[:, 5] + 1
    np.testing.assert_allclose(condexp(vals, 5, FiltrationSpec("full"), b, _Traj(x)), vals, atol=1e-8)
