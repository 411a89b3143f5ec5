import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpfbsde.errors import ResourceLimit
from jumpfbsde.model import MarkSpace
from jumpfbsde.scenario import RngSpec, TimeGrid, compensated, dump, generate, jump_integral, load

P14 = 2**14
TWO_MARKS = MarkSpace([1.0, -0.5], [1.5, 1.0])


def test_grid_nodes_are_uniform():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    np.testing.assert_array_equal(g.t, np.arange(9) * 0.25)


@pytest.mark.parametrize("T, N", [(1.0, 0), (0.0, 4), (1.0, 2.5)])
def test_grid_rejects_bad_input(T, N):
    with pytest.raises(ValueError):
        TimeGrid(T, N)


def test_same_seed_bit_identical():
    g = TimeGrid(1.0, 16)
    a = generate(g, TWO_MARKS, 1000, 2, rng=5)
    b = generate(g, TWO_MARKS, 1000, 2, rng=RngSpec(5))
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.dN, b.dN)


def test_different_seed_differs():
    g = TimeGrid(1.0, 16)
    assert not np.array_equal(generate(g, TWO_MARKS, 64, 1, rng=1).dB, generate(g, TWO_MARKS, 64, 1, rng=2).dB)


@pytest.mark.parametrize("workers", [2, 8])
def test_worker_count_does_not_change_draws(workers):
    g = TimeGrid(1.0, 16)
    a = generate(g, TWO_MARKS, 3000, 1, rng=9, workers=1)
    b = generate(g, TWO_MARKS, 3000, 1, rng=9, workers=workers)
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.dN, b.dN)


@settings(max_examples=20, deadline=None)
@given(P=st.integers(1, 1500))
def test_prefix_stability(P):
    # a path's draws do not depend on the total path count
    g = TimeGrid(1.0, 4)
    full = generate(g, TWO_MARKS, 1500, 1, rng=3)
    part = generate(g, TWO_MARKS, P, 1, rng=3)
    assert np.array_equal(full.dB[:P], part.dB) and np.array_equal(full.dN[:P], part.dN)


def test_brownian_moments():
    g = TimeGrid(1.0, 10)
    b = generate(g, MarkSpace.empty(), P14, 1, rng=0)
    dB = b.dB[:, :, 0]
    assert np.all(np.abs(dB.mean(axis=0)) <= 3 * np.sqrt(g.dt / P14))
    assert np.all(np.abs(dB.var(axis=0, ddof=1) / g.dt - 1) <= 0.05)


def test_poisson_mean():
    g = TimeGrid(1.0, 10)
    b = generate(g, MarkSpace([1.0], [2.0]), P14, 1, rng=0)
    dN = b.dN[:, :, 0]
    assert abs(dN[:, 0].mean() - 0.2) <= 3 * np.sqrt(0.2 / P14)
    assert abs(dN.mean() - 0.2) <= 3 * np.sqrt(0.2 / dN.size)


@pytest.mark.parametrize("count, expected", [(0, -0.2), (1, 0.8)])
def test_compensated_arithmetic(count, expected):
    g = TimeGrid(1.0, 10)
    b = generate(g, MarkSpace([1.0], [2.0]), 4, 1, rng=0)
    dN = b.dN.copy()
    dN[0, 0, 0] = count
    b2 = type(b)(g, b.marks, b.dB, dN, 0)
    assert compensated(b2, 0, 0, 0) == pytest.approx(expected, abs=1e-15)
    assert b2.dNc[0, 0, 0] == compensated(b2, 0, 0, 0)


def test_compensated_index_errors():
    b = generate(TimeGrid(1.0, 4), MarkSpace([1.0], [2.0]), 4, 1, rng=0)
    with pytest.raises(IndexError):
        compensated(b, 4, 0, 0)
    with pytest.raises(IndexError):
        compensated(b, 0, 0, 1)


def test_compensated_total_mean_zero():
    b = generate(TimeGrid(1.0, 32), TWO_MARKS, P14, 1, rng=4)
    for j in range(2):
        x = b.dNc[:, :, j].sum(axis=1)
        assert abs(x.mean()) <= 3 * x.std(ddof=1) / np.sqrt(P14)


def test_independence_proxy():
    b = generate(TimeGrid(1.0, 8), TWO_MARKS, P14, 1, rng=6)
    for i in range(8):
        for j in range(2):
            c = np.corrcoef(b.dB[:, i, 0], b.dNc[:, i, j])[0, 1]
            assert abs(c) <= 3 / np.sqrt(P14)


def test_resource_limit():
    with pytest.raises(ResourceLimit):
        generate(TimeGrid(1.0, 1000), TWO_MARKS, 10**6, 4, memory_budget=10**6)


def test_dump_load_roundtrip(tmp_path):
    b = generate(TimeGrid(0.5, 8), TWO_MARKS, 100, 2, rng=2**40 + 7)
    path = tmp_path / "batch.bin"
    dump(b, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FBMP"
    c = load(path, 0.5, TWO_MARKS)
    assert c.seed == b.seed and c.grid == b.grid
    assert np.array_equal(b.dB, c.dB) and np.array_equal(b.dN, c.dN)


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        load(p, 1.0, TWO_MARKS)


def test_terminal_summaries():
    b = generate(TimeGrid(1.0, 8), TWO_MARKS, 50, 2, rng=1)
    np.testing.assert_allclose(b.B_T, b.dB.sum(axis=1), rtol=0, atol=1e-13)
    np.testing.assert_array_equal(b.counts_T, b.dN.sum(axis=1))
