import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpto.bezier import (ControlPointBatch, DimensionError, bernstein, bernstein_derivative, build_basis,
                         build_boundary, build_consensus, eval_states, shift_matrix)


def test_bernstein_quadratic_midpoint():
    np.testing.assert_allclose(bernstein(2, 0.5)[:, 0], [0.25, 0.5, 0.25], atol=1e-15)


def test_partition_of_unity_and_endpoint():
    b = build_basis(10, 50)
    np.testing.assert_allclose(b.W.sum(axis=0), 1.0, atol=1e-12)
    expected = np.zeros(11)
    expected[-1] = 1.0
    np.testing.assert_allclose(b.W[:, -1], expected, atol=1e-15)


@pytest.mark.parametrize("N", [40, 50])
def test_derivative_columns_sum_to_zero(N):
    b = build_basis(10, N)
    for M in (b.W1, b.W2, b.W3):
        assert np.max(np.abs(M.sum(axis=0))) <= 1e-12 * max(1.0, np.abs(M).max())


def test_shapes():
    b = build_basis(10, 40, 4.0)
    assert b.W.shape == b.W1.shape == b.W2.shape == b.W3.shape == (11, 40)
    assert build_boundary(b).A0.shape == (2, 11)
    cons = build_consensus(b, 6)
    assert cons.Acons_xy.shape == (11, 18)
    assert cons.Acons_theta.shape == (11, 6)
    np.testing.assert_array_equal(build_consensus(b, 1).Acons_theta[:, 0], b.W[:, 0])


def test_invalid_dimensions():
    with pytest.raises(DimensionError):
        build_basis(2, 40)
    with pytest.raises(DimensionError):
        build_consensus(build_basis(10, 40), 40)
    with pytest.raises(DimensionError):
        ControlPointBatch(np.zeros((11, 2)), np.zeros((11, 3)), np.zeros((11, 2)))


def test_boundary_rows():
    b = build_basis(10, 40, 4.0)
    bd = build_boundary(b)
    c = np.full(11, 3.0)
    np.testing.assert_allclose(bd.A0 @ c, [3.0, 0.0], atol=1e-12)
    lin = np.linspace(0.0, 10.0, 11)   # px(nu) = 10 nu
    np.testing.assert_allclose(bd.Af_xy @ lin, [10.0], atol=1e-12)
    np.testing.assert_allclose(bd.A0 @ lin, [0.0, 10.0 / 4.0], atol=1e-12)


def test_constant_and_linear_curves():
    b = build_basis(10, 40, 4.0)
    s = eval_states(ControlPointBatch(np.full((11, 1), 2.0), np.full((11, 1), -1.0), np.zeros((11, 1))), b)
    np.testing.assert_allclose(s.px, 2.0, atol=1e-12)
    for arr in (s.vx, s.ax, s.jx, s.vy):
        np.testing.assert_allclose(arr, 0.0, atol=1e-9)
    lin = np.linspace(0.0, 60.0, 11)[:, None]
    s = eval_states(ControlPointBatch(lin, 0 * lin, 0 * lin), b)
    np.testing.assert_allclose(s.vx, 15.0, atol=1e-9)
    np.testing.assert_allclose(s.ax, 0.0, atol=1e-9)


def test_finite_difference_agreement():
    # random batch rescaled to the admissible jerk range (|j| <= 6 m/s^3)
    rng = np.random.default_rng(0)
    b = build_basis(10, 200, 4.0)
    C = rng.normal(size=(11, 3))
    C *= 6.0 / np.abs(b.W3.T @ C).max(axis=0)
    p, v = b.W.T @ C, b.W1.T @ C
    fd = (p[2:] - p[:-2]) / (2 * b.dt)
    assert np.max(np.abs(fd - v[1:-1])) <= 1e-3


def test_finite_difference_truncation_bound():
    # central differences are off by at most dt^2 / 6 * max |jerk|
    rng = np.random.default_rng(3)
    b = build_basis(10, 200, 4.0)
    C = rng.normal(size=(11, 4)) * 10
    p, v, j = b.W.T @ C, b.W1.T @ C, b.W3.T @ C
    fd = (p[2:] - p[:-2]) / (2 * b.dt)
    assert np.all(np.abs(fd - v[1:-1]).max(axis=0) <= b.dt ** 2 / 6 * np.abs(j).max(axis=0) + 1e-9)


def test_finite_difference_second_order():
    # halving dt should cut the central-difference error by about four
    rng = np.random.default_rng(1)
    C = rng.normal(size=(11, 1))
    errs = []
    for N in (100, 200):
        b = build_basis(10, N, 4.0)
        p, v = b.W.T @ C, b.W1.T @ C
        errs.append(np.max(np.abs((p[2:] - p[:-2]) / (2 * b.dt) - v[1:-1])))
    assert 3.0 < errs[0] / errs[1] < 5.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 12), nu=st.floats(0.0, 1.0), order=st.integers(1, 3))
def test_derivative_matches_finite_difference(n, nu, order):
    h = 1e-4
    lo, hi = max(nu - h, 0.0), min(nu + h, 1.0)
    fd = (bernstein_derivative(n, hi, order - 1) - bernstein_derivative(n, lo, order - 1)) / (hi - lo)
    an = bernstein_derivative(n, 0.5 * (lo + hi), order)
    assert np.max(np.abs(fd - an)) <= 1e-4 * max(1.0, np.abs(an).max())


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 12), N=st.integers(2, 80))
def test_partition_of_unity_property(n, N):
    b = build_basis(n, N)
    assert np.max(np.abs(b.W.sum(axis=0) - 1.0)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(0.0, 0.3), seed=st.integers(0, 1000))
def test_shift_matrix_reparameterizes(shift, seed):
    n = 10
    c = np.random.default_rng(seed).normal(size=n + 1)
    nu = np.linspace(0.0, 1.0 - shift, 17)
    np.testing.assert_allclose(bernstein(n, nu).T @ (shift_matrix(n, shift) @ c),
                               bernstein(n, nu + shift).T @ c, atol=1e-8)


def test_identical_columns_identical_segments():
    b = build_basis(10, 40)
    cons = build_consensus(b, 6)
    col = np.random.default_rng(2).normal(size=(11, 1))
    seg = cons.Acons_xy.T @ np.hstack([col, col])
    np.testing.assert_array_equal(seg[:, 0], seg[:, 1])
