import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mergelock import oracles
from mergelock.errors import ConvergenceError, NumericError, ShapeError, SingularMatrixError
from mergelock.linalg import Permutation, condition_estimate, hungarian, invert, matmul, polar_orthogonal, svd
from mergelock.rng import Rng

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def matrices(max_rows=12, max_cols=12):
    shape = st.tuples(st.integers(1, max_rows), st.integers(1, max_cols))
    return hnp.arrays(np.float64, shape, elements=finite)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = math.fsum(a[i, t] * b[t, j] for t in range(k))
    return out


def test_matmul_matches_triple_loop():
    rng = Rng(0)
    a = rng.normal(35).reshape(5, 7)
    b = rng.normal(21).reshape(7, 3)
    assert np.allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-13)


def test_matmul_rejects_mismatch_and_nonfinite():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(NumericError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))


@given(matrices())
@settings(max_examples=150, deadline=None)
def test_svd_reconstruction_and_orthogonality(m):
    r = svd(m)
    k = min(m.shape)
    assert r.u.shape == (m.shape[0], k) and r.vt.shape == (k, m.shape[1])
    scale = max(1.0, np.abs(m).max())
    assert np.abs((r.u * r.s) @ r.vt - m).max() <= 1e-10 * scale
    assert np.allclose(r.u.T @ r.u, np.eye(k), atol=1e-10)
    assert np.allclose(r.vt @ r.vt.T, np.eye(k), atol=1e-10)
    assert np.all(np.diff(r.s) <= 0) and np.all(r.s >= 0)


def test_singular_values_match_jacobi_eigen_oracle():
    rng = Rng(1)
    for rows, cols in [(6, 4), (4, 6), (5, 5), (9, 2)]:
        m = rng.normal(rows * cols).reshape(rows, cols)
        s = svd(m).s
        eig = oracles.jacobi_eigenvalues(m.T @ m if cols <= rows else m @ m.T)
        assert np.allclose(np.sort(s), np.sqrt(np.clip(eig, 0, None)), atol=1e-10)


def test_svd_of_zero_and_rank_one():
    r = svd(np.zeros((4, 3)))
    assert np.all(r.s == 0)
    assert np.allclose(r.u.T @ r.u, np.eye(3))
    x = np.outer([1.0, 2.0, 3.0], [4.0, 5.0])
    r = svd(x)
    assert math.isclose(r.s[0], np.linalg.norm(x), rel_tol=1e-14)
    assert r.s[1] <= 1e-14


def test_svd_convergence_failure_reported():
    m = Rng(2).normal(64).reshape(8, 8)
    with pytest.raises(ConvergenceError) as exc:
        svd(m, max_sweeps=1)
    assert exc.value.iterations == 1


def test_polar_factor_is_closest_orthogonal():
    rng = Rng(3)
    m = rng.normal(16).reshape(4, 4)
    r = polar_orthogonal(m)
    assert np.allclose(r.T @ r, np.eye(4), atol=1e-12)
    best = np.trace(r.T @ m)
    for _ in range(200):
        q = polar_orthogonal(rng.normal(16).reshape(4, 4))
        assert np.trace(q.T @ m) <= best + 1e-12


@given(st.integers(1, 12), st.integers(0, 2**32))
@settings(max_examples=60, deadline=None)
def test_invert_round_trip(n, seed):
    m = Rng(seed).normal(n * n).reshape(n, n) + n * np.eye(n)
    inv = invert(m)
    assert np.allclose(m @ inv, np.eye(n), atol=1e-10)
    assert np.allclose(inv @ m, np.eye(n), atol=1e-10)


def test_invert_singular_and_condition_cap():
    with pytest.raises(SingularMatrixError) as exc:
        invert(np.array([[1.0, 2.0], [2.0, 4.0]]))
    assert exc.value.pivot >= 0
    ill = np.diag([1.0, 1e-5])
    assert math.isclose(condition_estimate(ill), 1e5, rel_tol=1e-12)
    with pytest.raises(SingularMatrixError):
        invert(ill, cond_cap=1e3)
    with pytest.raises(ShapeError):
        invert(np.ones((2, 3)))
    assert condition_estimate(np.zeros((2, 2))) == math.inf


def test_hungarian_worked_example():
    res = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert res.perm.map == (1, 0, 2)
    assert res.objective == 5


@given(st.integers(1, 7).flatmap(lambda n: hnp.arrays(np.float64, (n, n), elements=st.integers(-20, 20).map(float))))
@settings(max_examples=200, deadline=None)
def test_hungarian_matches_brute_force(cost):
    _, best = oracles.brute_force_assignment(cost)
    res = hungarian(cost)
    assert res.objective == best
    assert sum(cost[i, j] for i, j in enumerate(res.perm.map)) == best


def test_hungarian_ties_pick_lowest_index():
    assert hungarian(np.zeros((4, 4))).perm.map == (0, 1, 2, 3)


def test_hungarian_matches_scipy_on_larger_problems():
    from scipy.optimize import linear_sum_assignment

    rng = Rng(5)
    for n in (16, 50, 120):
        c = rng.normal(n * n).reshape(n, n)
        rows, cols = linear_sum_assignment(c)
        assert math.isclose(hungarian(c).objective, c[rows, cols].sum(), rel_tol=1e-12)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ShapeError):
        hungarian(np.ones((2, 3)))
    with pytest.raises(NumericError):
        hungarian(np.array([[np.inf, 0], [0, 0]]))


def test_permutation_algebra():
    p = Permutation([2, 0, 1])
    m = p.as_matrix()
    assert m[0, 2] == 1 and m[1, 0] == 1 and m[2, 1] == 1
    assert p.compose(p.inverse()).is_identity()
    assert np.array_equal(p.inverse().as_matrix(), m.T)
    x = np.array([10.0, 20.0, 30.0])
    # x @ P moves entry i to position map[i]
    assert np.array_equal(x @ m, np.array([20.0, 30.0, 10.0]))
    assert np.array_equal(x[p.source_order()], x @ m)
    with pytest.raises(Exception):
        Permutation([0, 0, 1])
