import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergelock.errors import ParameterError
from mergelock.rng import Rng, sample_diagonal, sample_gaussian, sample_permutation, splitmix64


def test_splitmix64_reference_vector():
    # published first outputs of splitmix64 from state 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_xorshift_step_matches_hand_computation():
    rng = Rng(5)
    x = splitmix64(5)
    mask = (1 << 64) - 1
    x ^= x >> 12
    x ^= (x << 25) & mask
    x ^= x >> 27
    assert rng.next_u64() == (x * 0x2545F4914F6CDD1D) & mask


def test_same_seed_same_stream_and_bulk_equals_scalar():
    a, b = Rng(42), Rng(42)
    assert a.u64(50) == [b.next_u64() for _ in range(50)]
    assert not np.array_equal(Rng(1).normal(10), Rng(2).normal(10))


def test_uniform_range_and_moments():
    u = Rng(3).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_moments():
    z = Rng(4).normal(200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.015


def test_odd_normal_request_is_prefix_of_even():
    assert np.array_equal(Rng(9).normal(7), Rng(9).normal(8)[:7])


@given(st.integers(0, 2**64 - 1), st.integers(1, 10_000))
def test_below_is_in_range(seed, n):
    assert 0 <= Rng(seed).below(n) < n


@given(st.integers(0, 2**32), st.integers(1, 40))
@settings(max_examples=50)
def test_permutation_is_bijection(seed, n):
    p = sample_permutation(n, Rng(seed))
    assert sorted(p.map) == list(range(n))


def test_permutation_uniform_chi_square():
    rng = Rng(17)
    counts = {}
    draws = 6000
    for _ in range(draws):
        m = sample_permutation(3, rng).map
        counts[m] = counts.get(m, 0) + 1
    assert len(counts) == 6
    expected = draws / 6
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 20.5  # p ~ 0.001 at 5 dof


def test_diagonal_bounds_and_errors():
    d = np.diag(sample_diagonal(100, 0.5, 2.0, Rng(0)))
    assert d.min() >= 0.5 and d.max() <= 2.0
    with pytest.raises(ParameterError):
        sample_diagonal(3, 0.0, 1.0, Rng(0))
    with pytest.raises(ParameterError):
        sample_diagonal(3, 2.0, 1.0, Rng(0))


def test_gaussian_shape_and_validation():
    assert sample_gaussian(3, 4, 0.5, Rng(0)).shape == (3, 4)
    with pytest.raises(ParameterError):
        sample_gaussian(2, 2, 0.0, Rng(0))
    with pytest.raises(ParameterError):
        Rng(1.5)


def test_spawn_is_deterministic_and_independent():
    a, b = Rng(8), Rng(8)
    ca, cb = a.spawn(), b.spawn()
    assert ca.u64(5) == cb.u64(5)
    assert a.next_u64() == b.next_u64()
