import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from dss.errors import DomainError, PreconditionError
from dss.ssm import (
    ContinuousSsm,
    DiscreteSsm,
    discretize_zoh,
    impulse_kernel_by_unroll,
    simulate_recurrence,
)


def random_system(rng, n, stable=True):
    re = rng.uniform(-2, -0.1, n) if stable else rng.uniform(-2, 2, n)
    lam = re + 1j * rng.uniform(-20, 20, n)
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    c = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return ContinuousSsm(lam, b, c)


def test_zoh_scalar_example():
    d = discretize_zoh(ContinuousSsm([-1.0], [1.0], [1.0]), math.log(2))
    assert d.a_bar[0] == pytest.approx(0.5, abs=1e-15)
    assert d.b_bar[0] == pytest.approx(0.5, abs=1e-15)
    assert d.c_bar[0] == 1.0


def test_zoh_rejects_zero_eigenvalue_and_bad_delta():
    with pytest.raises(PreconditionError):
        discretize_zoh(ContinuousSsm([0.0, -1.0], [1, 1], [1, 1]), 0.1)
    sys = ContinuousSsm([-1.0], [1.0], [1.0])
    for delta in (0.0, -0.5):
        with pytest.raises(DomainError):
            discretize_zoh(sys, delta)


def test_zoh_matches_series_and_augmented_expm():
    lam, delta = -1 + 2j, 0.01
    d = discretize_zoh(ContinuousSsm([lam], [1.0], [1.0]), delta)
    z = lam * delta
    series_a = sum(z**k / math.factorial(k) for k in range(5))
    series_b = delta * sum(z**k / math.factorial(k + 1) for k in range(5))
    assert abs(d.a_bar[0] - series_a) < 1e-10
    assert abs(d.a_bar[0] - math.exp(-0.01) * complex(math.cos(0.02), math.sin(0.02))) < 1e-15
    assert abs(d.b_bar[0] - series_b) < 1e-11
    # Van Loan block exponential of the real 2x2 form of lambda
    a = np.array([[lam.real, -lam.imag], [lam.imag, lam.real]])
    m = np.zeros((3, 3))
    m[:2, :2] = a
    m[:2, 2] = [1.0, 0.0]
    e = expm(m * delta)
    assert abs(complex(e[0, 0], e[1, 0]) - d.a_bar[0]) < 1e-14
    assert abs(complex(e[0, 2], e[1, 2]) - d.b_bar[0]) < 1e-14


def test_zoh_modulus_invariant():
    rng = np.random.default_rng(3)
    sys = random_system(rng, 6, stable=False)
    d = discretize_zoh(sys, 0.07)
    np.testing.assert_allclose(np.abs(d.a_bar), np.exp(sys.eigenvalues.real * 0.07), rtol=1e-14)


@pytest.mark.parametrize("delta", [1e-3, 1e-4])
def test_discretization_consistency(delta):
    lam = np.array([-0.7 + 3j, -1.5 - 0.4j])
    d1 = discretize_zoh(ContinuousSsm(lam, [1, 1], [1, 1]), delta)
    d2 = discretize_zoh(ContinuousSsm(lam, [1, 1], [1, 1]), delta / 10)
    e1 = np.abs((d1.a_bar - 1) / delta - lam)
    e2 = np.abs((d2.a_bar - 1) / (delta / 10) - lam)
    ratio = e1 / e2
    assert np.all((ratio > 8) & (ratio < 12))


def test_simulate_memoryless_and_geometric():
    y = simulate_recurrence(DiscreteSsm([0.0], [1.0], [1.0]), [3.0, 5.0])
    np.testing.assert_array_equal(y, [3.0, 5.0])
    y = simulate_recurrence(DiscreteSsm([0.5], [1.0], [1.0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(y, [1.0, 0.5, 0.25], rtol=0, atol=1e-15)


def test_simulate_rejects_empty():
    with pytest.raises(DomainError):
        simulate_recurrence(DiscreteSsm([0.5], [1.0], [1.0]), [])


def test_simulate_matches_explicit_sum():
    rng = np.random.default_rng(0)
    d = discretize_zoh(random_system(rng, 4), 0.05)
    u = rng.standard_normal(32)
    y = simulate_recurrence(d, u)
    expected = np.array(
        [
            sum((d.c_bar * d.a_bar**j * d.b_bar).sum() * u[k - j] for j in range(k + 1)).real
            for k in range(32)
        ]
    )
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-12)


def test_impulse_kernel_examples():
    np.testing.assert_allclose(
        impulse_kernel_by_unroll(DiscreteSsm([0.5], [1.0], [1.0]), 3), [1, 0.5, 0.25], atol=1e-15
    )
    rng = np.random.default_rng(1)
    d = discretize_zoh(random_system(rng, 5), 0.02)
    k = impulse_kernel_by_unroll(d, 1)
    assert k.shape == (1,)
    assert abs(k[0] - np.sum(d.c_bar * d.b_bar)) < 1e-15
    with pytest.raises(DomainError):
        impulse_kernel_by_unroll(d, 0)


def test_impulse_identity_length_64():
    rng = np.random.default_rng(2)
    d = discretize_zoh(random_system(rng, 6), 0.03)
    impulse = np.zeros(64)
    impulse[0] = 1.0
    np.testing.assert_allclose(
        simulate_recurrence(d, impulse), impulse_kernel_by_unroll(d, 64).real, rtol=0, atol=1e-12
    )


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 8),
    L=st.integers(1, 128),
    alpha=st.floats(-1, 1),
    beta=st.floats(-1, 1),
)
def test_recurrence_is_linear(seed, n, L, alpha, beta):
    rng = np.random.default_rng(seed)
    d = discretize_zoh(random_system(rng, n), rng.uniform(0.001, 0.1))
    u, v = rng.uniform(-1, 1, (2, L))
    lhs = simulate_recurrence(d, alpha * u + beta * v)
    rhs = alpha * simulate_recurrence(d, u) + beta * simulate_recurrence(d, v)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), L=st.integers(1, 64))
def test_impulse_identity_property(seed, n, L):
    rng = np.random.default_rng(seed)
    d = discretize_zoh(random_system(rng, n), rng.uniform(0.001, 0.1))
    impulse = np.zeros(L)
    impulse[0] = 1.0
    np.testing.assert_allclose(
        simulate_recurrence(d, impulse), impulse_kernel_by_unroll(d, L).real, rtol=0, atol=1e-12
    )
