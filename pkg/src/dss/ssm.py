"""Diagonal continuous/discrete state space systems and the recurrence oracle.

States are complex, inputs and outputs are real: every output takes the real
part of C x_k.  Nothing here uses the softmax closed form, so these routines
serve as the independent check on :mod:`dss.kernel`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PreconditionError

__all__ = [
    "ContinuousSsm",
    "DiscreteSsm",
    "discretize_zoh",
    "simulate_recurrence",
    "impulse_kernel_by_unroll",
]


def _cvec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.complex128))


@dataclass(frozen=True)
class ContinuousSsm:
    """x' = diag(eigenvalues) x + b u,  y = Re(c . x)."""

    eigenvalues: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        lam, b, c = _cvec(self.eigenvalues), _cvec(self.b), _cvec(self.c)
        if lam.ndim != 1 or lam.size < 1:
            raise DomainError("need at least one state")
        if b.shape != lam.shape or c.shape != lam.shape:
            raise DomainError("b and c must have one entry per eigenvalue")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n_states(self) -> int:
        return self.eigenvalues.size


@dataclass(frozen=True)
class DiscreteSsm:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c_bar: np.ndarray
    delta: float = 1.0

    def __post_init__(self) -> None:
        a, b, c = _cvec(self.a_bar), _cvec(self.b_bar), _cvec(self.c_bar)
        if a.ndim != 1 or a.size < 1 or b.shape != a.shape or c.shape != a.shape:
            raise DomainError("a_bar, b_bar, c_bar must be equal-length vectors")
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        object.__setattr__(self, "a_bar", a)
        object.__setattr__(self, "b_bar", b)
        object.__setattr__(self, "c_bar", c)
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def n_states(self) -> int:
        return self.a_bar.size


def discretize_zoh(sys: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Zero-order-hold discretisation of a diagonal system.

    a_bar = exp(lambda * delta), b_bar = (a_bar - 1) / lambda * b, c_bar = c.
    """
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    lam = sys.eigenvalues
    zero = np.flatnonzero(lam == 0)
    if zero.size:
        raise PreconditionError(f"eigenvalue index {zero[0]} is zero; ZOH input map divides by lambda")
    a_bar = np.exp(lam * delta)
    # expm1 keeps b_bar accurate when |lambda * delta| is tiny
    b_bar = np.expm1(lam * delta) / lam * sys.b
    return DiscreteSsm(a_bar, b_bar, sys.c.copy(), delta)


def simulate_recurrence(sys: DiscreteSsm, u) -> np.ndarray:
    """Run x_k = a_bar x_{k-1} + b_bar u_k from x_{-1} = 0; return Re(c_bar . x_k)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise DomainError("input must be a non-empty 1-D sequence")
    x = np.zeros(sys.n_states, dtype=np.complex128)
    y = np.empty(u.size)
    for k, uk in enumerate(u):
        x = sys.a_bar * x + sys.b_bar * uk
        y[k] = np.dot(sys.c_bar, x).real
    return y


def impulse_kernel_by_unroll(sys: DiscreteSsm, L: int) -> np.ndarray:
    """Complex kernel K_k = sum_i c_bar_i a_bar_i^k b_bar_i, k < L.

    Powers are accumulated one multiplication per step.
    """
    if int(L) != L or L < 1:
        raise DomainError(f"kernel length must be a positive integer, got {L}")
    out = np.empty(int(L), dtype=np.complex128)
    power = np.ones(sys.n_states, dtype=np.complex128)
    cb = sys.c_bar * sys.b_bar
    for k in range(int(L)):
        out[k] = np.sum(cb * power)
        power = power * sys.a_bar
    return out
