"""Closed-form DSS convolution kernels and eigenvalue/parameter initialisers.

For eigenvalues lambda_i, complex weights w and a sampling interval delta the
length-L kernel is

    K_k = sum_i (w_i / lambda_i) * softmax_k(lambda_i * k * delta)

where the softmax runs along k for each i.  Callers convolve with Re(K).
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, PreconditionError, SingularRowError

__all__ = [
    "EigenvalueSet",
    "DssParams",
    "Init",
    "InitScheme",
    "row_softmax",
    "compute_kernel",
    "compute_kernels",
    "kernel_vjp",
    "softmax_factors",
    "kernel_from_factors",
    "kernel_pullback",
    "init_eigenvalues",
    "hippo_matrix",
    "init_delta",
    "init_w",
    "write_kernel_csv",
    "read_kernel_csv",
    "LOG_DELTA_MIN",
    "LOG_DELTA_MAX",
]

LOG_DELTA_MIN = math.log(0.001)
LOG_DELTA_MAX = math.log(0.1)

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class EigenvalueSet:
    """Diagonal of the state matrix, stored as separate real/imaginary vectors."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self) -> None:
        re = np.atleast_1d(np.asarray(self.re, dtype=np.float64))
        im = np.atleast_1d(np.asarray(self.im, dtype=np.float64))
        if re.ndim != 1 or re.shape != im.shape or re.size < 1:
            raise DomainError("eigenvalue re/im must be equal-length non-empty vectors")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise DomainError("eigenvalues must be finite")
        zero = np.flatnonzero((re == 0) & (im == 0))
        if zero.size:
            raise PreconditionError(f"eigenvalue index {zero[0]} is zero")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, lam) -> "EigenvalueSet":
        lam = np.atleast_1d(np.asarray(lam, dtype=np.complex128))
        return cls(lam.real.copy(), lam.imag.copy())

    @property
    def values(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self) -> int:
        return self.re.size


@dataclass(frozen=True)
class DssParams:
    """Trainables of one DSS kernel bank: shared eigenvalues, per-channel w and delta."""

    eigenvalues: EigenvalueSet
    w_re: np.ndarray
    w_im: np.ndarray
    log_delta: np.ndarray
    kernel_length: int

    def __post_init__(self) -> None:
        n = len(self.eigenvalues)
        w_re = np.atleast_2d(np.asarray(self.w_re, dtype=np.float64))
        w_im = np.atleast_2d(np.asarray(self.w_im, dtype=np.float64))
        log_delta = np.atleast_1d(np.asarray(self.log_delta, dtype=np.float64))
        if w_re.shape != w_im.shape or w_re.shape[1] != n:
            raise DomainError(f"w must be H x {n}, got {w_re.shape} / {w_im.shape}")
        if log_delta.shape != (w_re.shape[0],):
            raise DomainError(f"log_delta must have one entry per channel ({w_re.shape[0]})")
        if int(self.kernel_length) != self.kernel_length or self.kernel_length < 1:
            raise DomainError(f"kernel length must be a positive integer, got {self.kernel_length}")
        object.__setattr__(self, "w_re", w_re)
        object.__setattr__(self, "w_im", w_im)
        object.__setattr__(self, "log_delta", log_delta)
        object.__setattr__(self, "kernel_length", int(self.kernel_length))

    @property
    def channels(self) -> int:
        return self.w_re.shape[0]

    @property
    def n_states(self) -> int:
        return len(self.eigenvalues)

    @property
    def w(self) -> np.ndarray:
        return self.w_re + 1j * self.w_im

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)


class Init(str, enum.Enum):
    HIPPO = "hippo"
    EXP_RANDOM = "exp-random"
    S4D_INV = "s4d-inv"
    S4D_LIN = "s4d-lin"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value) -> "Init":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(f"unknown init scheme {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class InitScheme:
    tag: Init
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", Init.parse(self.tag))


def row_softmax(p) -> np.ndarray:
    """Softmax along the last axis of a complex array.

    Each row is shifted by its largest real part before exponentiation.  A row
    whose denominator cancels to rounding level (|sum| <= L * eps * sum|terms|,
    or below 1e-300) is the excluded exp(L*lambda*delta) == 1 case and raises
    :class:`SingularRowError` carrying the row index.
    """
    p = np.asarray(p, dtype=np.complex128)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise DomainError("row_softmax needs at least one column")
    shift = p.real.max(axis=-1, keepdims=True)
    e = np.exp(p - shift)
    denom = e.sum(axis=-1, keepdims=True)
    scale = np.abs(e).sum(axis=-1, keepdims=True)
    mag = np.abs(denom)
    bad = (mag < 1e-300) | (mag <= p.shape[-1] * _EPS * scale) | ~np.isfinite(mag)
    if bad.any():
        where = np.argwhere(bad[..., 0])[0]
        raise SingularRowError(int(where[-1]) if where.size else 0)
    return e / denom


def softmax_factors(lam, delta, length: int) -> np.ndarray:
    """row_softmax(P) for every channel: P[h, i, k] = lambda_i * k * delta_h.

    Shape H x N x L.  A singular row re-raises with its eigenvalue attached.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=np.complex128))
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    k = np.arange(length)
    p = lam[None, :, None] * (delta[:, None, None] * k[None, None, :])
    try:
        return row_softmax(p)
    except SingularRowError as err:
        raise SingularRowError(err.index, complex(lam[err.index])) from None


def kernel_from_factors(s: np.ndarray, lam: np.ndarray, w: np.ndarray) -> np.ndarray:
    """K[h, k] = sum_i w[h, i] / lambda_i * s[h, i, k]."""
    return np.einsum("hi,hik->hk", w / lam[None, :], s)


def kernel_pullback(s, lam, delta, w, grad_re) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_re * Re K) for lambda (N,), w (H x N) and delta (H,).

    Complex gradients follow the conjugate convention dL/dx + i dL/dy, so the
    real and imaginary parts are the gradients of the two real parameters.
    """
    H, _, L = s.shape
    k = np.arange(L, dtype=np.float64)
    g = np.asarray(grad_re, dtype=np.float64).reshape(H, L)
    gs = np.einsum("hk,hik->hi", g, s)  # sum_k G_hk S_hik
    gks = np.einsum("hk,hik->hi", g * k, s)  # sum_k G_hk k S_hik
    centred = gks - (s @ k) * gs  # sum_k G_hk (k - m_hi) S_hik, m = softmax-mean position
    # dK/dw = S / lambda
    gw = np.conj(gs / lam[None, :])
    # dK/dlambda = w S (-1/lambda^2 + delta (k - m) / lambda)
    glam = np.conj((w * (-gs / lam**2 + delta[:, None] * centred / lam)).sum(axis=0))
    # dK/ddelta = sum_i w S (k - m)
    gdelta = (w * centred).sum(axis=1).real
    return glam, gw, gdelta


def compute_kernels(params: DssParams) -> np.ndarray:
    """All H complex kernels, shape H x L."""
    lam = params.eigenvalues.values
    s = softmax_factors(lam, params.delta, params.kernel_length)
    return kernel_from_factors(s, lam, params.w)


def compute_kernel(params: DssParams, channel: int) -> np.ndarray:
    """Complex kernel of one channel, length L."""
    if not 0 <= channel < params.channels:
        raise DomainError(f"channel {channel} out of range for {params.channels} channels")
    lam = params.eigenvalues.values
    s = softmax_factors(lam, params.delta[channel], params.kernel_length)
    return kernel_from_factors(s, lam, params.w[channel : channel + 1])[0]


def kernel_vjp(params: DssParams, grad_re: np.ndarray) -> tuple[np.ndarray, dict]:
    """Kernels Re(K) and the pullback of an upstream gradient on them.

    ``grad_re`` is dLoss/dRe(K), shape H x L.  Returns ``(Re(K), grads)`` with
    grads keyed ``eig_re, eig_im, w_re, w_im, log_delta``.
    """
    lam = params.eigenvalues.values
    delta = params.delta
    s = softmax_factors(lam, delta, params.kernel_length)
    kern = kernel_from_factors(s, lam, params.w)
    glam, gw, gdelta = kernel_pullback(s, lam, delta, params.w, grad_re)
    grads = {
        "eig_re": glam.real,
        "eig_im": glam.imag,
        "w_re": gw.real,
        "w_im": gw.imag,
        "log_delta": delta * gdelta,
    }
    return kern.real, grads


def hippo_matrix(n_states: int, printed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """The 2N x 2N HiPPO-style matrix and its top-N eigenvalues by imaginary part.

    Off-diagonal magnitude is 2 sqrt(2i+1) sqrt(2j+1) (0-based), antisymmetric,
    with -1/2 on the diagonal; its spectrum is computed from the Hermitian
    matrix i*S and shifted.  ``printed=True`` uses the factor sqrt(i+1) for the
    row index instead, which breaks antisymmetry and needs a general eigensolve.
    """
    if int(n_states) != n_states or n_states < 1:
        raise DomainError(f"n_states must be a positive integer, got {n_states}")
    m = 2 * int(n_states)
    idx = np.arange(m, dtype=np.float64)
    i, j = np.meshgrid(idx, idx, indexing="ij")
    if printed:
        mag = 2.0 * np.sqrt(i + 1) * np.sqrt(2 * j + 1)
    else:
        mag = 2.0 * np.sqrt(2 * i + 1) * np.sqrt(2 * j + 1)
    skew = np.where(i < j, mag, np.where(i > j, -mag, 0.0))
    a = skew - 0.5 * np.eye(m)
    try:
        if printed:
            lam = np.linalg.eigvals(a)
        else:
            mu = np.linalg.eigvalsh(1j * skew)
            # i*S v = mu v  =>  S v = -i mu v
            lam = -0.5 - 1j * mu
    except np.linalg.LinAlgError as err:
        raise NumericError(f"HiPPO eigensolve failed: {err}") from err
    pos = np.flatnonzero(lam.imag > 0)
    if pos.size < n_states:
        raise NumericError(f"only {pos.size} eigenvalues with positive imaginary part, need {n_states}")
    order = pos[np.argsort(-lam.imag[pos], kind="stable")]
    top = lam[order[: int(n_states)]]
    if not printed:
        top = -0.5 + 1j * top.imag
    return a, top


def init_eigenvalues(scheme: InitScheme | Init | str, n_states: int) -> EigenvalueSet:
    if not isinstance(scheme, InitScheme):
        scheme = InitScheme(scheme)
    if int(n_states) != n_states or n_states < 1:
        raise DomainError(f"n_states must be a positive integer, got {n_states}")
    N = int(n_states)
    n = np.arange(N, dtype=np.float64)
    tag = scheme.tag
    if tag is Init.HIPPO:
        return EigenvalueSet.from_complex(hippo_matrix(N)[1])
    if tag is Init.EXP_RANDOM:
        rng = np.random.default_rng(scheme.seed)
        a = rng.uniform(-1.0, 1.0, N)
        b = rng.uniform(-1.0, 1.0, N)
        return EigenvalueSet(-np.exp(a), np.exp(b))
    if tag is Init.S4D_INV:
        return EigenvalueSet(np.full(N, -0.5), N / np.pi * (N / (2 * n + 1) - 1))
    if tag is Init.S4D_LIN:
        return EigenvalueSet(np.full(N, -0.5), np.pi * n)
    return EigenvalueSet(np.full(N, -1.0), n.copy())


def init_delta(n_channels: int, seed) -> np.ndarray:
    """log(delta) ~ U[log 0.001, log 0.1], one per channel."""
    if n_channels < 1:
        raise DomainError("need at least one channel")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(LOG_DELTA_MIN, LOG_DELTA_MAX, int(n_channels))


def init_w(n_channels: int, n_states: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of w, each H x N standard normal."""
    if n_channels < 1 or n_states < 1:
        raise DomainError("need at least one channel and one state")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (int(n_channels), int(n_states))
    return rng.standard_normal(shape), rng.standard_normal(shape)


def write_kernel_csv(fh, kernels) -> None:
    """Write ``channel,k,re,im`` rows with 17 significant digits."""
    kernels = np.atleast_2d(np.asarray(kernels, dtype=np.complex128))
    fh.write("channel,k,re,im\n")
    for h, row in enumerate(kernels):
        for k, v in enumerate(row):
            fh.write(f"{h},{k},{v.real:.17g},{v.imag:.17g}\n")


def read_kernel_csv(fh) -> np.ndarray:
    """Inverse of :func:`write_kernel_csv`; returns an H x L complex array."""
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    reader = csv.DictReader(fh)
    if reader.fieldnames != ["channel", "k", "re", "im"]:
        raise DomainError(f"unexpected kernel CSV header {reader.fieldnames}")
    entries = {}
    for row in reader:
        entries[int(row["channel"]), int(row["k"])] = complex(float(row["re"]), float(row["im"]))
    if not entries:
        raise DomainError("empty kernel CSV")
    H = 1 + max(h for h, _ in entries)
    L = 1 + max(k for _, k in entries)
    out = np.zeros((H, L), dtype=np.complex128)
    for (h, k), v in entries.items():
        out[h, k] = v
    return out
