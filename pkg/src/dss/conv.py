"""Long causal convolution: an O(L^2) reference and an O(L log L) FFT path.

All routines broadcast over leading axes; the last axis is time.  The FFT is an
iterative radix-2 decimation-in-time transform with per-size twiddle tables.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

__all__ = [
    "KernelBank",
    "fft",
    "ifft",
    "next_pow2",
    "spectrum",
    "inverse_spectrum",
    "naive_conv",
    "fft_conv",
    "bidirectional_apply",
    "benchmark",
    "BENCH_HEADER",
]

BENCH_HEADER = "method,L,trials,median_ns,p90_ns"


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int) -> tuple[np.ndarray, ...]:
    # One table per stage; stage of butterfly span m uses exp(-2*pi*i*j/m), j < m/2.
    # Every stage table is a strided view of the largest one, so it is computed once.
    base = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    tables = []
    m = 2
    while m <= n:
        t = np.ascontiguousarray(base[:: n // m])
        t.setflags(write=False)
        tables.append(t)
        m <<= 1
    return tuple(tables)


def fft(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis (length must be a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise DomainError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    half = 1
    for tw in _twiddles(n):
        y = y.reshape(*lead, n // (2 * half), 2, half)
        even = y[..., 0, :]
        odd = y[..., 1, :] * tw
        y = np.stack((even + odd, even - odd), axis=-2)
        half *= 2
    return y.reshape(*lead, n)


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft` (conjugation trick, 1/n normalisation)."""
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def _check_pair(kernel: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kernel = np.asarray(kernel, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if kernel.shape[-1] != u.shape[-1]:
        raise DomainError(f"kernel length {kernel.shape[-1]} != input length {u.shape[-1]}")
    if u.shape[-1] < 1:
        raise DomainError("empty sequence")
    return kernel, u


def naive_conv(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Causal truncated convolution y_k = sum_{j<=k} K_j u_{k-j}, by direct summation."""
    kernel, u = _check_pair(kernel, u)
    L = u.shape[-1]
    shape = np.broadcast_shapes(kernel.shape, u.shape)
    kb = np.broadcast_to(kernel, shape).reshape(-1, L)
    ub = np.broadcast_to(u, shape).reshape(-1, L)
    # np.convolve is a direct double loop in C: quadratic, no transforms.
    y = np.stack([np.convolve(kr, ur)[:L] for kr, ur in zip(kb, ub)])
    return y.reshape(shape)


def fft_conv(kernel: np.ndarray, u: np.ndarray, backend: str = "radix2") -> np.ndarray:
    """Same contract as :func:`naive_conv`, computed through zero-padded FFTs.

    Both sequences are padded to the next power of two >= 2L-1 so the circular
    product equals the linear one; the first L outputs are returned.
    ``backend="numpy"`` swaps in pocketfft's real transforms (training fast path).
    """
    if backend == "numpy":
        kernel = np.asarray(kernel)
        u = np.asarray(u)
        if kernel.shape[-1] != u.shape[-1]:
            raise DomainError(f"kernel length {kernel.shape[-1]} != input length {u.shape[-1]}")
        L = u.shape[-1]
        n = next_pow2(2 * L - 1)
        y = np.fft.irfft(np.fft.rfft(kernel, n) * np.fft.rfft(u, n), n)
        return y[..., :L]
    if backend != "radix2":
        raise DomainError(f"unknown FFT backend {backend!r}")
    kernel, u = _check_pair(kernel, u)
    L = u.shape[-1]
    n = next_pow2(2 * L - 1)
    pad_k = np.zeros(kernel.shape[:-1] + (n,))
    pad_k[..., :L] = kernel
    pad_u = np.zeros(u.shape[:-1] + (n,))
    pad_u[..., :L] = u
    y = ifft(fft(pad_k) * fft(pad_u))
    return y.real[..., :L]


def spectrum(x: np.ndarray, n: int, backend: str = "radix2") -> np.ndarray:
    """Transform of ``x`` zero-padded to ``n`` along the last axis.

    The numpy backend returns the half spectrum of a real signal; pair it
    only with :func:`inverse_spectrum` of the same backend.
    """
    if backend == "numpy":
        return np.fft.rfft(x, n)
    if backend != "radix2":
        raise DomainError(f"unknown FFT backend {backend!r}")
    pad = np.zeros(x.shape[:-1] + (n,))
    pad[..., : x.shape[-1]] = x
    return fft(pad)


def inverse_spectrum(spec: np.ndarray, n: int, backend: str = "radix2") -> np.ndarray:
    """Real signal of length ``n`` whose :func:`spectrum` is ``spec``."""
    if backend == "numpy":
        return np.fft.irfft(spec, n)
    return ifft(spec).real


@dataclass(frozen=True)
class KernelBank:
    """Per-channel real kernels, H x L, with an optional time-reversed partner."""

    forward: np.ndarray
    backward: np.ndarray | None = None

    def __post_init__(self) -> None:
        fwd = np.asarray(self.forward, dtype=np.float64)
        if fwd.ndim != 2:
            raise DomainError("kernel bank must be H x L")
        if not np.all(np.isfinite(fwd)):
            raise DomainError("kernel bank has non-finite entries")
        object.__setattr__(self, "forward", fwd)
        if self.backward is not None:
            bwd = np.asarray(self.backward, dtype=np.float64)
            if bwd.shape != fwd.shape:
                raise DomainError(f"backward kernels {bwd.shape} != forward {fwd.shape}")
            if not np.all(np.isfinite(bwd)):
                raise DomainError("kernel bank has non-finite entries")
            object.__setattr__(self, "backward", bwd)

    @property
    def channels(self) -> int:
        return self.forward.shape[0]

    @property
    def length(self) -> int:
        return self.forward.shape[1]


def bidirectional_apply(bank: KernelBank, x: np.ndarray, conv=fft_conv) -> np.ndarray:
    """y_h = K_h * x_h + rev(K'_h * rev(x_h)); the second term only if K' exists."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != bank.forward.shape:
        raise DomainError(f"input {x.shape[-2:]} does not match kernel bank {bank.forward.shape}")
    y = conv(bank.forward, x)
    if bank.backward is not None:
        y = y + conv(bank.backward, x[..., ::-1])[..., ::-1]
    return y


def benchmark(lengths, trials: int = 20, seed: int = 0, methods=("naive", "fft")) -> list[dict]:
    """Median and p90 wall time of each convolution method per length.

    Returns rows matching :data:`BENCH_HEADER`.  Inputs are uniform in [-1, 1].
    """
    fns = {"naive": naive_conv, "fft": fft_conv}
    rng = np.random.default_rng(seed)
    rows = []
    for method in methods:
        fn = fns[method]
        for L in lengths:
            k = rng.uniform(-1, 1, L)
            u = rng.uniform(-1, 1, L)
            fn(k, u)  # warm caches (twiddles, allocator)
            times = []
            for _ in range(trials):
                t0 = time.perf_counter_ns()
                fn(k, u)
                times.append(time.perf_counter_ns() - t0)
            rows.append(
                {
                    "method": method,
                    "L": int(L),
                    "trials": int(trials),
                    "median_ns": int(np.median(times)),
                    "p90_ns": int(np.percentile(times, 90)),
                }
            )
    return rows
