"""The DSS sequence-mixing module and its differentiable building blocks.

Pipeline of :class:`DssModule` on a ``(..., d, L)`` input::

    layernorm -> expand (d -> h) -> per-channel DSS conv + skip -> GELU
    -> mix (h -> 2h) -> GLU (-> h) -> project (h -> d) -> + input
"""

from __future__ import annotations

import numpy as np

from .autograd import Parameter, Tensor, as_tensor, custom_op, dropout, gelu, glu
from .conv import KernelBank, inverse_spectrum, next_pow2, spectrum
from .errors import DomainError, PreconditionError
from .kernel import (
    DssParams,
    EigenvalueSet,
    InitScheme,
    init_delta,
    init_eigenvalues,
    init_w,
    kernel_from_factors,
    kernel_pullback,
    softmax_factors,
)
from .nn import LayerNorm, Linear, Module

__all__ = ["dss_kernels", "dss_kernel", "causal_conv", "bidirectional_conv", "DssModule", "dss_module_forward"]


def dss_kernels(eig_re: Tensor, eig_im: Tensor, log_delta: Tensor, weights, length: int) -> Tensor:
    """Real parts of the closed-form kernels for each ``(w_re, w_im)`` pair.

    Returns a D x H x L node, D = len(weights).  The softmax factors depend
    only on the shared eigenvalues and deltas, so they are computed once and
    reused by every direction and by the pullback.  Arithmetic is double
    precision; the output takes the dtype of the first ``w_re``.
    """
    weights = [(as_tensor(wr), as_tensor(wi)) for wr, wi in weights]
    lam = eig_re.data.astype(np.float64) + 1j * eig_im.data.astype(np.float64)
    zero = np.flatnonzero(lam == 0)
    if zero.size:
        raise PreconditionError(f"eigenvalue index {zero[0]} is zero")
    delta = np.exp(log_delta.data.astype(np.float64))
    s = softmax_factors(lam, delta, length)
    ws = [wr.data.astype(np.float64) + 1j * wi.data.astype(np.float64) for wr, wi in weights]
    dtype = weights[0][0].dtype
    out = np.stack([kernel_from_factors(s, lam, w).real for w in ws]).astype(dtype)

    def back(g):
        g_lam = np.zeros_like(lam)
        g_delta = np.zeros_like(delta)
        g_ws = []
        for w, gd in zip(ws, g):
            gl, gw, gdl = kernel_pullback(s, lam, delta, w, gd)
            g_lam += gl
            g_delta += gdl
            g_ws += [gw.real.astype(dtype), gw.imag.astype(dtype)]
        return (g_lam.real.astype(dtype), g_lam.imag.astype(dtype), (delta * g_delta).astype(dtype), *g_ws)

    parents = (eig_re, eig_im, log_delta, *(t for pair in weights for t in pair))
    return custom_op(out, parents, back)


def dss_kernel(eig_re: Tensor, eig_im: Tensor, w_re: Tensor, w_im: Tensor, log_delta: Tensor, length: int) -> Tensor:
    """Single-direction H x L kernel node."""
    return dss_kernels(eig_re, eig_im, log_delta, [(w_re, w_im)], length)[0]


def causal_conv(kernel: Tensor, x: Tensor, backend: str = "radix2") -> Tensor:
    """Per-channel causal convolution of ``x`` (..., H, L) with ``kernel`` (H, L).

    The pullback uses the adjoint of convolution, which is correlation: in the
    frequency domain it multiplies by the conjugate spectrum of the other factor.
    """
    return bidirectional_conv(kernel, None, x, backend)


def bidirectional_conv(forward: Tensor, backward: Tensor | None, x: Tensor, backend: str = "radix2") -> Tensor:
    """``conv(forward, x) + flip(conv(backward, flip(x)))`` with shared transforms.

    The anti-causal term is a correlation, y_t = sum_s b[s - t] x_s, whose
    spectrum is X * conj(B); with padding n >= 2L - 1 the negative lags wrap
    into the zero tail, so one inverse transform of X * (K + conj(B)) yields
    both terms.  Kernel gradients are summed over the batch before inverting.
    """
    forward, x = as_tensor(forward), as_tensor(x)
    if forward.shape != x.shape[-2:]:
        raise DomainError(f"kernel {forward.shape} does not match input {x.shape}")
    if backward is not None:
        backward = as_tensor(backward)
        if backward.shape != forward.shape:
            raise DomainError(f"backward kernel {backward.shape} differs from forward {forward.shape}")
    L = x.shape[-1]
    n = next_pow2(2 * L - 1)
    dtype = x.dtype
    fk = spectrum(forward.data, n, backend)
    fb = None if backward is None else spectrum(backward.data, n, backend)
    transfer = fk if fb is None else fk + np.conj(fb)
    fx = spectrum(x.data, n, backend)
    y = inverse_spectrum(fx * transfer, n, backend)[..., :L].astype(dtype, copy=False)

    def back(g):
        fg = spectrum(g, n, backend)
        gk = gb = gx = None
        if forward.requires_grad or (backward is not None and backward.requires_grad):
            cross = (fg * np.conj(fx)).reshape(-1, *fx.shape[-2:]).sum(axis=0)
            corr = inverse_spectrum(cross, n, backend)
            if forward.requires_grad:
                gk = corr[..., :L].astype(dtype, copy=False)
            if backward is not None and backward.requires_grad:
                # conj of the cross spectrum is the time-reversed correlation
                gb = np.concatenate([corr[..., :1], corr[..., : n - L : -1]], axis=-1).astype(dtype, copy=False)
        if x.requires_grad:
            gx = inverse_spectrum(fg * np.conj(transfer), n, backend)[..., :L].astype(dtype, copy=False)
        return (gk, gx) if backward is None else (gk, gb, gx)

    parents = (forward, x) if backward is None else (forward, backward, x)
    return custom_op(y, parents, back)


class DssModule(Module):
    """DSS sequence-mixing module with bidirectional kernels and a residual.

    ``glu_mode="expand"`` sizes the mixing layer h -> 2h so GLU lands back on h;
    ``"square"`` keeps an h x h mixer and lets GLU halve the width instead.
    """

    def __init__(
        self,
        d_model: int,
        n_states: int,
        rng: np.random.Generator,
        init: InitScheme | str = "s4d-lin",
        expansion: int = 2,
        bidirectional: bool = True,
        glu_mode: str = "expand",
        dropout: float = 0.0,
        fft_backend: str = "radix2",
    ):
        if glu_mode not in ("expand", "square"):
            raise DomainError(f"glu_mode must be 'expand' or 'square', got {glu_mode!r}")
        h = expansion * d_model
        if glu_mode == "square" and h % 2:
            raise DomainError("square GLU mode needs an even inner width")
        scheme = init if isinstance(init, InitScheme) else InitScheme(init, int(rng.integers(2**32)))
        eig = init_eigenvalues(scheme, n_states)

        self.norm = LayerNorm(d_model)
        self.expand = Linear(d_model, h, rng)
        self.eig_re = Parameter(eig.re)
        self.eig_im = Parameter(eig.im)
        w_re, w_im = init_w(h, n_states, rng)
        self.w_re = Parameter(w_re)
        self.w_im = Parameter(w_im)
        if bidirectional:
            b_re, b_im = init_w(h, n_states, rng)
            self.w_back_re = Parameter(b_re)
            self.w_back_im = Parameter(b_im)
        self.log_delta = Parameter(init_delta(h, rng))
        self.skip = Parameter(np.ones((h, 1)))
        mix_out = 2 * h if glu_mode == "expand" else h
        self.mix = Linear(h, mix_out, rng)
        self.project = Linear(mix_out // 2, d_model, rng)

        self._bidirectional = bidirectional
        self._dropout = dropout
        self._rng: np.random.Generator | None = None
        self.fft_backend = fft_backend

    @property
    def bidirectional(self) -> bool:
        return self._bidirectional

    @property
    def inner_dim(self) -> int:
        return self.expand.d_out

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        self._rng = rng

    def eigenvalues(self) -> EigenvalueSet:
        return EigenvalueSet(self.eig_re.data.astype(np.float64), self.eig_im.data.astype(np.float64))

    def dss_params(self, length: int, backward: bool = False) -> DssParams:
        if backward and not self._bidirectional:
            raise DomainError("module has no backward kernels")
        w_re, w_im = (self.w_back_re, self.w_back_im) if backward else (self.w_re, self.w_im)
        return DssParams(
            self.eigenvalues(),
            w_re.data.astype(np.float64),
            w_im.data.astype(np.float64),
            self.log_delta.data.astype(np.float64),
            length,
        )

    def kernels(self, length: int) -> tuple[Tensor, Tensor | None]:
        weights = [(self.w_re, self.w_im)]
        if self._bidirectional:
            weights.append((self.w_back_re, self.w_back_im))
        bank = dss_kernels(self.eig_re, self.eig_im, self.log_delta, weights, length)
        return bank[0], (bank[1] if self._bidirectional else None)

    def kernel_bank(self, length: int) -> KernelBank:
        fwd, bwd = self.kernels(length)
        return KernelBank(fwd.data, None if bwd is None else bwd.data)

    def sequence_mix(self, z: Tensor, conv=None) -> Tensor:
        """Bidirectional per-channel convolution plus the skip term."""
        L = z.shape[-1]
        fwd, bwd = self.kernels(L)
        if conv is None:
            return bidirectional_conv(fwd, bwd, z, self.fft_backend) + self.skip * z
        y = conv(fwd, z)
        if bwd is not None:
            y = y + conv(bwd, z.flip(-1)).flip(-1)
        return y + self.skip * z

    def forward(self, x, conv=None) -> Tensor:
        x = as_tensor(x, self.expand.weight.dtype)
        if x.ndim < 2 or x.shape[-2] != self.expand.d_in:
            raise DomainError(f"expected (..., {self.expand.d_in}, L) input, got {x.shape}")
        rng = self._rng if self.training else None
        z = self.expand(self.norm(x))
        z = gelu(self.sequence_mix(z, conv))
        z = dropout(z, self._dropout, rng)
        z = self.project(glu(self.mix(z), axis=-2))
        z = dropout(z, self._dropout, rng)
        return x + z


def dss_module_forward(module: DssModule, x, conv=None) -> np.ndarray:
    """Evaluate a module on a plain array (d x L or batch x d x L)."""
    return module(np.asarray(x), conv=conv).data
