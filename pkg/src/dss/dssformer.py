"""Conformer-style encoder blocks with a swappable sequence-mixing module.

Block order (macaron): 1/2 FFN -> MHSA -> mixing module -> 1/2 FFN -> layernorm.
The mixing module is a DSS module, a depthwise-conv module (the conformer
baseline), or, for ``DSS_REPLACES_MHSA``, attention itself becomes a second
DSS module.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tensor, as_tensor, custom_op, dropout, glu, silu, softmax
from .errors import DomainError
from .kernel import Init, InitScheme
from .layer import DssModule
from .nn import LayerNorm, Linear, Module, uniform_fan_in

__all__ = [
    "Variant",
    "BlockConfig",
    "EncoderConfig",
    "FeedForward",
    "MultiHeadSelfAttention",
    "ConvModule",
    "Block",
    "Encoder",
    "depthwise_conv",
    "sinusoidal_encoding",
    "mhsa_forward",
    "block_forward",
    "encoder_forward",
    "parameter_count",
]


class Variant(str, enum.Enum):
    DSS_MODULE = "dss-module"
    DEPTHWISE_CONV = "depthwise-conv"
    DSS_REPLACES_MHSA = "dss-replaces-mhsa"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(f"unknown variant {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class BlockConfig:
    model_dim: int = 8
    ffn_dim: int = 16
    heads: int = 2
    head_dim: int = 4
    dss_states: int = 4
    variant: Variant = Variant.DSS_MODULE
    dropout: float = 0.0
    init: Init = Init.S4D_LIN
    conv_kernel_size: int = 31
    bidirectional: bool = True
    glu_mode: str = "expand"
    fft_backend: str = "radix2"

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "init", Init.parse(self.init))
        for name in ("model_dim", "ffn_dim", "heads", "head_dim", "dss_states", "conv_kernel_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value}")
        if self.conv_kernel_size % 2 == 0:
            raise DomainError("depthwise kernel size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def attention_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class EncoderConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    n_blocks: int = 1
    input_dim: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_blocks < 0:
            raise DomainError("n_blocks must be non-negative")
        if self.input_dim < 1:
            raise DomainError("input_dim must be positive")


class FeedForward(Module):
    def __init__(self, d: int, ffn_dim: int, rng: np.random.Generator, dropout: float = 0.0):
        self.norm = LayerNorm(d)
        self.up = Linear(d, ffn_dim, rng)
        self.down = Linear(ffn_dim, d, rng)
        self._dropout = dropout
        self._rng = None

    def forward(self, x: Tensor) -> Tensor:
        rng = self._rng if self.training else None
        return self.down(dropout(silu(self.up(self.norm(x))), self._dropout, rng))


class MultiHeadSelfAttention(Module):
    """Pre-layernorm scaled dot-product attention, residual added by the caller.

    Keys carry no bias: a key bias shifts every score of a query equally, so
    softmax ignores it and its gradient is identically zero.
    """

    def __init__(self, d: int, heads: int, head_dim: int, rng: np.random.Generator):
        inner = heads * head_dim
        self.norm = LayerNorm(d)
        self.query = Linear(d, inner, rng)
        self.key = Linear(d, inner, rng, bias=False)
        self.value = Linear(d, inner, rng)
        self.out = Linear(inner, d, rng)
        self._heads = heads
        self._head_dim = head_dim

    def _split(self, t: Tensor) -> Tensor:
        # (..., inner, L) -> (..., heads, L, head_dim)
        lead = t.shape[:-2]
        return t.reshape(*lead, self._heads, self._head_dim, t.shape[-1]).swapaxes(-1, -2)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Attention weights (..., heads, L, L) and the per-head values."""
        z = self.norm(x)
        q = self._split(self.query(z))
        k = self._split(self.key(z))
        v = self._split(self.value(z))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self._head_dim))
        return softmax(scores, axis=-1), v

    def forward(self, x: Tensor) -> Tensor:
        weights, v = self.attention(x)
        ctx = weights @ v  # (..., heads, L, head_dim)
        lead = ctx.shape[:-3]
        L = ctx.shape[-2]
        ctx = ctx.swapaxes(-1, -2).reshape(*lead, self._heads * self._head_dim, L)
        return self.out(ctx)


def depthwise_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Centred ("same") per-channel convolution; ``kernel`` is C x k, k odd."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    C, k = kernel.shape
    if x.shape[-2] != C:
        raise DomainError(f"input has {x.shape[-2]} channels, kernel has {C}")
    L = x.shape[-1]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, widths)
    kd = kernel.data
    y = np.zeros_like(x.data)
    for j in range(k):
        y += kd[:, j : j + 1] * xp[..., j : j + L]

    def back(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for j in range(k):
                gk[:, j] = (g * xp[..., j : j + L]).reshape(-1, C, L).sum(axis=(0, 2))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + L] += kd[:, j : j + 1] * g
            gx = gxp[..., pad : pad + L]
        return gk, gx

    return custom_op(y, (kernel, x), back)


class ConvModule(Module):
    """Conformer convolution module with layernorm in place of batchnorm."""

    def __init__(self, d: int, kernel_size: int, rng: np.random.Generator, dropout: float = 0.0):
        self.norm = LayerNorm(d)
        self.pointwise_in = Linear(d, 2 * d, rng)
        self.depthwise = Parameter(uniform_fan_in(rng, (d, kernel_size), kernel_size))
        self.depthwise_bias = Parameter(np.zeros((d, 1)))
        self.mid_norm = LayerNorm(d)
        self.pointwise_out = Linear(d, d, rng)
        self._dropout = dropout
        self._rng = None

    def forward(self, x: Tensor) -> Tensor:
        rng = self._rng if self.training else None
        z = glu(self.pointwise_in(self.norm(x)), axis=-2)
        z = depthwise_conv(z, self.depthwise) + self.depthwise_bias
        z = self.pointwise_out(silu(self.mid_norm(z)))
        return x + dropout(z, self._dropout, rng)


class Block(Module):
    def __init__(self, config: BlockConfig, rng: np.random.Generator):
        c = config
        d = c.model_dim
        self.config = c
        self.ff1 = FeedForward(d, c.ffn_dim, rng, c.dropout)
        if c.variant is Variant.DSS_REPLACES_MHSA:
            self.attn = None
            self.attn_dss = self._dss(rng)
        else:
            self.attn = MultiHeadSelfAttention(d, c.heads, c.head_dim, rng)
        if c.variant is Variant.DEPTHWISE_CONV:
            self.mixer = ConvModule(d, c.conv_kernel_size, rng, c.dropout)
        else:
            self.mixer = self._dss(rng)
        self.ff2 = FeedForward(d, c.ffn_dim, rng, c.dropout)
        self.final_norm = LayerNorm(d)

    def _dss(self, rng: np.random.Generator) -> DssModule:
        c = self.config
        return DssModule(
            c.model_dim,
            c.dss_states,
            rng,
            init=InitScheme(c.init, int(rng.integers(2**32))),
            bidirectional=c.bidirectional,
            glu_mode=c.glu_mode,
            dropout=c.dropout,
            fft_backend=c.fft_backend,
        )

    def dss_modules(self) -> list[DssModule]:
        mods = []
        if self.attn is None:
            mods.append(self.attn_dss)
        if isinstance(self.mixer, DssModule):
            mods.append(self.mixer)
        return mods

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x, self.final_norm.gamma.dtype)
        if x.ndim < 2 or x.shape[-2] != self.config.model_dim:
            raise DomainError(f"expected (..., {self.config.model_dim}, L) input, got {x.shape}")
        x = x + 0.5 * self.ff1(x)
        if self.attn is None:
            x = self.attn_dss(x)
        else:
            x = x + self.attn(x)
        x = self.mixer(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


def sinusoidal_encoding(d: int, L: int) -> np.ndarray:
    """Absolute sinusoidal positions, channels-first (d x L)."""
    pos = np.arange(L, dtype=np.float64)[None, :]
    i = np.arange(d)[:, None]
    rate = np.power(10000.0, -(2 * (i // 2)) / d)
    angle = pos * rate
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Encoder(Module):
    def __init__(self, config: EncoderConfig):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.input_proj = Linear(config.input_dim, config.block.model_dim, rng)
        self.blocks = [Block(config.block, rng) for _ in range(config.n_blocks)]

    def dss_modules(self) -> list[DssModule]:
        return [m for b in self.blocks for m in b.dss_modules()]

    def embed(self, features) -> Tensor:
        features = as_tensor(features, self.input_proj.weight.dtype)
        if features.ndim < 2 or features.shape[-2] != self.config.input_dim:
            raise DomainError(f"expected (..., {self.config.input_dim}, L) features, got {features.shape}")
        pe = sinusoidal_encoding(self.config.block.model_dim, features.shape[-1]).astype(features.dtype)
        return self.input_proj(features) + pe

    def forward(self, features) -> Tensor:
        x = self.embed(features)
        for block in self.blocks:
            x = block(x)
        return x

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if hasattr(m, "_rng"):
                m._rng = rng


def mhsa_forward(attn: MultiHeadSelfAttention, x) -> np.ndarray:
    """Attention branch plus residual on a plain d x L array."""
    x = as_tensor(x, attn.out.weight.dtype)
    return (x + attn(x)).data


def block_forward(block: Block, x) -> np.ndarray:
    return block(np.asarray(x)).data


def encoder_forward(encoder: Encoder, features) -> np.ndarray:
    return encoder(np.asarray(features)).data


def parameter_count(config: BlockConfig, n_blocks: int = 1, input_dim: int | None = None) -> dict[str, int]:
    """Analytic parameter counts for a stack of identical blocks.

    Returns per-component counts for one block plus ``"block"`` and
    ``"encoder"`` totals (``input_dim=None`` leaves out the input projection).
    """
    d, f, n = config.model_dim, config.ffn_dim, config.dss_states
    a = config.attention_dim
    h = 2 * d
    ln = 2 * d
    ffn = ln + (d * f + f) + (f * d + d)
    mhsa = ln + (d * a + a) + d * a + (d * a + a) + (a * d + d)
    mix_out = 2 * h if config.glu_mode == "expand" else h
    n_w = 2 if config.bidirectional else 1
    dss = ln + (d * h + h) + 2 * n + n_w * 2 * h * n + h + h + (h * mix_out + mix_out) + (mix_out // 2 * d + d)
    k = config.conv_kernel_size
    conv = ln + (d * 2 * d + 2 * d) + d * k + d + 2 * d + (d * d + d)
    counts = {"ffn": ffn, "mhsa": 0, "dss": 0, "conv": 0, "final_norm": ln}
    if config.variant is Variant.DSS_REPLACES_MHSA:
        counts["dss"] = 2 * dss
    else:
        counts["mhsa"] = mhsa
        if config.variant is Variant.DEPTHWISE_CONV:
            counts["conv"] = conv
        else:
            counts["dss"] = dss
    block = 2 * ffn + counts["mhsa"] + counts["dss"] + counts["conv"] + ln
    counts["block"] = block
    counts["encoder"] = n_blocks * block + (0 if input_dim is None else input_dim * d + d)
    return counts
