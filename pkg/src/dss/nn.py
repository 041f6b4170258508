"""Parameter containers and the pointwise layers shared by every block.

Activations are channels-first: ``(..., C, L)``.  A pointwise layer is a
matrix acting on the channel axis, i.e. a 1x1 convolution over time.
"""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .autograd import Parameter, Tensor, as_tensor, layer_norm

__all__ = ["Module", "Linear", "LayerNorm", "uniform_fan_in"]


class Module:
    """Walks attributes to find parameters, in definition order."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError(f"state mismatch: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype).reshape(p.data.shape)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    """Pointwise map ``W @ x + b`` over the channel axis; W is out x in."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, (d_out, d_in), d_in))
        self.bias = Parameter(np.zeros((d_out, 1))) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        y = self.weight @ as_tensor(x, self.weight.dtype)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones((dim, 1)))
        self.beta = Parameter(np.zeros((dim, 1)))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(as_tensor(x, self.gamma.dtype), self.gamma, self.beta, axis=-2, eps=self._eps)
