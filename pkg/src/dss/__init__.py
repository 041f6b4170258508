"""Diagonal state space (DSS) sequence layers in NumPy.

The closed-form softmax kernel, FFT convolution, the DSS module and a small
conformer-style encoder, with reverse-mode gradients and toy-task training.
"""

from .dssformer import BlockConfig, Encoder, EncoderConfig, Variant
from .kernel import DssParams, EigenvalueSet, Init, InitScheme, compute_kernel, compute_kernels, init_eigenvalues
from .layer import DssModule

__all__ = [
    "BlockConfig",
    "DssModule",
    "DssParams",
    "EigenvalueSet",
    "Encoder",
    "EncoderConfig",
    "Init",
    "InitScheme",
    "Variant",
    "compute_kernel",
    "compute_kernels",
    "init_eigenvalues",
]

__version__ = "0.1.0"
