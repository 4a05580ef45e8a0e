"""Fastmax: linear-cost polynomial-kernel attention with custom gradients.

The hot kernels come from a compiled extension when it is built, and from a
NumPy implementation otherwise; see :mod:`fastmax._backend`.
"""
from ._backend import active_name as active_backend, set_backend
from .core import (AttentionConfig, FactorizedTerms, NormalizedPair, apply_dropout,
                   build_terms_causal, build_terms_flat, fastmax_attention, fastmax_forward,
                   fastmax_scores, normalize_qk, poly_kernel, standardize_rows)
from .errors import (ConfigError, DimensionError, FastmaxError, MemoryBudgetError,
                     NumericalInstability, TrainingDiverged)
from .flops import FlopMeter
from .grad import BackwardCache, GradTriple, backward, forward_with_cache, naive_backward
from .oracle import explicit_attention, fastmax_naive, softmax_attention
from .tensor import Rng, mat_random, read_matrix, write_matrix

__all__ = [
    "AttentionConfig", "BackwardCache", "ConfigError", "DimensionError", "FactorizedTerms",
    "FastmaxError", "FlopMeter", "GradTriple", "MemoryBudgetError", "NormalizedPair",
    "NumericalInstability", "Rng", "TrainingDiverged", "active_backend", "apply_dropout",
    "backward", "build_terms_causal", "build_terms_flat", "explicit_attention",
    "fastmax_attention", "fastmax_forward", "fastmax_naive", "fastmax_scores",
    "forward_with_cache", "mat_random", "naive_backward", "normalize_qk", "poly_kernel",
    "read_matrix", "set_backend", "softmax_attention", "standardize_rows", "write_matrix",
]
__version__ = "0.1.0"
