"""Span-level hidden-state cutting for transformer fine-tuning, at desk scale."""
from .cut import Batch, CutConfig, augmented_forward
from .encoder import ModelConfig, encode, init_params
from .numerics.kernels import BACKEND as KERNEL_BACKEND
from .spans import SpanMask, apply_cut, candidate_set, select_start, span_length
from .strategies import StrategyKind

__version__ = "0.1.0"

__all__ = [
    "Batch", "CutConfig", "KERNEL_BACKEND", "ModelConfig", "SpanMask", "StrategyKind",
    "apply_cut", "augmented_forward", "candidate_set", "encode", "init_params",
    "select_start", "span_length",
]
