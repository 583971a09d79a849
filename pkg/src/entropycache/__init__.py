"""Masked-diffusion LM inference with entropy-triggered KV-cache recomputation."""
from .decoding import DecodeConfig, GenerationResult, run_generation
from .model import KVCacheSet, ModelConfig, full_forward, init_weights, partial_forward
from .policy import BaselinePolicy, EntropyCachePolicy, StaticBlockPolicy, make_policy

__all__ = [
    "BaselinePolicy",
    "DecodeConfig",
    "EntropyCachePolicy",
    "GenerationResult",
    "KVCacheSet",
    "ModelConfig",
    "StaticBlockPolicy",
    "full_forward",
    "init_weights",
    "make_policy",
    "partial_forward",
    "run_generation",
]
