"""Toy bidirectional transformer with full and partial forward passes.

Blocks are pre-norm: RMSNorm -> RoPE multi-head attention -> residual, then
RMSNorm -> gated (SiLU) FFN -> residual. Attention is non-causal.

A partial pass embeds and propagates only the rows of the recompute set. At
every layer those rows get fresh Q/K/V, their K/V are written into the cache,
and their queries attend over all ``L_total`` cached keys. Rows outside the
set are read from the cache and never written.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ColdCache,
    ConfigTooLarge,
    OutputsNotRecomputed,
    TokenOutOfRange,
)
from .mathcore import F32, OpCounter, matmul, rms_norm, rotary_rotate, silu, softmax_row

MAX_SEQ_LEN_CAP = 8192


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 320
    ffn_mult: int = 4
    max_seq_len: int = 1024
    mask_token_id: int = 256
    rng_seed: int = 0
    # Multiplier on the LM-head output. Random weights give near-uniform
    # predictions at 1.0; larger values sharpen them.
    logit_scale: float = 1.0

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.head_dim, self.ffn_mult) < 1:
            raise ValueError("layers, heads, head_dim and ffn_mult must be >= 1")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ValueError("mask_token_id must be < vocab_size")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden_dim


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    FIELDS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in the fixed serialization order."""
        out = [("embed", self.embed)]
        for i, lw in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", getattr(lw, name)) for name in LayerWeights.FIELDS)
        out.append(("final_norm", self.final_norm))
        out.append(("lm_head", self.lm_head))
        return out


def tensor_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every tensor, in serialization order."""
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    layer = {
        "attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ffn_norm": (d,), "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
    }
    shapes = [("embed", (v, d))]
    for i in range(config.num_layers):
        shapes.extend((f"layers.{i}.{n}", layer[n]) for n in LayerWeights.FIELDS)
    shapes.append(("final_norm", (d,)))
    shapes.append(("lm_head", (d, v)))
    return shapes


def weights_from_tensors(config: ModelConfig, tensors: list[np.ndarray]) -> ModelWeights:
    it = iter(tensors)
    embed = next(it)
    layers = [LayerWeights(*(next(it) for _ in LayerWeights.FIELDS)) for _ in range(config.num_layers)]
    final_norm = next(it)
    lm_head = next(it)
    return ModelWeights(config, embed, layers, final_norm, lm_head)


def init_weights(config: ModelConfig) -> ModelWeights:
    """Deterministic Gaussian init scaled by ``1/sqrt(fan_in)``.

    Norm gains are ones. The embedding table is a lookup (one active input per
    row), so its fan-in is 1.
    """
    if config.max_seq_len > MAX_SEQ_LEN_CAP:
        raise ConfigTooLarge(f"max_seq_len {config.max_seq_len} exceeds cap {MAX_SEQ_LEN_CAP}")
    rng = np.random.default_rng(config.rng_seed)
    tensors = []
    for name, shape in tensor_shapes(config):
        if name.endswith("norm"):
            tensors.append(np.ones(shape, dtype=F32))
            continue
        fan_in = 1 if name == "embed" else shape[0]
        w = rng.standard_normal(shape, dtype=F32) * F32(1.0 / np.sqrt(fan_in))
        tensors.append(w.astype(F32))
    return weights_from_tensors(config, tensors)


@dataclass
class KVCacheSet:
    """Per-layer post-RoPE keys and values for every canvas position.

    ``stamp[i]`` is the step at which row ``i`` was last recomputed (-1 if
    never).
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    stamp: np.ndarray
    populated: bool = False

    @classmethod
    def empty(cls, config: ModelConfig, l_total: int) -> "KVCacheSet":
        d = config.hidden_dim
        return cls(
            keys=[np.zeros((l_total, d), dtype=F32) for _ in range(config.num_layers)],
            values=[np.zeros((l_total, d), dtype=F32) for _ in range(config.num_layers)],
            stamp=np.full(l_total, -1, dtype=np.int64),
        )

    @property
    def l_total(self) -> int:
        return self.stamp.shape[0]

    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))

    def row_digest(self, rows) -> bytes:
        """Raw bytes of K/V at ``rows`` across layers, for freeze checks."""
        idx = np.asarray(sorted(rows), dtype=np.int64)
        parts = []
        for k, v in zip(self.keys, self.values):
            parts.append(k[idx].tobytes())
            parts.append(v[idx].tobytes())
        return b"".join(parts)


@dataclass
class ForwardOutput:
    logits: np.ndarray
    last_layer_values: np.ndarray
    flops: int
    phase_times: dict[str, float] = field(default_factory=dict)
    output_positions: np.ndarray | None = None


def forward_macs(config: ModelConfig, n_rows: int, l_total: int, n_out: int) -> int:
    """Closed-form multiply-add count of one forward over ``n_rows`` recomputed rows."""
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    per_layer = (
        3 * n_rows * d * d        # Q, K, V projections
        + 2 * n_rows * l_total * d  # scores and weighted values, summed over heads
        + n_rows * d * d          # output projection
        + 3 * n_rows * d * f      # gate, up, down
    )
    return config.num_layers * per_layer + n_out * d * v


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D id vector")
    if tokens.shape[0] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[0]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenOutOfRange(f"token ids must lie in [0, {config.vocab_size})")


def _forward_rows(
    weights: ModelWeights,
    tokens: np.ndarray,
    cache: KVCacheSet,
    rows: np.ndarray,
    output_positions: np.ndarray,
    step: int,
) -> ForwardOutput:
    cfg = weights.config
    n = rows.shape[0]
    nh, hd, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim
    counter = OpCounter()
    times = {"attention": 0.0, "ffn": 0.0, "cache_update": 0.0, "other": 0.0}
    scale = F32(1.0 / np.sqrt(hd))

    t0 = time.perf_counter()
    h = weights.embed[tokens[rows]].astype(F32)
    times["other"] += time.perf_counter() - t0

    for li, lw in enumerate(weights.layers):
        t0 = time.perf_counter()
        x = rms_norm(h, lw.attn_norm)
        q = matmul(x, lw.wq, counter)
        k = matmul(x, lw.wk, counter)
        v = matmul(x, lw.wv, counter)
        q = rotary_rotate(q.reshape(n, nh, hd), rows).reshape(n, d)
        k = rotary_rotate(k.reshape(n, nh, hd), rows).reshape(n, d)
        t1 = time.perf_counter()
        cache.keys[li][rows] = k
        cache.values[li][rows] = v
        t2 = time.perf_counter()
        kh = cache.keys[li].reshape(-1, nh, hd).transpose(1, 2, 0)  # (H, hd, L)
        vh = cache.values[li].reshape(-1, nh, hd).transpose(1, 0, 2)  # (H, L, hd)
        qh = q.reshape(n, nh, hd).transpose(1, 0, 2)  # (H, n, hd)
        scores = matmul(qh, kh, counter) * scale
        attn = matmul(softmax_row(scores), vh, counter)  # (H, n, hd)
        attn = attn.transpose(1, 0, 2).reshape(n, d)
        h = h + matmul(attn, lw.wo, counter)
        t3 = time.perf_counter()
        x = rms_norm(h, lw.ffn_norm)
        gated = silu(matmul(x, lw.w_gate, counter)) * matmul(x, lw.w_up, counter)
        h = h + matmul(gated, lw.w_down, counter)
        t4 = time.perf_counter()
        times["attention"] += (t1 - t0) + (t3 - t2)
        times["cache_update"] += t2 - t1
        times["ffn"] += t4 - t3

    t0 = time.perf_counter()
    cache.stamp[rows] = step
    cache.populated = True
    out_idx = np.searchsorted(rows, output_positions)
    hf = rms_norm(h[out_idx], weights.final_norm)
    logits = matmul(hf, weights.lm_head, counter)
    if cfg.logit_scale != 1.0:
        logits = logits * F32(cfg.logit_scale)
    values = cache.values[-1].copy()
    times["other"] += time.perf_counter() - t0
    return ForwardOutput(
        logits=logits,
        last_layer_values=values,
        flops=counter.macs,
        phase_times=times,
        output_positions=output_positions,
    )


def _as_index(positions, l_total: int) -> np.ndarray:
    idx = np.unique(np.asarray(list(positions) if not isinstance(positions, np.ndarray) else positions,
                               dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= l_total):
        raise IndexError(f"positions must lie in [0, {l_total})")
    return idx


def full_forward(weights: ModelWeights, tokens, cache: KVCacheSet, output_positions, step: int = 0) -> ForwardOutput:
    """Recompute every position at every layer and refresh the whole cache."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(weights.config, tokens)
    if tokens.shape[0] != cache.l_total:
        raise ValueError("tokens length must equal the cache length")
    rows = np.arange(cache.l_total, dtype=np.int64)
    out = _as_index(output_positions, cache.l_total)
    return _forward_rows(weights, tokens, cache, rows, out, step)


def partial_forward(
    weights: ModelWeights,
    tokens,
    cache: KVCacheSet,
    recompute_set,
    output_positions,
    step: int = 0,
) -> ForwardOutput:
    """Recompute only ``recompute_set``; all other K/V come from the cache.

    Logits are only meaningful at recomputed rows, so ``output_positions``
    must be a subset of ``recompute_set``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(weights.config, tokens)
    if tokens.shape[0] != cache.l_total:
        raise ValueError("tokens length must equal the cache length")
    if not cache.populated:
        raise ColdCache("partial forward requires a cache filled by a full pass")
    rows = _as_index(recompute_set, cache.l_total)
    out = _as_index(output_positions, cache.l_total)
    if not np.all(np.isin(out, rows)) or (out.size and not rows.size):
        raise OutputsNotRecomputed("output positions must be inside the recompute set")
    return _forward_rows(weights, tokens, cache, rows, out, step)
