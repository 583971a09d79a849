"""Sliding-window, confidence-thresholded denoising loop.

Each step runs one forward pass (full or partial, as the policy planned),
unmasks every window position whose argmax probability clears the threshold
(or the single most confident one if none does), then asks the policy for the
next plan.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GenerationComplete
from .mathcore import OpCounter, softmax_row
from .metrics import StepRecord, cache_bytes, drift_stats, recompute_ratio
from .model import KVCacheSet, ModelWeights, full_forward, partial_forward
from .policy import CachePolicy, Mode, StepPlan

# Byte-level tokenizer: ids 0..255 are raw bytes, specials follow.
MASK_ID = 256
EOS_ID = 257
PAD_ID = 258
MIN_VOCAB = 259


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


def parse_token_list(spec: str) -> list[int]:
    return [int(tok) for tok in spec.replace(" ", "").split(",") if tok]


@dataclass(frozen=True)
class DecodeConfig:
    window_size: int = 32
    confidence_threshold: float = 0.9
    gen_length: int = 64
    eos_token_id: int | None = None
    eos_stop: bool = False

    def __post_init__(self):
        if self.gen_length < 1:
            raise ValueError("gen_length must be >= 1")
        if not 1 <= self.window_size <= self.gen_length:
            raise ValueError("window_size must lie in [1, gen_length]")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1]")


@dataclass
class SequenceState:
    tokens: np.ndarray
    prompt_len: int
    masked: np.ndarray
    step: int = 1

    @classmethod
    def start(cls, prompt, gen_length: int, mask_id: int) -> "SequenceState":
        prompt = np.asarray(prompt, dtype=np.int64)
        tokens = np.concatenate([prompt, np.full(gen_length, mask_id, dtype=np.int64)])
        masked = np.zeros(tokens.shape[0], dtype=bool)
        masked[prompt.shape[0]:] = True
        return cls(tokens, int(prompt.shape[0]), masked)

    @property
    def mask_set(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def l_total(self) -> int:
        return self.tokens.shape[0]

    def apply(self, positions, ids) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        if np.any(~self.masked[positions]):
            raise ValueError("cannot decode a position that is not masked")
        self.tokens[positions] = ids
        self.masked[positions] = False


def active_window(state: SequenceState, config: DecodeConfig) -> np.ndarray:
    """The ``window_size`` leftmost positions still masked."""
    masks = state.mask_set
    if masks.size == 0:
        raise GenerationComplete("no masked positions remain")
    return masks[: config.window_size]


@dataclass
class DecodeResult:
    tokens: np.ndarray
    decoded: np.ndarray
    decoded_ids: np.ndarray
    probs: np.ndarray
    confidences: np.ndarray
    window_argmax: np.ndarray


def decode_step(state: SequenceState, config: DecodeConfig, logits_at_window) -> DecodeResult:
    """Greedy confidence decode over the active window.

    Returns the updated token vector (the state itself is not modified), the
    decoded positions, and the full distributions of the decoded rows.
    """
    window = active_window(state, config)
    logits = np.asarray(logits_at_window)
    if logits.shape[0] != window.shape[0]:
        raise ValueError(f"expected {window.shape[0]} logit rows, got {logits.shape[0]}")
    probs = softmax_row(logits)
    argmax = np.argmax(probs, axis=-1)
    conf = probs[np.arange(window.shape[0]), argmax]
    pick = np.flatnonzero(conf >= np.float32(config.confidence_threshold))
    if pick.size == 0:
        # argmax returns the first maximum, i.e. the lowest position
        pick = np.array([int(np.argmax(conf))])
    tokens = state.tokens.copy()
    tokens[window[pick]] = argmax[pick]
    return DecodeResult(tokens, window[pick], argmax[pick], probs[pick], conf[pick], argmax)


@dataclass
class StepContext:
    """What an observer sees after each step."""

    step: int
    plan: StepPlan
    window: np.ndarray
    decoded: np.ndarray
    state: SequenceState
    cache: KVCacheSet
    policy: CachePolicy
    next_plan: StepPlan | None
    cache_before: KVCacheSet | None = None


@dataclass
class GenerationResult:
    tokens: np.ndarray
    prompt_len: int
    records: list[StepRecord]
    value_trajectories: dict[int, list[np.ndarray]] = field(default_factory=dict)
    drift_excluded_rows: int = 0

    @property
    def generated(self) -> np.ndarray:
        return self.tokens[self.prompt_len:]

    @property
    def steps(self) -> int:
        return len(self.records)


LogitHook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def run_generation(
    weights: ModelWeights,
    prompt,
    config: DecodeConfig,
    policy: CachePolicy,
    *,
    logit_hook: LogitHook | None = None,
    observer: Callable[[StepContext], None] | None = None,
    track_drift: bool = False,
    value_positions=None,
    snapshot_cache: bool = False,
) -> GenerationResult:
    """Generate ``config.gen_length`` tokens after ``prompt``.

    ``logit_hook(step, window, logits)`` may replace the window logits before
    decoding; tests use it to script entropies. With ``track_drift`` each
    record after a pair of consecutive full passes carries the last-layer
    value drift. ``snapshot_cache`` hands observers a copy of the cache as it
    was before the step's forward.
    """
    mcfg = weights.config
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("prompt must be nonempty")
    if prompt.size + config.gen_length > mcfg.max_seq_len:
        raise ValueError("prompt + gen_length exceeds max_seq_len")
    state = SequenceState.start(prompt, config.gen_length, mcfg.mask_token_id)
    cache = KVCacheSet.empty(mcfg, state.l_total)
    policy.begin(state.prompt_len, config.gen_length)
    positions = [int(p) for p in (value_positions or [])]
    trajectories: dict[int, list[np.ndarray]] = {p: [] for p in positions}

    records: list[StepRecord] = []
    prev_values = None
    prev_full = False
    excluded_rows = 0
    window = active_window(state, config)
    plan = policy.first_plan(window)
    step = 1
    while True:
        t_start = time.perf_counter()
        before = None
        if snapshot_cache:
            before = KVCacheSet([k.copy() for k in cache.keys], [v.copy() for v in cache.values],
                                cache.stamp.copy(), cache.populated)
        if plan.mode is Mode.FULL:
            out = full_forward(weights, state.tokens, cache, window, step=step)
        else:
            out = partial_forward(weights, state.tokens, cache, plan.recompute_set, window, step=step)
        phases = dict(out.phase_times)

        t0 = time.perf_counter()
        logits = out.logits
        if logit_hook is not None:
            logits = np.asarray(logit_hook(step, window, logits), dtype=np.float32)
        dec = decode_step(state, config, logits)
        state.apply(dec.decoded, dec.decoded_ids)
        eos_step = config.eos_token_id is not None and bool(np.all(dec.decoded_ids == config.eos_token_id))
        stop_on_eos = (config.eos_stop and config.eos_token_id is not None
                       and bool(np.all(dec.window_argmax == config.eos_token_id)))
        if stop_on_eos:
            rest = state.mask_set
            state.apply(rest, np.full(rest.size, config.eos_token_id))
        next_window = state.mask_set[: config.window_size]
        phases["other"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        counter = OpCounter()
        next_plan, e = policy.after_decode(step, dec.decoded, dec.probs, next_window, counter)
        phases["decision"] = time.perf_counter() - t0
        wall = time.perf_counter() - t_start

        d = None
        if track_drift or positions:
            if track_drift and prev_values is not None and prev_full and plan.mode is Mode.FULL:
                d, ex = drift_stats(prev_values, out.last_layer_values)
                excluded_rows += ex
            prev_values = out.last_layer_values
            prev_full = plan.mode is Mode.FULL
            for p in positions:
                trajectories[p].append(out.last_layer_values[p].copy())

        records.append(StepRecord(
            step=step,
            mode=plan.mode.value,
            decoded_count=int(dec.decoded.size),
            max_entropy=float(e),
            recompute_ratio=recompute_ratio(plan, state.l_total),
            drift=d,
            flops_forward=int(out.flops),
            flops_decision=int(counter.ops),
            phase_times=phases,
            cache_bytes=cache_bytes(mcfg.num_layers, state.l_total, mcfg.hidden_dim, policy.aux_bytes()),
            recompute_count=plan.recompute_count(state.l_total),
            wall_time=wall,
            eos_step=eos_step,
        ))
        if observer is not None:
            observer(StepContext(step, plan, window, dec.decoded, state, cache, policy, next_plan, before))
        if next_window.size == 0:
            break
        plan = next_plan
        window = next_window
        step += 1
        state.step = step

    return GenerationResult(state.tokens, state.prompt_len, records, trajectories, excluded_rows)
