"""Cache policies: when to run a full pass, and what to recompute otherwise.

A policy is consulted once per denoising step, right after the decode. It sees
the positions just unmasked and their predictive distributions, and returns
the plan for the *next* step's forward pass. Step 1 is always a full prefill.

Three policies ship:

* ``baseline``: full pass every step.
* ``static-block``: full pass when the decode window enters a new block,
  otherwise recompute only the window's mask positions.
* ``entropy-cache``: full pass when the largest entropy among the tokens just
  decoded exceeds ``tau``; otherwise recompute the window's masks plus the
  recently decoded positions picked by :func:`select_recent`.

History vectors are indexed by generation offset (0 is the first position
after the prompt). Plans and recent sets use absolute canvas positions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DoubleDecode, NoDecodedTokens
from .mathcore import OpCounter, entropy

NEG_INF = float("-inf")


class Mode(str, enum.Enum):
    FULL = "Full"
    PARTIAL = "Partial"


@dataclass(frozen=True)
class StepPlan:
    mode: Mode
    recompute_set: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode is Mode.PARTIAL and not self.recompute_set:
            raise ValueError("a partial plan needs a nonempty recompute set")

    @classmethod
    def full(cls) -> "StepPlan":
        return cls(Mode.FULL)

    @classmethod
    def partial(cls, positions) -> "StepPlan":
        idx = positions if isinstance(positions, np.ndarray) else np.fromiter(positions, dtype=np.int64)
        return cls(Mode.PARTIAL, tuple(np.unique(idx.astype(np.int64, copy=False)).tolist()))

    def recompute_count(self, l_total: int) -> int:
        return l_total if self.mode is Mode.FULL else len(self.recompute_set)


def max_decoded_entropy(prob_vectors, counter: OpCounter | None = None) -> float:
    """Largest per-token entropy (nats) among the tokens decoded this step."""
    rows = list(prob_vectors)
    if not rows:
        raise NoDecodedTokens("no tokens were decoded this step")
    return max(entropy(p, counter) for p in rows)


def update_history(history: np.ndarray, decoded, t: int) -> np.ndarray:
    """Stamp ``history[decoded] = t`` in place and return ``history``."""
    idx = np.asarray(decoded if isinstance(decoded, np.ndarray) else list(decoded), dtype=np.int64)
    if idx.size and np.any(history[idx] != NEG_INF):
        raise DoubleDecode(f"positions {idx[history[idx] != NEG_INF].tolist()} were already decoded")
    history[idx] = t
    return history


def top_k_recent(history: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` decoded offsets with the largest stamps.

    Ties go to the larger offset. Undecoded (``-inf``) entries are never
    chosen, so fewer than ``k`` come back when fewer have been decoded.
    """
    h = np.asarray(history, dtype=np.float64)
    dec = np.flatnonzero(h != NEG_INF)
    if dec.size <= k:
        return dec
    order = np.lexsort((dec, h[dec]))  # ascending stamp, then ascending offset
    return np.sort(dec[order[-k:]])


def select_recent(history: np.ndarray, k: int, t: int, delta_t: int,
                  counter: OpCounter | None = None) -> np.ndarray:
    """Offsets whose stamp reaches ``max(min stamp of top-k, t - delta_t)``.

    Every returned offset was decoded no earlier than ``t - delta_t``, i.e.
    after the last full recomputation. When several positions share the
    boundary stamp they all pass the threshold, so the result can exceed
    ``k`` entries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h = np.asarray(history, dtype=np.float64)
    if counter is not None:
        # one pass to pick the top-k, one to threshold
        counter.ops += 2 * h.size
    top = top_k_recent(h, k)
    if top.size == 0:
        return top
    threshold = max(float(h[top].min()), float(t - delta_t))
    return np.flatnonzero(h >= threshold)


def recent_from_stamps(history: np.ndarray, sorted_stamps: np.ndarray, k: int, t: int, delta_t: int,
                       counter: OpCounter | None = None) -> np.ndarray:
    """Same set as :func:`select_recent`, given every decoded stamp in ascending order.

    Stamps only grow during generation, so a caller that appends them as
    tokens commit gets the k-th largest stamp by indexing instead of sorting.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if counter is not None:
        # a single thresholding pass
        counter.ops += history.size
    n = sorted_stamps.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    threshold = max(float(sorted_stamps[max(n - k, 0)]), float(t - delta_t))
    return np.flatnonzero(history >= threshold)


@dataclass
class PolicyState:
    tau: float = 1.5
    k_recent: int = 64
    skip_flag: bool = False
    delta_t_recompute: int = 0
    history: np.ndarray = field(default_factory=lambda: np.empty(0))
    recent_set: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    last_entropy: float = float("nan")
    prompt_len: int = 0
    # decode stamps in commit order (hence ascending); first n_decoded are live
    stamps: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_decoded: int = 0

    def reset(self, prompt_len: int, gen_length: int) -> None:
        self.skip_flag = False
        self.delta_t_recompute = 0
        self.history = np.full(gen_length, NEG_INF)
        self.stamps = np.empty(gen_length)
        self.n_decoded = 0
        self.recent_set = np.empty(0, dtype=np.int64)
        self.last_entropy = float("nan")
        self.prompt_len = prompt_len


def entropycache_plan(state: PolicyState, next_masks) -> StepPlan:
    """Apply the entropy trigger to ``state.last_entropy`` and plan the next step.

    At or below ``tau``: partial pass over ``next_masks`` plus the recent set,
    and the steps-since-full counter grows by one. Above ``tau``: full pass,
    counter back to zero.
    """
    if state.last_entropy <= state.tau:
        state.skip_flag = True
        state.delta_t_recompute += 1
        masks = np.asarray(next_masks, dtype=np.int64)
        return StepPlan.partial(np.concatenate([masks, state.recent_set + state.prompt_len]))
    state.skip_flag = False
    state.delta_t_recompute = 0
    return StepPlan.full()


def baseline_plan() -> StepPlan:
    return StepPlan.full()


def static_block_plan(window, prompt_len: int, block_size: int, current_block: int | None):
    """Plan for the static-block policy; returns ``(plan, block_index)``.

    The block index is that of the window's leftmost mask. Entering a new
    block triggers a full refresh.
    """
    window = list(window)
    block = (window[0] - prompt_len) // block_size
    if current_block is None or block != current_block:
        return StepPlan.full(), block
    return StepPlan.partial(window), block


class CachePolicy:
    """Base interface; subclasses override :meth:`after_decode`."""

    name = "abstract"

    def begin(self, prompt_len: int, gen_length: int) -> None:
        self.prompt_len = prompt_len
        self.gen_length = gen_length

    def first_plan(self, window) -> StepPlan:
        return StepPlan.full()

    def after_decode(self, step: int, decoded, probs, next_window,
                     counter: OpCounter | None = None) -> tuple[StepPlan | None, float]:
        raise NotImplementedError

    def aux_bytes(self) -> int:
        return 0

    def params(self) -> dict:
        return {}


class BaselinePolicy(CachePolicy):
    name = "baseline"

    def after_decode(self, step, decoded, probs, next_window, counter=None):
        e = max_decoded_entropy(probs, counter)
        return (baseline_plan() if len(next_window) else None), e


class StaticBlockPolicy(CachePolicy):
    name = "static-block"

    def __init__(self, block_size: int = 32):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self.block: int | None = None

    def begin(self, prompt_len, gen_length):
        super().begin(prompt_len, gen_length)
        self.block = None

    def first_plan(self, window):
        _, self.block = static_block_plan(window, self.prompt_len, self.block_size, None)
        return StepPlan.full()

    def after_decode(self, step, decoded, probs, next_window, counter=None):
        e = max_decoded_entropy(probs, counter)
        if not len(next_window):
            return None, e
        plan, self.block = static_block_plan(next_window, self.prompt_len, self.block_size, self.block)
        return plan, e

    def params(self):
        return {"block_size": self.block_size}


class EntropyCachePolicy(CachePolicy):
    name = "entropy-cache"

    def __init__(self, tau: float = 1.5, k_recent: int = 64):
        if k_recent < 1:
            raise ValueError("k_recent must be >= 1")
        self.state = PolicyState(tau=tau, k_recent=k_recent)

    def begin(self, prompt_len, gen_length):
        super().begin(prompt_len, gen_length)
        self.state.reset(prompt_len, gen_length)

    def after_decode(self, step, decoded, probs, next_window, counter=None):
        s = self.state
        offsets = np.asarray(decoded, dtype=np.int64) - self.prompt_len
        update_history(s.history, offsets, step)
        s.stamps[s.n_decoded:s.n_decoded + offsets.size] = step
        s.n_decoded += offsets.size
        s.recent_set = recent_from_stamps(s.history, s.stamps[:s.n_decoded], s.k_recent, step,
                                          s.delta_t_recompute, counter)
        s.last_entropy = max_decoded_entropy(probs, counter)
        plan = entropycache_plan(s, next_window)
        return (plan if len(next_window) else None), s.last_entropy

    def aux_bytes(self):
        return self.state.history.nbytes + self.state.stamps.nbytes + self.state.recent_set.nbytes

    def params(self):
        return {"tau": self.state.tau, "k_recent": self.state.k_recent}


POLICY_NAMES = ("baseline", "static-block", "entropy-cache")


def make_policy(name: str, tau: float = 1.5, k_recent: int = 64, block_size: int = 32) -> CachePolicy:
    if name == "baseline":
        return BaselinePolicy()
    if name == "static-block":
        return StaticBlockPolicy(block_size)
    if name == "entropy-cache":
        return EntropyCachePolicy(tau, k_recent)
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
