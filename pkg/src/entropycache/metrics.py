"""Per-step records, run summaries, and the entropy/drift analysis tools."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCovariance, DegenerateRanks, ZeroNormVector
from .policy import Mode, StepPlan

PHASES = ("attention", "ffn", "cache_update", "decision", "other")
# Layer whose value vectors feed drift and PCA; written into analysis output.
DRIFT_LAYER = "last"


@dataclass
class StepRecord:
    step: int
    mode: str
    decoded_count: int
    max_entropy: float
    recompute_ratio: float
    drift: float | None
    flops_forward: int
    flops_decision: int
    phase_times: dict[str, float]
    cache_bytes: int
    recompute_count: int = 0
    wall_time: float = 0.0
    eos_step: bool = False

    def to_json(self) -> dict:
        """JSON-ready dict; durations converted to integer microseconds."""
        d = asdict(self)
        d["phase_times"] = {k: _us(v) for k, v in self.phase_times.items()}
        d["wall_time"] = _us(self.wall_time)
        return d


def _us(seconds: float) -> int:
    return int(round(seconds * 1e6))


@dataclass
class TraceSummary:
    steps: int
    tokens_per_sec: float
    mean_recompute_ratio: float
    spearman_entropy_drift: float | None
    decision_time_fraction: float
    flops_total: int = 0
    generated_tokens: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def recompute_ratio(plan: StepPlan, l_total: int) -> float:
    if plan.mode is Mode.FULL:
        return 1.0
    if not plan.recompute_set:
        raise ValueError("empty partial plan")
    return len(plan.recompute_set) / l_total


def cache_bytes(num_layers: int, l_total: int, hidden_dim: int, aux: int = 0) -> int:
    """K and V for every layer and position in float32, plus policy auxiliaries."""
    return 2 * num_layers * l_total * hidden_dim * 4 + aux


def summarize(records: list[StepRecord], generated_tokens: int, l_total: int,
              spearman_rho: float | None = None, **extra) -> TraceSummary:
    """Aggregate a run. The mean recompute ratio is ``sum(counts) / (steps * l_total)``."""
    wall = sum(r.wall_time for r in records)
    decision = sum(r.phase_times.get("decision", 0.0) for r in records)
    steps = len(records)
    recomputed = sum(r.recompute_count for r in records)
    return TraceSummary(
        steps=steps,
        tokens_per_sec=generated_tokens / wall if wall > 0 else 0.0,
        mean_recompute_ratio=recomputed / (steps * l_total) if steps else 0.0,
        spearman_entropy_drift=spearman_rho,
        decision_time_fraction=min(max(decision / wall, 0.0), 1.0) if wall > 0 else 0.0,
        flops_total=sum(r.flops_forward + r.flops_decision for r in records),
        generated_tokens=generated_tokens,
        wall_time=wall,
        extra={"l_total": l_total, **extra},
    )


def drift_stats(values_prev, values_curr) -> tuple[float, int]:
    """Mean row-wise cosine distance and the number of rows skipped for zero norm."""
    a = np.asarray(values_prev, dtype=np.float64)
    b = np.asarray(values_curr, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    ok = (na >= 1e-12) & (nb >= 1e-12)
    excluded = int((~ok).sum())
    if not ok.any():
        raise ZeroNormVector("every row has zero norm")
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    return float(dist.mean()), excluded


def drift(values_prev, values_curr) -> float:
    """Average cosine distance between matching rows of two value matrices."""
    return drift_stats(values_prev, values_curr)[0]


def average_ranks(xs) -> list[float]:
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(xs, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks.tolist()


def pearson(xs, ys) -> float:
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateRanks("constant input has no rank correlation")
    sxy = math.fsum(u * v for u, v in zip(dx, dy))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def spearman(xs, ys) -> float:
    """Spearman's rho: Pearson correlation of average-tie ranks."""
    if len(xs) != len(ys):
        raise ValueError("inputs must have equal length")
    if len(xs) < 3:
        raise ValueError("need at least 3 points")
    return pearson(average_ranks(xs), average_ranks(ys))


@dataclass
class DriftAnalysis:
    entropies: list[float]
    drifts: list[float]
    eos_flags: list[bool]
    rho: float | None
    excluded_rows: int = 0
    layer: str = DRIFT_LAYER

    def rows(self):
        return list(zip(range(1, len(self.drifts) + 1), self.entropies, self.drifts, self.eos_flags))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "max_entropy", "drift", "eos_step"])
            for step, e, d, eos in self.rows():
                w.writerow([step, repr(e), repr(d), int(eos)])


def entropy_drift_analysis(weights, prompt, config, exclude_eos: bool = False,
                           value_positions=None) -> tuple[DriftAnalysis, object]:
    """Pair each step's max decoded entropy with the drift it causes.

    Runs the always-full policy so every step's values are exact. The entropy
    of the tokens decoded at step t is paired with the drift between the
    last-layer values of steps t and t+1, which gives ``steps - 1`` pairs.
    Returns the analysis and the underlying generation result; the latter
    carries value trajectories for ``value_positions`` when requested.
    """
    from .decoding import run_generation
    from .policy import BaselinePolicy

    result = run_generation(weights, prompt, config, BaselinePolicy(),
                            track_drift=True, value_positions=value_positions)
    recs = result.records
    ent, dr, eos = [], [], []
    for prev, cur in zip(recs[:-1], recs[1:]):
        ent.append(prev.max_entropy)
        dr.append(cur.drift)
        eos.append(prev.eos_step)
    xs = [e for e, f in zip(ent, eos) if not (exclude_eos and f)]
    ys = [d for d, f in zip(dr, eos) if not (exclude_eos and f)]
    rho = None
    if len(xs) >= 3:
        try:
            rho = spearman(xs, ys)
        except DegenerateRanks:
            rho = None
    return DriftAnalysis(ent, dr, eos, rho, result.drift_excluded_rows), result


@dataclass
class PCAResult:
    projection: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float


def _power_iteration(c: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    d = c.shape[0]
    # fixed start, nudged off any symmetric subspace
    v = np.ones(d) + np.arange(d) / d
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = c @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return v, 0.0
        w /= nw
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        lam = float(v @ c @ v)
        if done:
            break
    return v, lam


def pca_fit(points, components: int = 2, tol: float = 1e-8, max_iter: int = 1000) -> PCAResult:
    """Top principal directions by power iteration with deflation."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (T, d) matrix with T >= 2")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    total = float(np.trace(cov))
    if total <= 1e-300:
        raise DegenerateCovariance("all rows are identical")
    comps, lams = [], []
    c = cov.copy()
    for _ in range(components):
        v, lam = _power_iteration(c, tol, max_iter)
        if lam <= total * 1e-15:
            # nothing left: any unit direction orthogonal to those found
            v = _orthogonal_unit(comps, x.shape[1])
            lam = float(v @ cov @ v)
        comps.append(v)
        lams.append(lam)
        c = c - lam * np.outer(v, v)
    w = np.stack(comps, axis=1)
    return PCAResult(xc @ w, w, np.asarray(lams), total)


def _orthogonal_unit(found, dim: int) -> np.ndarray:
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        for u in found:
            e -= (e @ u) * u
        n = np.linalg.norm(e)
        if n > 1e-6:
            return e / n
    raise DegenerateCovariance("no orthogonal direction left")


def pca_project(value_rows_over_time, components: int = 2) -> np.ndarray:
    """Mean-centered ``(T, components)`` projection onto the top principal axes."""
    return pca_fit(value_rows_over_time, components).projection


def write_jsonl(records: list[StepRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def write_records_csv(records: list[StepRecord], path) -> None:
    rows = [r.to_json() for r in records]
    with open(path, "w", newline="") as f:
        if not rows:
            return
        flat = []
        for r in rows:
            pt = r.pop("phase_times")
            r.update({f"time_{k}_us": pt.get(k, 0) for k in PHASES})
            flat.append(r)
        w = csv.DictWriter(f, fieldnames=list(flat[0]))
        w.writeheader()
        w.writerows(flat)


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
