import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _support import random_prompt, toy_weights
from entropycache.decoding import DecodeConfig
from entropycache.errors import DegenerateCovariance, DegenerateRanks
from entropycache.metrics import (
    StepRecord,
    drift,
    drift_stats,
    entropy_drift_analysis,
    pca_fit,
    pca_project,
    recompute_ratio,
    spearman,
)
from entropycache.policy import StepPlan


def brute_ranks(xs):
    """Rank by counting: 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(y < x for y in xs) + (sum(y == x for y in xs) - 1) / 2 for x in xs]


def oracle_pearson(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    da = [x - ma for x in a]
    db = [y - mb for y in b]
    num = math.fsum(x * y for x, y in zip(da, db))
    return num / math.sqrt(math.fsum(x * x for x in da) * math.fsum(y * y for y in db))


def oracle_spearman(xs, ys):
    return oracle_pearson(brute_ranks(xs), brute_ranks(ys))


class TestSpearman:
    def test_identical(self):
        assert spearman([1, 5, 2, 9], [1, 5, 2, 9]) == 1.0

    def test_reversed(self):
        assert spearman([1, 5, 2, 9], [-1, -5, -2, -9]) == -1.0

    def test_small_oracle(self):
        xs, ys = [1, 2, 3, 4, 5], [1, 3, 2, 5, 4]
        # d^2 sum = 4 -> 1 - 6*4/(5*24) = 0.8
        assert spearman(xs, ys) == oracle_spearman(xs, ys)
        assert spearman(xs, ys) == pytest.approx(0.8, abs=1e-15)

    def test_ties_oracle(self):
        xs, ys = [1, 1, 2, 3, 3, 3], [4, 2, 2, 1, 5, 5]
        assert spearman(xs, ys) == oracle_spearman(xs, ys)

    def test_constant(self):
        with pytest.raises(DegenerateRanks):
            spearman([2, 2, 2], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2])

    # a 0.01 grid keeps exp strictly increasing in floating point
    @given(st.lists(st.tuples(st.integers(-500, 500).map(lambda v: v / 100),
                              st.integers(-500, 500).map(lambda v: v / 100)), min_size=3, max_size=30))
    def test_monotone_transform_invariance(self, pairs):
        xs, ys = zip(*pairs)
        try:
            r = spearman(xs, ys)
        except DegenerateRanks:
            return
        assert spearman([math.exp(x) for x in xs], ys) == r
        assert -1.0 <= r <= 1.0


class TestDrift:
    def test_identical(self):
        m = np.random.default_rng(0).standard_normal((5, 8))
        assert drift(m, m) == pytest.approx(0.0, abs=1e-12)

    def test_one_negated(self):
        m = np.random.default_rng(1).standard_normal((6, 4))
        n = m.copy()
        n[2] *= -1
        assert drift(m, n) == pytest.approx(2 / 6, abs=1e-12)

    def test_random_matches_row_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 4, 8))
        rows = []
        for x, y in zip(a, b):
            dot = sum(float(p) * float(q) for p, q in zip(x, y))
            nx = math.sqrt(sum(float(p) ** 2 for p in x))
            ny = math.sqrt(sum(float(q) ** 2 for q in y))
            rows.append(1 - dot / (nx * ny))
        assert drift(a, b) == pytest.approx(sum(rows) / 4, abs=1e-6)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((2, 5, 6))
        assert drift(a, b) == pytest.approx(drift(b, a), abs=1e-12)
        assert drift(a, a * rng.uniform(0.1, 10, (5, 1))) == pytest.approx(0.0, abs=1e-12)

    def test_zero_rows_excluded(self):
        a = np.eye(3)
        b = np.eye(3)
        b[1] = 0
        d, excluded = drift_stats(a, b)
        assert excluded == 1 and d == pytest.approx(0.0, abs=1e-12)


class TestPCA:
    def test_rank_one(self):
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(10)
        pts = np.outer(rng.standard_normal(30), direction) + rng.standard_normal(10)
        proj = pca_project(pts)
        assert proj.shape == (30, 2)
        assert proj[:, 1].var() <= 1e-6

    def test_two_by_two_eigenvalues(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((200, 2)) @ np.array([[2.0, 0.3], [0.0, 0.7]])
        xc = pts - pts.mean(axis=0)
        a = float(np.mean(xc[:, 0] ** 2))
        c = float(np.mean(xc[:, 1] ** 2))
        b = float(np.mean(xc[:, 0] * xc[:, 1]))
        mid, rad = (a + c) / 2, math.sqrt(((a - c) / 2) ** 2 + b * b)
        proj = pca_project(pts)
        assert proj[:, 0].var() == pytest.approx(mid + rad, rel=1e-8)
        assert proj[:, 1].var() == pytest.approx(mid - rad, rel=1e-6, abs=1e-8)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((50, 6)) * np.array([5, 3, 1, 0.5, 0.2, 0.1])
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a = pca_project(pts)
        b = pca_project(pts @ q)
        np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-4)

    def test_variance_bounds(self):
        rng = np.random.default_rng(3)
        fit = pca_fit(rng.standard_normal((40, 5)))
        assert fit.explained_variance[0] >= fit.explained_variance[1]
        assert fit.explained_variance.sum() <= fit.total_variance + 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateCovariance):
            pca_project(np.ones((5, 3)))


class TestRecomputeRatio:
    def test_full(self):
        assert recompute_ratio(StepPlan.full(), 512) == 1.0

    def test_partial(self):
        assert recompute_ratio(StepPlan.partial(range(96)), 512) == 0.1875


class TestEntropyDriftAnalysis:
    def test_single_step(self):
        w = toy_weights(0)
        analysis, result = entropy_drift_analysis(w, random_prompt(0, 8), DecodeConfig(window_size=1, gen_length=1))
        assert result.steps == 1 and analysis.rows() == [] and analysis.rho is None

    def test_pairs(self, tmp_path):
        w = toy_weights(1)
        analysis, result = entropy_drift_analysis(w, random_prompt(1, 16), DecodeConfig(window_size=8, gen_length=32))
        assert len(analysis.rows()) == result.steps - 1
        assert all(d is not None and 0 <= d <= 2 for d in analysis.drifts)
        assert analysis.entropies == [r.max_entropy for r in result.records[:-1]]
        analysis.write_csv(tmp_path / "d.csv")
        assert len((tmp_path / "d.csv").read_text().splitlines()) == result.steps

    def test_deterministic_logits_zero_entropy(self):
        w = toy_weights(2, logit_scale=200.0)
        analysis, _ = entropy_drift_analysis(w, random_prompt(2, 8), DecodeConfig(window_size=2, gen_length=8))
        assert all(e <= 1e-6 for e in analysis.entropies)


def test_step_record_json_microseconds():
    r = StepRecord(1, "Full", 1, 0.5, 1.0, None, 10, 3, {"attention": 0.0015}, 100, wall_time=0.002)
    d = r.to_json()
    assert d["phase_times"]["attention"] == 1500 and d["wall_time"] == 2000
