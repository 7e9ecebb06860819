from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emomoe.core import ContractViolation, NumericFault, RngStream
from emomoe.metrics import (
    MetricsReport,
    ResultMatrix,
    aggregate,
    binomial_sign_test_p,
    diversity,
    fid,
    fid_from_stats,
    forgetting_rate,
    multimodality,
    r_precision_hit,
    weighted_f1,
)


class TestFid:
    def test_identical_sets_zero(self, rng):
        x = rng.normal((40, 8))
        assert fid(x, x) <= 1e-6

    def test_symmetric(self, rng):
        x = rng.normal((50, 6))
        y = rng.normal((60, 6)) + 0.5
        assert fid(x, y) == pytest.approx(fid(y, x), abs=1e-6)

    def test_nonnegative(self):
        for seed in range(10):
            gen = RngStream(seed)
            x = gen.normal((30, 5))
            y = gen.normal((35, 5), 2.0)
            assert fid(x, y) >= -1e-6

    def test_closed_form_gaussian_means(self):
        m = np.array([1.0, -2.0, 0.5, 0.0])
        f = fid_from_stats(np.zeros(4), np.eye(4), m, np.eye(4))
        assert f == pytest.approx(float(m @ m), abs=1e-4)

    def test_degenerate_identical_features_regularized(self):
        x = np.ones((10, 4))
        y = np.ones((12, 4)) * 2.0
        f = fid(x, y)  # means differ by 1 in each of 4 dims; covs cancel
        assert f == pytest.approx(4.0, abs=1e-3)

    def test_cross_checked_against_scipy_sqrtm(self, rng):
        scipy_linalg = pytest.importorskip("scipy.linalg")
        for seed in (1, 2, 3):
            gen = RngStream(seed)
            x = gen.normal((200, 32))
            y = gen.normal((220, 32)) + gen.uniform((32,), -1, 1)
            mu_r, mu_g = x.mean(0), y.mean(0)
            s_r = np.cov(x, rowvar=False) + 1e-6 * np.eye(32)
            s_g = np.cov(y, rowvar=False) + 1e-6 * np.eye(32)
            covmean = scipy_linalg.sqrtm(s_r @ s_g)
            expected = float(
                (mu_r - mu_g) @ (mu_r - mu_g)
                + np.trace(s_r) + np.trace(s_g) - 2 * np.trace(covmean.real)
            )
            assert fid(x, y) == pytest.approx(expected, rel=1e-6, abs=1e-8)

    def test_contracts(self, rng):
        with pytest.raises(ContractViolation):
            fid(rng.normal((1, 4)), rng.normal((5, 4)))
        with pytest.raises(ContractViolation):
            fid(rng.normal((5, 4)), rng.normal((5, 3)))

    def test_bad_covariance_raises_numeric_fault(self):
        bad = -np.eye(3)
        with pytest.raises(NumericFault):
            fid_from_stats(np.zeros(3), bad, np.zeros(3), np.eye(3))


class TestRPrecision:
    def test_exact_match_hits(self, rng):
        t = rng.normal((8,))
        distractors = rng.normal((31, 8))
        assert r_precision_hit(t, t, distractors)

    def test_exact_distractor_match_misses(self, rng):
        distractors = rng.normal((31, 8))
        motion = distractors[4]
        true = rng.normal((8,))
        assert not r_precision_hit(motion, true, distractors)

    def test_random_rate_near_one_over_pool(self):
        gen = RngStream(99)
        trials, hits = 3000, 0
        for _ in range(trials):
            motion = gen.normal((8,))
            texts = gen.normal((32, 8))
            if r_precision_hit(motion, texts[0], texts[1:]):
                hits += 1
        rate = hits / trials
        sigma = np.sqrt((1 / 32) * (31 / 32) / trials)
        assert abs(rate - 1 / 32) < 3 * sigma


class TestDiversity:
    def test_identical_features_zero(self, rng):
        feats = np.tile(rng.normal((1, 6)), (40, 1))
        assert diversity(feats, 10, rng).value == 0.0

    def test_scaling_homogeneous(self, rng):
        feats = RngStream(4).normal((60, 5))
        d1 = diversity(feats, 20, RngStream(7)).value
        d2 = diversity(feats * 2, 20, RngStream(7)).value
        assert d2 == pytest.approx(2 * d1, rel=1e-12)

    def test_two_point_expected_distance(self):
        # halves at p and q: a uniformly random pair is a cross pair with
        # probability n/(2n-1), so E[d] = |p-q| * n/(2n-1)
        n = 30
        p, q = np.zeros(3), np.array([3.0, 4.0, 0.0])
        feats = np.concatenate([np.tile(p, (n, 1)), np.tile(q, (n, 1))])
        estimates = [
            diversity(feats, n, RngStream(s)).value for s in range(400)
        ]
        expected = 5.0 * n / (2 * n - 1)
        assert np.mean(estimates) == pytest.approx(expected, rel=0.02)

    def test_reduced_pairs_recorded(self, rng):
        res = diversity(rng.normal((10, 4)), 50, rng)
        assert res.pairs_used == 5
        assert res.reduced


class TestMultimodality:
    def test_duplicated_outputs_zero_and_flagged(self, rng):
        groups = [np.tile(rng.normal((1, 4)), (10, 1)) for _ in range(5)]
        res = multimodality(groups)
        assert res.value == 0.0
        assert res.zero_variance

    def test_known_two_point_groups(self):
        a = np.zeros((4, 2))
        a[1::2] = [3.0, 4.0]  # every pair distance is 5
        res = multimodality([a, a.copy()])
        assert res.value == pytest.approx(5.0)
        assert not res.zero_variance


class TestWeightedF1:
    def test_perfect_prediction(self):
        labels = np.array([0, 1, 2, 3] * 5)
        assert weighted_f1(labels, labels, 4).value == pytest.approx(1.0)

    def test_constant_collapse_hand_computed(self):
        true = np.array([0, 1, 2, 3] * 10)
        pred = np.zeros(40, dtype=int)
        res = weighted_f1(true, pred, 4)
        # class 0: precision 0.25, recall 1 -> F1 0.4, weight 0.25; rest 0
        assert res.value == pytest.approx(0.1)

    def test_order_invariant(self, rng):
        true = np.array([0, 1, 2, 3] * 8)
        pred = np.array([0, 1, 1, 3] * 8)
        perm = RngStream(3).permutation(32)
        assert weighted_f1(true, pred, 4).value == pytest.approx(
            weighted_f1(true[perm], pred[perm], 4).value
        )

    def test_absent_class_excluded_and_recorded(self):
        true = np.array([0, 0, 1, 1])
        pred = np.array([0, 0, 1, 1])
        res = weighted_f1(true, pred, 4)
        assert res.value == pytest.approx(1.0)
        assert res.excluded_classes == [2, 3]


class TestForgettingRate:
    def test_hand_matrix(self):
        r = np.array([[0.5, np.nan], [0.4, 0.3]])
        assert forgetting_rate(r) == pytest.approx(0.1)

    def test_zero_when_final_equals_max(self):
        r = np.array([[0.5, np.nan, np.nan],
                      [0.6, 0.4, np.nan],
                      [0.6, 0.4, 0.2]])
        assert forgetting_rate(r) == pytest.approx(0.0)

    def test_negative_when_final_improves(self):
        r = np.array([[0.5, np.nan], [0.7, 0.3]])
        assert forgetting_rate(r) < 0

    def test_single_step_rejected(self):
        with pytest.raises(ContractViolation):
            forgetting_rate(np.array([[0.5]]))

    def test_matches_bruteforce_loops(self):
        gen = RngStream(17)
        for _ in range(20):
            n = int(gen.integers(2, 7))
            r = gen.uniform((n, n))
            fast = forgetting_rate(r)
            slow = 0.0
            for j in range(n - 1):
                best = -np.inf
                for k in range(j, n - 1):
                    best = max(best, r[k, j])
                slow += best - r[n - 1, j]
            slow /= n - 1
            assert fast == pytest.approx(slow, abs=1e-12)


class TestSignTest:
    def test_extremes(self):
        assert binomial_sign_test_p(0, 10) == pytest.approx(1.0, abs=1e-3)
        assert binomial_sign_test_p(10, 10) == pytest.approx(2**-10)

    def test_fifty_trials_threshold(self):
        # 32/50 is just significant at 0.05, 31/50 is not
        assert binomial_sign_test_p(32, 50) < 0.05
        assert binomial_sign_test_p(31, 50) > 0.05


class TestAggregation:
    def _matrices(self, n=3, cols=3, fill=lambda i, j: 1.0 + i + j):
        out = {}
        for name in ("fid", "rprecision", "diversity", "multimodality", "weighted_f1"):
            m = ResultMatrix(name, n, cols)
            for i in range(n):
                for j in range(cols):
                    if j <= i:
                        m.set(i, j, fill(i, j))
            for j in range(cols):
                m.set(n - 1, j, fill(n - 1, j))
            out[name] = m
        return out

    def test_constant_final_row(self):
        mats = self._matrices(fill=lambda i, j: 2.5)
        rep = aggregate(mats, "demo", "unseen", 0, [0, 1, 2])
        assert rep.af == rep.ar == rep.ad == rep.amm == rep.awf == 2.5

    def test_two_scenario_mean(self):
        mats = self._matrices(n=2, cols=2, fill=lambda i, j: 1.0 + 2.0 * j)
        rep = aggregate(mats, "demo", "unseen", 0, [0, 1])
        assert rep.af == pytest.approx(2.0)

    def test_report_rederivable_from_matrix(self):
        mats = self._matrices()
        rep = aggregate(mats, "demo", "mixed", 3, [2, 0, 1])
        rep2 = MetricsReport.from_json(rep.to_json())
        assert rep2.to_json() == rep.to_json()
        assert rep.af == np.mean(mats["fid"].final_row())

    def test_missing_final_cells_error(self):
        mats = self._matrices()
        mats["fid"].values[-1, 1] = np.nan
        with pytest.raises(ContractViolation):
            aggregate(mats, "demo", "unseen", 0, [0, 1, 2])

    def test_matrix_csv_round_trip(self, tmp_path):
        m = ResultMatrix("fid", 3, 3)
        m.set(0, 0, 1.25)
        m.set(2, 1, -0.5)
        m.to_csv(tmp_path / "m.csv")
        loaded = ResultMatrix.from_csv("fid", tmp_path / "m.csv")
        np.testing.assert_array_equal(
            np.isnan(loaded.values), np.isnan(m.values)
        )
        assert loaded.get(0, 0) == 1.25
        assert loaded.get(2, 1) == -0.5


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_fid_nonnegative_property(seed):
    gen = RngStream(seed)
    x = gen.normal((20, 4))
    y = gen.normal((25, 4), 1.5) + gen.uniform((4,), -2, 2)
    assert fid(x, y) >= -1e-6
