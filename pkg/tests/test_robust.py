import math

import numpy as np
import pytest

from robustsplat.robust import (BUCKET_WIDTH, ResidualHistogram, WarmupSchedule,
                                alpha_schedule, cluster_vote_mask,
                                histogram_quantile, histogram_update, residual,
                                robust_filter_mask, scheduled_sample)


def brute_force_vote_mask(res, rho):
    """Per-pixel 3x3 majority-vote oracle with zero padding, normalizer 1/9."""
    omega = (res <= rho).astype(float)
    h, w = omega.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            votes = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        votes += omega[ii, jj]
            out[i, j] = 1.0 if votes / 9.0 >= 0.5 else 0.0
    return out


class TestResidual:
    def test_identical_zero(self):
        img = np.random.default_rng(0).random((4, 5, 3))
        assert np.all(residual(img, img) == 0.0)

    def test_black_vs_white(self):
        black = np.zeros((3, 3, 3))
        white = np.ones((3, 3, 3))
        assert np.all(residual(black, white) == 1.0)

    def test_channel_mean(self):
        a = np.zeros((2, 2, 3))
        b = np.zeros((2, 2, 3))
        b[0, 0, 1] = 0.3
        r = residual(a, b)
        assert r[0, 0] == pytest.approx(0.1)
        assert r[1, 1] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            residual(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestHistogram:
    def test_uniform_small_residual_first_bucket(self):
        h = ResidualHistogram()
        h.update(np.full((4, 4), 0.0005))
        assert h.buckets[0] == 16.0
        assert h.buckets[1:].sum() == 0.0

    def test_overflow_goes_to_last_bucket(self):
        h = ResidualHistogram()
        h.update(np.array([[1.5]]))
        assert h.buckets[-1] == 1.0

    def test_discount_exact(self):
        h = ResidualHistogram()
        h.update(np.array([[0.25, 0.75]]))
        before = h.buckets.copy()
        h.update(np.zeros((0, 0)))
        assert np.allclose(h.buckets, 0.99 * before)

    def test_quantile_simple(self):
        h = ResidualHistogram()
        h.update(np.full((3, 3), 0.0001))
        assert h.quantile(0.5) == pytest.approx(1e-3)

    def test_quantile_uniform_cdf(self):
        h = ResidualHistogram()
        h.buckets[:] = 1.0
        assert h.quantile(0.9) == pytest.approx(0.900)

    def test_quantile_matches_sort_oracle(self):
        # gamma=1: within one bucket width of the exact sample quantile
        rng = np.random.default_rng(123)
        vals = rng.random(10_000)
        h = ResidualHistogram(discount=1.0)
        h.update(vals.reshape(100, 100))
        svals = np.sort(vals)
        for tau in (0.1, 0.5, 0.9):
            exact = svals[min(int(np.ceil(tau * vals.size)) - 1, vals.size - 1)]
            assert abs(h.quantile(tau) - exact) <= BUCKET_WIDTH + 1e-12

    def test_not_ready(self):
        h = ResidualHistogram()
        assert h.quantile(0.5) is None
        assert not h.ready

    def test_functional_wrappers(self):
        h = ResidualHistogram()
        histogram_update(h, np.full((2, 2), 0.01))
        assert histogram_quantile(h, 0.5) == pytest.approx(0.011)


class TestRobustFilterMask:
    def test_all_inlier(self):
        # zero-padded border rule: corner pixels only gather 4 of 9 votes,
        # so an all-inlier field keeps everything except the four corners
        res = np.full((5, 5), 0.1)
        mask = robust_filter_mask(res, 0.2)
        corners = np.zeros((5, 5), dtype=bool)
        corners[[0, 0, -1, -1], [0, -1, 0, -1]] = True
        assert np.all(mask[~corners] == 1.0)
        assert np.all(mask[corners] == 0.0)

    def test_isolated_outlier_reclassified(self):
        res = np.full((7, 7), 0.05)
        res[3, 3] = 0.9
        mask = robust_filter_mask(res, 0.5)
        assert mask[3, 3] == 1.0

    def test_solid_block_interior_stays_outlier(self):
        res = np.full((11, 11), 0.05)
        res[3:8, 3:8] = 0.9
        mask = robust_filter_mask(res, 0.5)
        assert np.all(mask[4:7, 4:7] == 0.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            res = rng.random((12, 9))
            rho = rng.uniform(0.2, 0.8)
            assert np.array_equal(robust_filter_mask(res, rho),
                                  brute_force_vote_mask(res, rho))

    def test_mask_monotone_in_tau(self):
        rng = np.random.default_rng(17)
        res = rng.random((20, 20))
        h = ResidualHistogram(discount=1.0)
        h.update(res)
        lo = robust_filter_mask(res, h.quantile(0.5))
        hi = robust_filter_mask(res, h.quantile(0.9))
        assert np.all(lo <= hi)


class TestClusterVote:
    def test_fully_inlier_cluster(self):
        labels = np.zeros((4, 4), dtype=int)
        assert np.all(cluster_vote_mask(labels, np.ones((4, 4))) == 1.0)

    def test_sixty_percent_keeps(self):
        labels = np.zeros((1, 10), dtype=int)
        mask = np.array([[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]], dtype=float)
        assert np.all(cluster_vote_mask(labels, mask) == 1.0)

    def test_exact_half_drops(self):
        labels = np.zeros((1, 10), dtype=int)
        mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]], dtype=float)
        assert np.all(cluster_vote_mask(labels, mask) == 0.0)

    def test_per_cluster_independence(self):
        labels = np.array([[0, 0, 1, 1]])
        mask = np.array([[1, 1, 0, 0]], dtype=float)
        out = cluster_vote_mask(labels, mask)
        assert np.array_equal(out, [[1, 1, 0, 0]])


class TestWarmup:
    def test_alpha_at_zero(self):
        s = WarmupSchedule(beta1=3e-4, beta2=1.5)
        assert alpha_schedule(s, 0) == 1.0

    def test_alpha_direct_evaluation(self):
        s = WarmupSchedule(beta1=3e-4, beta2=1.5)
        # floor(3/1.5) = 2 -> exp(-6e-4)
        assert alpha_schedule(s, 2) == pytest.approx(math.exp(-6e-4), abs=1e-12)
        assert alpha_schedule(s, 2) == pytest.approx(0.99940, abs=5e-6)

    def test_alpha_monotone_decay(self):
        s = WarmupSchedule(beta1=3e-3, beta2=1.5)
        vals = [alpha_schedule(s, t) for t in range(0, 5000, 50)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-4 or vals[-1] < vals[0]
        assert alpha_schedule(s, 10_000_000) < 1e-8


class TestScheduledSample:
    def test_alpha_one_all_ones(self):
        rng = np.random.default_rng(0)
        out = scheduled_sample(np.zeros((16, 16)), 1.0, rng)
        assert np.all(out == 1.0)

    def test_alpha_zero_identity(self):
        rng = np.random.default_rng(0)
        mask = (np.random.default_rng(5).random((16, 16)) < 0.5).astype(float)
        out = scheduled_sample(mask, 0.0, rng)
        assert np.array_equal(out, mask)

    def test_binomial_concentration(self):
        rng = np.random.default_rng(42)
        out = scheduled_sample(np.zeros((1000, 1000)), 0.5, rng)
        assert abs(out.mean() - 0.5) < 0.002

    def test_reproducible_under_seed(self):
        mask = (np.random.default_rng(9).random((32, 32)) < 0.3).astype(float)
        a = scheduled_sample(mask, 0.4, np.random.default_rng(77))
        b = scheduled_sample(mask, 0.4, np.random.default_rng(77))
        assert np.array_equal(a, b)
