import numpy as np
import pytest

from seddlab.noise import (
    GeometricSchedule,
    LogLinearSchedule,
    NoiseError,
    NoiseKernel,
    cumulative_noise,
    make_schedule,
    marginal,
    posterior_ratio,
    ratio_table,
    reverse_rate_row,
    sample_marginal,
    weight_table,
)
from seddlab.oracle import (
    enumerate_sequences,
    exact_concrete_score,
    exact_pt,
    exact_reverse_tables,
    matrix_exponential,
    sequence_to_index,
)
from tests.test_oracle import skewed_p0

ALL_KERNELS = [NoiseKernel("uniform", 3), NoiseKernel("uniform", 5),
               NoiseKernel("absorb", 3), NoiseKernel("absorb", 5)]
ALL_SCHEDULES = [LogLinearSchedule(), GeometricSchedule()]


class TestSchedules:
    def test_loglinear_starts_at_zero(self):
        assert cumulative_noise(LogLinearSchedule(), 0.0) == 0.0

    def test_loglinear_endpoint(self):
        val = cumulative_noise(LogLinearSchedule(eps=1e-3), 1.0)
        assert val == pytest.approx(6.90776, abs=1e-5)

    def test_geometric_midpoint(self):
        val = cumulative_noise(GeometricSchedule(sigma_min=1e-3, sigma_max=20.0), 0.5)
        assert val == pytest.approx(np.sqrt(0.02), rel=1e-9)

    @pytest.mark.parametrize("schedule", ALL_SCHEDULES)
    def test_strictly_increasing_with_positive_rate(self, schedule):
        ts = np.linspace(0.01, 1.0, 50)
        sig = np.array([cumulative_noise(schedule, t) for t in ts])
        assert np.all(np.diff(sig) > 0)
        assert np.all(schedule.rate(ts) > 0)

    @pytest.mark.parametrize("schedule", ALL_SCHEDULES)
    def test_rate_is_derivative_of_total(self, schedule):
        h = 1e-6
        for t in [0.1, 0.4, 0.9]:
            fd = (schedule.total(t + h) - schedule.total(t - h)) / (2 * h)
            assert schedule.rate(t) == pytest.approx(fd, rel=1e-5)

    def test_time_out_of_range_rejected(self):
        with pytest.raises(NoiseError, match="0, 1"):
            cumulative_noise(LogLinearSchedule(), 1.5)
        with pytest.raises(NoiseError):
            cumulative_noise(GeometricSchedule(), -0.1)

    def test_make_schedule(self):
        assert isinstance(make_schedule("loglinear"), LogLinearSchedule)
        assert isinstance(make_schedule("geometric", sigma_max=10.0), GeometricSchedule)
        with pytest.raises(NoiseError):
            make_schedule("banana")


class TestKernels:
    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_generator_rows_sum_to_zero(self, kernel):
        np.testing.assert_allclose(kernel.generator().sum(axis=1), 0.0, atol=1e-12)

    def test_uniform_off_diagonals_equal(self):
        q = NoiseKernel("uniform", 4).generator()
        off = q[~np.eye(4, dtype=bool)]
        assert np.ptp(off) == 0.0 and off[0] > 0

    def test_absorb_only_token_to_mask(self):
        q = NoiseKernel("absorb", 4).generator()
        positive = np.argwhere(q > 0)
        assert all(col == 3 and row != 3 for row, col in positive)

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    @pytest.mark.parametrize("sig", [0.0, 0.05, 0.7, 3.0, 12.0])
    def test_closed_form_transition_matches_expm(self, kernel, sig):
        expected = matrix_exponential(sig * kernel.generator())
        np.testing.assert_allclose(kernel.transition_matrix(sig), expected, atol=1e-10)


class TestMarginal:
    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_zero_noise_is_one_hot(self, kernel):
        probs = marginal(kernel, 0.0, 1)
        expected = np.zeros(kernel.n)
        expected[1] = 1.0
        np.testing.assert_allclose(probs, expected, atol=1e-12)

    def test_absorb_half_life(self):
        kernel = NoiseKernel("absorb", 4)
        probs = marginal(kernel, np.log(2.0), 2)
        assert probs[2] == pytest.approx(0.5, abs=1e-12)
        assert probs[3] == pytest.approx(0.5, abs=1e-12)
        oracle_row = matrix_exponential(np.log(2.0) * kernel.generator())[2]
        np.testing.assert_allclose(probs, oracle_row, atol=1e-12)

    def test_uniform_half_life(self):
        kernel = NoiseKernel("uniform", 4)
        probs = marginal(kernel, np.log(2.0), 1)
        assert probs[1] == pytest.approx(0.625, abs=1e-12)
        np.testing.assert_allclose(np.delete(probs, 1), 0.125, atol=1e-12)
        oracle_row = matrix_exponential(np.log(2.0) * kernel.generator())[1]
        np.testing.assert_allclose(probs, oracle_row, atol=1e-12)

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    @pytest.mark.parametrize("sig", [0.0, 0.3, 1.7, 8.0])
    def test_marginal_matches_expm_rows(self, kernel, sig):
        trans = matrix_exponential(sig * kernel.generator())
        for x0 in range(kernel.n - (1 if kernel.kind == "absorb" else 0)):
            np.testing.assert_allclose(marginal(kernel, sig, x0), trans[x0], atol=1e-10)

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_mass_preserved(self, kernel):
        for sig in [0.1, 2.0, 30.0]:
            assert marginal(kernel, sig, 0).sum() == pytest.approx(1.0, abs=1e-9)

    def test_monotone_masking(self):
        kernel = NoiseKernel("absorb", 3)
        masses = [marginal(kernel, s, 0)[2] for s in np.linspace(0, 10, 40)]
        assert np.all(np.diff(masses) >= 0)

    def test_limits(self):
        uni = marginal(NoiseKernel("uniform", 4), 40.0, 2)
        assert np.abs(uni - 0.25).max() < 1e-6
        ab = marginal(NoiseKernel("absorb", 4), 40.0, 2)
        assert ab[3] == pytest.approx(1.0, abs=1e-12)

    def test_mask_as_clean_token_rejected(self):
        with pytest.raises(NoiseError, match="MASK"):
            marginal(NoiseKernel("absorb", 4), 1.0, 3)


class TestPosteriorRatio:
    def test_identity_ratio(self):
        assert posterior_ratio(NoiseKernel("uniform", 4), 0.9, 1, 2, 2) == pytest.approx(1.0)

    def test_absorb_mask_to_origin(self):
        kernel = NoiseKernel("absorb", 4)
        r = posterior_ratio(kernel, np.log(2.0), 1, 3, 1)
        assert r == pytest.approx(1.0, abs=1e-12)
        probs = marginal(kernel, np.log(2.0), 1)
        assert r == pytest.approx(probs[1] / probs[3], abs=1e-12)

    def test_absorb_mask_to_other_token_is_zero(self):
        assert posterior_ratio(NoiseKernel("absorb", 4), 0.7, 1, 3, 2) == 0.0

    def test_unreachable_state_rejected(self):
        with pytest.raises(NoiseError, match="zero-probability"):
            posterior_ratio(NoiseKernel("absorb", 4), 0.7, 1, 2, 1)


class TestReverseRateRow:
    def test_absorb_frozen_when_revealed(self):
        kernel = NoiseKernel("absorb", 4)
        rates = reverse_rate_row(kernel, 1.3, np.ones(4), current=1)
        np.testing.assert_allclose(rates, 0.0, atol=1e-15)

    def test_uniform_stationary_scores_give_forward_rates(self):
        kernel = NoiseKernel("uniform", 4)
        sig_t = 0.8
        rates = reverse_rate_row(kernel, sig_t, np.ones(4), current=2)
        forward = sig_t * kernel.generator()[2]
        np.testing.assert_allclose(rates, forward, atol=1e-12)

    def test_row_sums_to_zero(self):
        rng = np.random.default_rng(0)
        rates = reverse_rate_row(NoiseKernel("uniform", 5), 1.1, rng.random(5) + 0.1, 3)
        assert rates.sum() == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_score_rejected(self):
        kernel = NoiseKernel("absorb", 4)
        bad = np.array([1.0, 0.0, 1.0, 1.0])
        with pytest.raises(NoiseError, match="positive"):
            reverse_rate_row(kernel, 1.0, bad, current=3)

    @pytest.mark.parametrize("kind", ["uniform", "absorb"])
    def test_matches_exact_reverse_generator(self, kind):
        """Richardson-extrapolated Bayes reverse kernels define the oracle generator."""
        p0 = skewed_p0(3, 2, seed=5)
        n = 4 if kind == "absorb" else 3
        kernel = NoiseKernel(kind, n)
        schedule = LogLinearSchedule()
        t = 0.6
        sig_bar = float(schedule.total(t))
        sig_t = float(schedule.rate(t))
        pt = exact_pt(p0, kernel, sig_bar)

        def rate_estimate(dt):
            table = exact_reverse_tables(p0, kernel, schedule, np.array([t, t - dt]))[0]
            return (table - np.eye(table.shape[0])) / dt

        d = 1e-3
        oracle_gen = (rate_estimate(d) / 3.0 - 2.0 * rate_estimate(d / 2)
                      + (8.0 / 3.0) * rate_estimate(d / 4))

        seqs = enumerate_sequences(n, 2)
        for a_idx, a in enumerate(seqs):
            if pt.probs[a_idx] <= 1e-12:
                continue
            scores = exact_concrete_score(pt, a)
            for pos in range(2):
                row = reverse_rate_row(kernel, sig_t, scores[pos], current=a[pos])
                for y in range(n):
                    if y == a[pos]:
                        continue
                    b = a.copy()
                    b[pos] = y
                    b_idx = sequence_to_index(b, n)
                    assert row[y] == pytest.approx(oracle_gen[a_idx, b_idx], abs=1e-8), (
                        f"rate {a}->{b} (pos {pos})")


class TestBatchedHelpers:
    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_sample_marginal_frequencies(self, kernel):
        rng = np.random.default_rng(1)
        x0 = np.ones((4000, 3), dtype=np.int64)
        sig = np.full(4000, np.log(2.0))
        x_t = sample_marginal(kernel, sig, x0, rng)
        expected = marginal(kernel, np.log(2.0), 1)
        freq = np.bincount(x_t.reshape(-1), minlength=kernel.n) / x_t.size
        np.testing.assert_allclose(freq, expected, atol=0.02)

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_ratio_table_matches_scalar(self, kernel):
        rng = np.random.default_rng(2)
        n_clean = kernel.n - (1 if kernel.kind == "absorb" else 0)
        x0 = rng.integers(0, n_clean, size=(3, 4))
        sig = rng.uniform(0.2, 2.0, size=3)
        x_t = sample_marginal(kernel, sig, x0, rng)
        table = ratio_table(kernel, sig, x0, x_t)
        for b in range(3):
            for l in range(4):
                for y in range(kernel.n):
                    if y == x_t[b, l]:
                        assert table[b, l, y] == 1.0
                        continue
                    expected = posterior_ratio(kernel, sig[b], x0[b, l], x_t[b, l], y)
                    assert table[b, l, y] == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_weight_table_matches_generator(self, kernel):
        rng = np.random.default_rng(3)
        x_t = rng.integers(0, kernel.n, size=(2, 5))
        sig_t = np.array([0.7, 1.9])
        w = weight_table(kernel, sig_t, x_t)
        q = kernel.generator()
        for b in range(2):
            for l in range(5):
                for y in range(kernel.n):
                    expected = 0.0 if y == x_t[b, l] else sig_t[b] * max(q[y, x_t[b, l]], 0.0)
                    assert w[b, l, y] == pytest.approx(expected, abs=1e-12)


class TestSemigroup:
    @pytest.mark.parametrize("kernel", ALL_KERNELS)
    def test_marginal_semigroup(self, kernel):
        """Corrupting by sig1 then sig2 equals corrupting by sig1+sig2."""
        sig1, sig2 = 0.6, 1.3
        t1 = kernel.transition_matrix(sig1)
        t2 = kernel.transition_matrix(sig2)
        composed = t1 @ t2
        direct = kernel.transition_matrix(sig1 + sig2)
        np.testing.assert_allclose(composed, direct, atol=1e-9)
        oracle_direct = matrix_exponential((sig1 + sig2) * kernel.generator())
        np.testing.assert_allclose(composed, oracle_direct, atol=1e-9)
