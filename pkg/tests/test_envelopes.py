import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plsgd import (SGDEnvelopeConfig, StepSchedule, elisseeff_bound,
                   envelope_next, expected_bound, generalization_bound,
                   hprisk_horizon, k_sequence, sgd_envelope, stability_bound)
from plsgd.envelopes import (RecursionParams, delta_tag, risk_product_bound,
                             slow_tail_bound, theta_closed_form,
                             theta_closed_form_expected)
from plsgd.errors import ProblemError

nonneg = st.floats(min_value=0.0, max_value=50.0, allow_nan=False)


class TestEnvelopeNext:
    def test_all_zero(self):
        assert envelope_next(0.0, 0.0, 0.0, 0.0) == 0.0

    def test_linear_degenerate(self):
        # beta = 0 collapses the quadratic to K_next = alpha K + 2 gamma
        assert envelope_next(2.0, 0.5, 0.0, 0.25) == pytest.approx(1.5, rel=1e-15)

    def test_golden_ratio_instance(self):
        got = envelope_next(1.0, 1.0, 1.0, 0.0)
        assert got == pytest.approx((1.0 + math.sqrt(5.0)) / 2.0, rel=1e-15)
        # constraint holds with equality
        assert got * got == pytest.approx(1.0 * got + 1.0, rel=1e-14)

    def test_negative_inputs_rejected(self):
        for bad in ((-1, 1, 1, 1), (1, -1, 1, 1), (1, 1, -1, 1), (1, 1, 1, -1)):
            with pytest.raises(ProblemError):
                envelope_next(*bad)

    @given(nonneg, st.floats(0, 2), nonneg, nonneg)
    @settings(max_examples=300, deadline=None)
    def test_constraint_equality_and_minimality(self, K, a, b2, g):
        nxt = envelope_next(K, a, b2, g)
        resid = nxt * nxt - (a * K + 2 * g) * nxt - b2 * K
        assert abs(resid) <= 1e-12 * max(nxt * nxt, 1.0)
        if nxt > 1e-9:
            smaller = nxt * (1.0 - 1e-6)
            assert smaller * smaller < (a * K + 2 * g) * smaller + b2 * K + 1e-300

    @given(nonneg, st.floats(0, 2), nonneg, nonneg, st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_each_argument(self, K, a, b2, g, bump):
        base = envelope_next(K, a, b2, g)
        assert envelope_next(K + bump, a, b2, g) >= base
        assert envelope_next(K, a + bump, b2, g) >= base
        assert envelope_next(K, a, b2 + bump, g) >= base
        assert envelope_next(K, a, b2, g + bump) >= base


class TestExpectedBound:
    def test_zero_horizon_is_initial_value(self):
        params = RecursionParams(np.ones(5), np.zeros(5), np.zeros(5), K0=1.0)
        assert expected_bound(params, 3.7, 0) == 3.7

    def test_identity_dynamics(self):
        params = RecursionParams(np.ones(6), np.zeros(6), np.zeros(6), K0=1.0)
        for T in range(7):
            assert expected_bound(params, 2.0, T) == 2.0

    def test_geometric_product(self):
        params = RecursionParams(np.full(3, 0.5), np.zeros(3), np.zeros(3), K0=1.0)
        assert expected_bound(params, 1.0, 3) == pytest.approx(0.125, rel=1e-15)

    def test_matches_direct_product_sum_form(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            T = int(rng.integers(1, 60))
            params = RecursionParams(rng.uniform(0, 1.2, T), rng.uniform(0, 1, T),
                                     rng.uniform(0, 1, T), K0=0.0)
            X0 = float(rng.uniform(0, 4))
            direct = math.fsum(
                [float(np.prod(params.alpha)) * X0]
                + [float(np.prod(params.alpha[t + 1:])) * float(params.gamma[t])
                   for t in range(T)])
            assert expected_bound(params, X0, T) == pytest.approx(direct, rel=1e-12, abs=1e-12)


def _theta_cfg(mu=1.0, L=1.0, sigma=1.0, b=1, d=10, X0=0.5, C1=2.0, C2=2.0):
    return SGDEnvelopeConfig(L=L, mu=mu, sigma=sigma, b=b, d=d,
                             schedule=StepSchedule.theta_kind(L, mu), X0=X0,
                             C1=C1, C2=C2)


class TestSgdEnvelope:
    def test_noiseless_pure_geometric_decay(self):
        cfg = _theta_cfg(mu=0.5, sigma=0.0, X0=1.0)
        rep = sgd_envelope(cfg, 50, deltas=(0.1,))
        alphas = rep.params.alpha
        expect = np.concatenate([[1.0], np.cumprod(alphas)])
        np.testing.assert_allclose(rep.K, expect, rtol=1e-12)

    def test_theta_head_closed_form(self):
        # before the schedule switch the closed form is the geometric decay
        # plus the noise floor C2 sigma^2/(mu b)
        cfg = _theta_cfg(mu=0.25, L=1.0, sigma=1.0, b=2, X0=1.0)
        tau = cfg.schedule.tau
        for t in range(tau + 1):
            want = (1 - 0.25) ** t * 1.0 + cfg.C2 * 1.0 / (0.25 * 2)
            assert theta_closed_form(cfg, t) == pytest.approx(want, rel=1e-12)

    def test_minimal_below_closed_form(self):
        cfg = _theta_cfg(mu=0.3, L=2.0, sigma=1.5, X0=2.0)
        rep = sgd_envelope(cfg, 500, deltas=(0.1,))
        assert np.all(rep.K <= rep.closed_form * (1 + 1e-9) + 1e-12)

    def test_monotone_in_noise_and_constants(self):
        base = sgd_envelope(_theta_cfg(sigma=1.0), 100, deltas=(0.1,)).K
        hi_sig = sgd_envelope(_theta_cfg(sigma=2.0), 100, deltas=(0.1,)).K
        hi_c1 = sgd_envelope(_theta_cfg(C1=4.0), 100, deltas=(0.1,)).K
        hi_c2 = sgd_envelope(_theta_cfg(C2=4.0), 100, deltas=(0.1,)).K
        hi_x0 = sgd_envelope(_theta_cfg(X0=1.0), 100, deltas=(0.1,)).K
        for hi in (hi_sig, hi_c1, hi_c2, hi_x0):
            assert np.all(hi >= base - 1e-15)

    def test_envelope_monotone_across_deltas(self):
        rep = sgd_envelope(_theta_cfg(), 50)
        for t in (0, 10, 50):
            vals = [rep.envelopes[d][t] for d in sorted(rep.deltas, reverse=True)]
            assert vals == sorted(vals)

    def test_expected_below_envelope_at_boundary_delta(self):
        # log(e/delta) = 2 at delta = 1/e, and K dominates the mean bound
        rep = sgd_envelope(_theta_cfg(), 200, deltas=(0.1,))
        assert np.all(rep.expected <= 2.0 * rep.K + 1e-15)

    def test_delta_domain_enforced(self):
        with pytest.raises(ProblemError):
            sgd_envelope(_theta_cfg(), 10, deltas=(0.5,))
        with pytest.raises(ProblemError):
            sgd_envelope(_theta_cfg(), 10, deltas=(0.0,))

    def test_slow_schedule_tail_coefficient(self):
        # arithmetic: (16 C1 + 4 C2 d) L sigma^2 c^2 / (b d (1 - mu c)) = 2.8
        cfg = SGDEnvelopeConfig(L=1.0, mu=1.0, sigma=1.0, b=1, d=10,
                                schedule=StepSchedule.slow_kind(0.5, 1.0),
                                X0=0.0, C1=1.0, C2=1.0)
        assert slow_tail_bound(cfg) == pytest.approx(2.8, rel=1e-12)
        rep = sgd_envelope(cfg, 2000, deltas=(0.1,))
        t = np.arange(2001)
        scaled = rep.K * t ** (1.0 * 0.5)
        assert np.all(scaled <= 2.8 + 1e-9)

    def test_closed_form_expected_dominates_running_mean_bound(self):
        cfg = _theta_cfg(mu=0.5, L=1.0)
        rep = sgd_envelope(cfg, 300, deltas=(0.1,))
        closed = theta_closed_form_expected(cfg, np.arange(301))
        assert np.all(rep.expected <= closed * (1 + 1e-9))

    def test_delta_tags(self):
        assert delta_tag(0.1) == "d10"
        assert delta_tag(0.05) == "d05"
        assert delta_tag(0.01) == "d01"

    def test_long_horizon_accuracy_vs_high_precision(self):
        # 50-digit reference: the forward recursions lose nothing material
        # over 1e4 steps (the contraction damps rounding instead of
        # accumulating it)
        from mpmath import mp, mpf
        from mpmath import sqrt as msqrt
        from plsgd.envelopes import recursion_params
        mp.dps = 50
        cfg = _theta_cfg(mu=0.1, L=2.0, sigma=2.0, X0=1.0)
        T = 10_000
        params = recursion_params(cfg, T)
        K = k_sequence(params)
        k = mpf(1.0)
        for t in range(T):
            al, b2, ga = mpf(params.alpha[t]), mpf(params.beta_sq[t]), mpf(params.gamma[t])
            lin = al * k + 2 * ga
            k = (lin + msqrt(lin * lin + 4 * b2 * k)) / 2
            if (t + 1) % 2000 == 0:
                assert abs(K[t + 1] - float(k)) / float(k) <= 1e-10
        e = mpf(1.0)
        for t in range(T):
            e = mpf(params.alpha[t]) * e + mpf(params.gamma[t])
        got = expected_bound(params, 1.0, T)
        assert abs(got - float(e)) / float(e) <= 1e-10


class TestMgfEnumerationOracle:
    """Small-horizon exhaustive check that K_T really certifies the
    sub-exponential tail: extremal in-hypothesis noise is sign-symmetric
    scaled by sqrt(X_t), and the additive part sits at its cap."""

    @staticmethod
    def _enumerate(alpha, beta_sq, gamma, X0, T):
        beta = math.sqrt(beta_sq)
        X = np.array([X0])
        for _ in range(T):
            s = np.sqrt(X)
            X = np.concatenate([alpha * X + beta * s + gamma,
                                alpha * X - beta * s + gamma])
        return X

    @pytest.mark.parametrize("alpha", [0.5, 0.9])
    @pytest.mark.parametrize("gamma", [0.1, 0.5])
    @pytest.mark.parametrize("frac", [0.5, 1.0])
    @pytest.mark.parametrize("X0", [0.0, 1.0, 3.0])
    def test_certificate_on_extremal_instances(self, alpha, gamma, frac, X0):
        beta_sq = frac * 4.0 * alpha * gamma  # keeps the recursion nonnegative
        for T in (1, 3, 6):
            params = RecursionParams(np.full(T, alpha), np.full(T, beta_sq),
                                     np.full(T, gamma), K0=X0)
            K_T = k_sequence(params)[T]
            X = self._enumerate(alpha, beta_sq, gamma, X0, T)
            assert np.all(X >= -1e-12)
            w = 1.0 / len(X)
            for lam_frac in (0.25, 0.5, 0.75, 1.0):
                lam = lam_frac / K_T
                mgf = float(w * np.exp(lam * X).sum())
                assert mgf <= math.exp(lam * K_T) * (1.0 + 1e-9)


class TestStabilityFormulas:
    def test_stability_arithmetic(self):
        assert stability_bound(1.0, 1, 1.0, 1.0, 1, 100) == pytest.approx(0.04, rel=1e-15)

    def test_stability_scalings(self):
        base = stability_bound(1.0, 50, 1.0, 0.5, 2, 100)
        assert stability_bound(1.0, 50, 1.0, 0.5, 2, 200) == pytest.approx(base / 2)
        assert stability_bound(2.0, 50, 1.0, 0.5, 2, 100) == pytest.approx(4 * base)
        assert stability_bound(1.0, 50, 1.0, 0.5, 4, 100) == pytest.approx(2 * base)
        assert stability_bound(1.0, 100, 1.0, 0.5, 2, 100) > base

    def test_stability_small_constant_limit(self):
        # c -> 0 with T^{Lc} -> 1 leaves 2 rho^2 b / (L n)
        val = stability_bound(1.0, 1000, 1.0, 1e-9, 1, 100)
        assert val == pytest.approx(2.0 / (1.0 * 100), rel=1e-6)

    def test_nonpositive_n_rejected(self):
        with pytest.raises(ProblemError):
            stability_bound(1.0, 1, 1.0, 1.0, 1, 0)

    def test_elisseeff_arithmetic(self):
        got = elisseeff_bound(1.0, 100, 0.04, 0.1)
        assert got == pytest.approx(math.sqrt(25.0 / 20.0), rel=1e-15)

    def test_elisseeff_stability_free(self):
        assert elisseeff_bound(1.0, 50, 0.0, 0.01) == pytest.approx(1.0, rel=1e-15)

    def test_elisseeff_scale_in_range_bound(self):
        # alpha-dominated regime scales like sqrt(M)
        lo = elisseeff_bound(1.0, 100, 10.0, 0.1)
        hi = elisseeff_bound(4.0, 100, 10.0, 0.1)
        assert hi / lo == pytest.approx(2.0, rel=1e-3)

    def test_generalization_arithmetic(self):
        got = generalization_bound(1.0, 1.0, 1, 1.0, 1.0, 1, 100, 0.1)
        assert got == pytest.approx(math.sqrt(25.0 / 20.0), rel=1e-15)
        assert got == pytest.approx(1.118, abs=1e-3)

    def test_generalization_rho_zero(self):
        assert generalization_bound(1.0, 0.0, 10, 1.0, 1.0, 1, 50, 0.01) == \
            pytest.approx(1.0, rel=1e-15)

    def test_generalization_root_n_scaling(self):
        big_T = 10_000  # stability term dominates the M^2 offset
        lo = generalization_bound(1.0, 1.0, big_T, 1.0, 1.0, 1, 100, 0.1)
        hi = generalization_bound(1.0, 1.0, big_T, 1.0, 1.0, 1, 400, 0.1)
        assert lo / hi == pytest.approx(2.0, rel=1e-3)

    def test_two_routes_agree(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            M = rng.uniform(0.5, 5)
            rho = rng.uniform(0.1, 3)
            T = int(rng.integers(1, 2000))
            L = rng.uniform(0.2, 3)
            c = rng.uniform(0.01, 2)
            b = int(rng.integers(1, 8))
            n = int(rng.integers(10, 5000))
            delta = rng.uniform(0.01, 0.99)
            via_alpha = elisseeff_bound(M, n, stability_bound(rho, T, L, c, b, n), delta)
            direct = generalization_bound(M, rho, T, L, c, b, n, delta)
            assert direct == pytest.approx(via_alpha, rel=1e-12)

    def test_delta_domain(self):
        with pytest.raises(ProblemError):
            generalization_bound(1, 1, 1, 1, 1, 1, 100, 1.5)
        with pytest.raises(ProblemError):
            elisseeff_bound(1, 100, 0.1, 0.0)


class TestHorizon:
    def test_unit_parameters(self):
        T, c = hprisk_horizon(1, 1, 1, 1, 1, 1, 1, 100)
        assert T == 7  # ceil(100 / 16)
        assert c == 0.5

    def test_linear_in_samples(self):
        T1, _ = hprisk_horizon(1, 1, 1, 1, 1, 1, 1, 1600)
        T4, _ = hprisk_horizon(1, 1, 1, 1, 1, 1, 1, 6400)
        assert T4 == 4 * T1

    def test_inverse_cubic_in_batch(self):
        T1, _ = hprisk_horizon(1, 1, 1, 1, 1, 1, 1, 12800)
        T2, _ = hprisk_horizon(1, 1, 1, 1, 1, 1, 2, 12800)
        assert T1 == 8 * T2

    def test_floor_of_one(self):
        T, _ = hprisk_horizon(1, 1, 1, 100, 10, 1, 4, 10)
        assert T == 1

    def test_product_bound_positive(self):
        assert risk_product_bound(1.0, 0.5, 1.0, 2.0, 1.0, 1, 100, 0.1) > 0
