import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats as sps

from wflab.errors import ParameterError
from wflab.estimation import (
    ABSOLUTE_LOSS,
    QUADRATIC_LOSS,
    EstimationResult,
    Loss,
    Prior,
    StatsAccumulator,
    SufficientStats,
    bayes_estimator,
    estimates_from_arrays,
    lan_remainder,
    lan_statistic,
    likelihood_ratio_Z,
    log_likelihood_ratio,
    log_likelihood_ratio_from_stats,
    mle_riemann,
    mle_score,
    posterior_density,
    posterior_mean,
    sufficient_stats,
    uniform_prior,
    validate_loss,
    validate_prior,
)
from wflab.model import WFParams, wf_drift
from wflab.simulate import SamplePath, SimConfig, replicate_rng, simulate_batch, simulate_path, simulate_paths

SEL = WFParams(4, 2, 2)
TWO_POINT = SamplePath(values=[0.5, 0.6], dt=1.0)
CONSTANT = SamplePath(values=np.full(11, 0.5), dt=0.1)

paths_st = st.lists(st.floats(0.01, 0.99), min_size=2, max_size=40).map(
    lambda v: SamplePath(values=v, dt=0.01))


@pytest.fixture(scope="module")
def sim_path():
    return simulate_path(SEL, SimConfig(T=10, seed=7))


class TestSufficientStats:
    def test_two_point(self):
        st_ = sufficient_stats(TWO_POINT, 1, 1)
        assert st_.delta_x == pytest.approx(0.1, abs=1e-15)
        assert st_.mut_integral == pytest.approx(-0.2, abs=1e-15)
        assert st_.sel_integral == pytest.approx(0.24, abs=1e-15)
        assert st_.A == pytest.approx(0.1, abs=1e-15)
        assert st_.B == pytest.approx(0.06, abs=1e-15)

    def test_time_shift_invariance(self):
        shifted = SamplePath(values=TWO_POINT.values, dt=1.0, t0=17.5)
        assert sufficient_stats(shifted, 1, 1) == sufficient_stats(TWO_POINT, 1, 1)

    def test_degenerate(self):
        with pytest.raises(ParameterError) as info:
            sufficient_stats(SamplePath(values=[0.0, 0.0, 0.0], dt=0.1), 1, 1)
        assert info.value.code == "degenerate-path"

    @given(paths_st)
    def test_invariants(self, path):
        st_ = sufficient_stats(path, 1.5, 0.7)
        assert st_.B == pytest.approx(st_.sel_integral / 4, rel=1e-15)
        assert st_.B >= 0
        assert st_.A == pytest.approx(st_.delta_x / 2 - st_.mut_integral / 4, abs=1e-14)


class TestMLE:
    def test_two_point_riemann(self):
        assert mle_riemann(TWO_POINT, 1, 1).estimate == pytest.approx(1.25, rel=1e-12)

    def test_two_point_score(self):
        assert mle_score(TWO_POINT, 1, 1).estimate == pytest.approx(0.1 / 0.06, rel=1e-12)

    @pytest.mark.parametrize("fn", [mle_riemann, mle_score])
    def test_constant_path(self, fn):
        assert fn(CONSTANT, 1, 1).estimate == 0.0

    @given(paths_st, st.floats(0.2, 4), st.floats(0.2, 4))
    def test_identity(self, path, t1, t2):
        st_ = sufficient_stats(path, t1, t2)
        gap = mle_score(path, t1, t2).estimate - mle_riemann(path, t1, t2).estimate
        assert gap == pytest.approx(st_.delta_x / st_.sel_integral, abs=1e-12 * max(1, abs(gap)))

    def test_identity_on_simulated_path(self, sim_path):
        st_ = sufficient_stats(sim_path, 2, 2)
        gap = mle_score(sim_path, 2, 2).estimate - mle_riemann(sim_path, 2, 2).estimate
        assert abs(gap - st_.delta_x / st_.sel_integral) <= 1e-12

    def test_grid_argmax(self, sim_path):
        grid = np.arange(-10, 20, 1e-4)
        st_ = sufficient_stats(sim_path, 2, 2)
        ll = log_likelihood_ratio_from_stats(st_, grid, 0.0)
        assert abs(grid[np.argmax(ll)] - st_.A / st_.B) <= 1e-4
        # The path-level function agrees with the stats-level one.
        for s in (-1.0, 2.5, 7.0):
            assert log_likelihood_ratio(sim_path, s, 0.0, 2, 2) == pytest.approx(
                log_likelihood_ratio_from_stats(st_, s, 0.0), rel=1e-13)

    def test_json_keys(self):
        d = json.loads(mle_riemann(TWO_POINT, 1, 1).to_json())
        assert set(d) == {"method", "estimate", "T", "A", "B", "delta_x", "mut_integral", "sel_integral"}
        assert d["method"] == "mle_riemann" and d["estimate"] == pytest.approx(1.25)

    def test_dx_form_matches_girsanov_sum(self):
        # Direct discretization of ∫(μ'-μ)/σ² dX - ½∫(μ'²-μ²)/σ² dt for s' = 3, s = 0.
        rng = np.random.default_rng(0)
        path = SamplePath(values=0.5 + 0.4 * np.sin(np.cumsum(rng.normal(0, 0.05, 2001))), dt=1e-3)
        x = path.values
        xp, dx = x[:-1], np.diff(x)
        sig2 = xp * (1 - xp)
        m1, m0 = wf_drift(WFParams(3, 2, 2), xp), wf_drift(WFParams(0, 2, 2), xp)
        direct = np.sum((m1 - m0) / sig2 * dx) - 0.5 * np.sum((m1 ** 2 - m0 ** 2) / sig2) * path.dt
        left = log_likelihood_ratio(path, 3.0, 0.0, 2, 2, rule="left")
        assert left == pytest.approx(direct, rel=1e-10)


class TestLikelihoodRatio:
    def test_same_parameter(self, sim_path):
        assert log_likelihood_ratio(sim_path, 1.3, 1.3, 2, 2) == 0.0

    def test_two_point(self):
        assert log_likelihood_ratio(TWO_POINT, 1, 0, 1, 1) == pytest.approx(0.07, abs=1e-15)

    @given(paths_st, st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
    def test_cocycle_and_antisymmetry(self, path, s1, s2, s3):
        for mode in ("fixed", "stationary"):
            p = SamplePath(values=path.values, dt=path.dt, start_mode=mode)
            l12 = log_likelihood_ratio(p, s1, s2, 2, 2)
            l23 = log_likelihood_ratio(p, s2, s3, 2, 2)
            l13 = log_likelihood_ratio(p, s1, s3, 2, 2)
            assert l13 == pytest.approx(l12 + l23, abs=1e-12 * max(1, abs(l13)))
            assert log_likelihood_ratio(p, s2, s1, 2, 2) == pytest.approx(-l12, abs=1e-12)

    def test_stationary_start_adds_density_ratio(self):
        from wflab.model import stationary_log_density
        p = SamplePath(values=[0.3, 0.4], dt=1.0, start_mode="stationary")
        f = SamplePath(values=[0.3, 0.4], dt=1.0)
        extra = stationary_log_density(WFParams(2, 2, 2), 0.3) - stationary_log_density(WFParams(1, 2, 2), 0.3)
        assert log_likelihood_ratio(p, 2, 1, 2, 2) - log_likelihood_ratio(f, 2, 1, 2, 2) == pytest.approx(extra)

    def test_z_at_zero(self, sim_path):
        assert likelihood_ratio_Z(sim_path, 4, 0.0, 2, 2) == 1.0

    def test_z_is_exp_llr(self, sim_path):
        z = likelihood_ratio_Z(sim_path, 4, 1.5, 2, 2)
        assert math.log(z) == pytest.approx(log_likelihood_ratio(sim_path, 4 + 1.5 / math.sqrt(10), 4, 2, 2))

    def test_z_out_of_range(self, sim_path):
        with pytest.raises(ParameterError) as info:
            likelihood_ratio_Z(sim_path, 4, 100.0, 2, 2, support=(0, 8))
        assert info.value.code == "local-parameter-out-of-range"


class TestPriorAndLoss:
    @pytest.mark.parametrize("loss", [QUADRATIC_LOSS, ABSOLUTE_LOSS])
    def test_standard_losses_pass(self, loss):
        rep = validate_loss(loss)
        assert rep.passed, rep.flags

    def test_odd_loss_fails_a1(self):
        rep = validate_loss(Loss(lambda u: np.asarray(u, dtype=float)))
        assert not rep.flags["A1"]
        assert not rep.passed

    def test_decreasing_loss_fails_a2(self):
        rep = validate_loss(Loss(lambda u: np.sin(np.abs(u)) ** 2, 1.0, 0.0))
        assert not rep.flags["A2"]

    def test_exponential_loss_fails_majorant(self):
        rep = validate_loss(Loss(lambda u: np.expm1(np.abs(u)), 1.0, 2.0))
        assert not rep.flags["A3"]

    def test_uniform_prior_passes(self):
        assert validate_prior(uniform_prior(0, 8)).passed

    def test_negative_point_fails(self):
        grid = np.linspace(0, 1, 101)
        bad = Prior(lambda s: np.where(np.isclose(s, 0.5), -1.0, 1.0), (0, 1))
        rep = validate_prior(bad, grid)
        assert not rep.flags["nonnegative"]

    def test_half_mass_fails(self):
        rep = validate_prior(Prior(lambda s: np.full(np.shape(s), 0.5), (0, 1)))
        assert not rep.flags["unit_mass"]
        assert rep.details["mass"] == pytest.approx(0.5)

    def test_jump_fails_continuity(self):
        rep = validate_prior(Prior(lambda s: np.where(s < 0.5, 0.5, 1.5), (0, 1), A_maj=2.0))
        assert not rep.flags["continuous"]
        assert rep.flags["unit_mass"]

    def test_bad_support(self):
        with pytest.raises(ParameterError):
            Prior(lambda s: s, (1, 0))


class TestPosterior:
    def test_flat_prior_gaussian_shape(self):
        stats = SufficientStats.from_integrals(4.0, -16.0, 4.0)  # A = 6, B = 1
        grid, dens = posterior_density(stats, uniform_prior(-20, 20), 4001)
        assert grid[np.argmax(dens)] == pytest.approx(6.0, abs=0.01)
        np.testing.assert_allclose(dens, sps.norm.pdf(grid, 6.0, 1.0), atol=1e-10)

    def test_integrates_to_one(self):
        stats = SufficientStats(A=3.0, B=0.5, delta_x=0, mut_integral=0, sel_integral=2)
        prior = Prior(lambda s: 0.75 * (1 - s ** 2), (-1, 1))
        grid, dens = posterior_density(stats, prior, 2049)
        assert integrate.simpson(dens, x=grid) == pytest.approx(1.0, abs=1e-8)

    def test_flat_likelihood_in_quadratic_term(self):
        stats = SufficientStats(A=2.0, B=0.0, delta_x=0, mut_integral=0, sel_integral=0)
        grid, dens = posterior_density(stats, uniform_prior(0, 1), 101)
        assert np.all(np.diff(dens) > 0)
        np.testing.assert_allclose(dens, 2 * np.exp(2 * grid) / np.expm1(2), rtol=1e-10)

    def test_degenerate(self):
        stats = SufficientStats(A=1e4, B=1.0, delta_x=0, mut_integral=0, sel_integral=4)
        prior = Prior(lambda s: np.where(s < 0.5, 2.0 * (0.5 - s) * 4, 0.0), (0, 1), A_maj=10)
        with pytest.raises(ParameterError) as info:
            posterior_mean(stats, prior)
        assert info.value.code == "posterior-degenerate"


class TestBayes:
    def test_quadratic_loss_is_mean(self):
        stats = SufficientStats(A=400.0, B=100.0, delta_x=0, mut_integral=0, sel_integral=400)
        res = bayes_estimator(stats, uniform_prior(0, 8), QUADRATIC_LOSS, T=50)
        assert res.method == "bayes"
        assert res.estimate == pytest.approx(4.0, abs=0.01)

    @pytest.mark.parametrize("A, B, lo, hi", [(2.0, 0.5, 0, 8), (9.0, 3.0, 0, 4), (-1.0, 0.2, -3, 6)])
    def test_quadratic_matches_truncnorm_mean(self, A, B, lo, hi):
        stats = SufficientStats(A=A, B=B, delta_x=0, mut_integral=0, sel_integral=4 * B)
        m, sd = A / B, 1 / math.sqrt(B)
        exact = sps.truncnorm.mean((lo - m) / sd, (hi - m) / sd, loc=m, scale=sd)
        res = bayes_estimator(stats, uniform_prior(lo, hi), QUADRATIC_LOSS, T=10)
        assert res.estimate == pytest.approx(exact, abs=1e-6)
        assert posterior_mean(stats, uniform_prior(lo, hi)) == pytest.approx(exact, abs=1e-10)

    def test_absolute_loss_is_median(self):
        stats = SufficientStats(A=2.0, B=0.5, delta_x=0, mut_integral=0, sel_integral=2)
        m, sd = 4.0, math.sqrt(2)
        dist = sps.truncnorm((0 - m) / sd, (6 - m) / sd, loc=m, scale=sd)
        res = bayes_estimator(stats, uniform_prior(0, 6), ABSOLUTE_LOSS, T=10)
        assert res.estimate == pytest.approx(dist.median(), abs=1e-5)

    def test_peaked_prior(self):
        s0 = 2.0
        c = 1 / (math.sqrt(2 * math.pi) * 1e-3)
        prior = Prior(lambda s: c * np.exp(-0.5 * ((s - s0) / 1e-3) ** 2), (0, 8), A_maj=c, b_maj=0.0)
        stats = SufficientStats(A=5.0, B=1.0, delta_x=0, mut_integral=0, sel_integral=4)
        res = bayes_estimator(stats, prior, QUADRATIC_LOSS, T=10)
        assert res.estimate == pytest.approx(s0, abs=1e-4)

    def test_invalid_loss_rejected(self):
        stats = SufficientStats(A=1.0, B=1.0, delta_x=0, mut_integral=0, sel_integral=4)
        with pytest.raises(ParameterError):
            bayes_estimator(stats, uniform_prior(0, 1), Loss(lambda u: np.asarray(u, float)), T=1)

    def test_flat_prior_agrees_with_mle(self, sim_path):
        st_ = sufficient_stats(sim_path, 2, 2)
        mle = st_.A / st_.B
        res = bayes_estimator(st_, uniform_prior(mle - 30, mle + 30), QUADRATIC_LOSS, T=sim_path.T)
        assert res.estimate == pytest.approx(mle, abs=1e-8)


class TestLAN:
    def test_noise_free_path_gives_zero(self):
        dt, x = 1e-3, [0.3]
        for _ in range(1000):
            x.append(x[-1] + float(wf_drift(SEL, x[-1])) * dt)
        np.testing.assert_allclose(lan_statistic(SamplePath(values=x, dt=dt), SEL), 0.0, atol=1e-13)

    def test_reproducible(self):
        cfg = SimConfig(T=2, seed=3, start="stationary")
        a = lan_statistic(simulate_path(SEL, cfg), SEL)
        b = lan_statistic(simulate_path(SEL, cfg), SEL)
        np.testing.assert_array_equal(a, b)

    def test_selection_component_is_score(self, sim_path):
        # First component: ½ Σ (ΔX - μ dt) = derivative of the left-rule log-likelihood at s.
        st_ = sufficient_stats(sim_path, 2, 2, rule="left")
        score = st_.A - st_.B * 4
        assert lan_statistic(sim_path, SEL)[0] == pytest.approx(score / math.sqrt(sim_path.T), rel=1e-10)

    def test_mutation_components_flagged_outside_regime(self, sim_path):
        d = lan_statistic(sim_path, WFParams(4, 0.5, 2))
        assert np.isfinite(d[0]) and np.isnan(d[1:]).all()

    def test_remainder_zero_direction(self, sim_path):
        assert lan_remainder(sim_path, SEL, [0, 0, 0]) == 0.0

    def test_remainder_selection_only_outside_regime(self, sim_path):
        r = lan_remainder(sim_path, WFParams(4, 0.5, 0.5), [1, 0, 0])
        assert math.isfinite(r)
        with pytest.raises(ParameterError) as info:
            lan_remainder(sim_path, WFParams(4, 0.5, 0.5), [0, 1, 0])
        assert info.value.code == "lan-regime-required"

    def test_remainder_matches_expansion(self, sim_path):
        # log Z(u) = <u, Δ> - ½<Iu, u> + r for the selection direction.
        from wflab.model import selection_information
        u = 1.3
        st_ = sufficient_stats(sim_path, 2, 2, rule="left")
        logz = log_likelihood_ratio_from_stats(st_, 4 + u / math.sqrt(sim_path.T), 4)
        delta = lan_statistic(sim_path, SEL)[0]
        r = lan_remainder(sim_path, SEL, [u, 0, 0])
        assert logz == pytest.approx(u * delta - 0.5 * selection_information(SEL) * u * u + r, rel=1e-9)


class TestAccumulator:
    @pytest.mark.parametrize("rule", ["left", "right"])
    def test_matches_path_stats(self, rule):
        cfg = SimConfig(T=3, seed=12)
        paths = simulate_paths(SEL, cfg, 4)
        acc = StatsAccumulator(SEL, cfg.dt)
        simulate_batch(SEL, cfg.T, cfg.dt, [replicate_rng(12, r) for r in range(4)], observers=[acc])
        arrays = acc.stats_arrays(rule)
        for r, p in enumerate(paths):
            ref = sufficient_stats(p, 2, 2, rule)
            got = acc.stats(r, rule)
            for k in ("A", "B", "delta_x", "mut_integral", "sel_integral"):
                assert getattr(got, k) == pytest.approx(getattr(ref, k), rel=1e-11, abs=1e-13)
            assert estimates_from_arrays("mle_score", arrays)[r] == pytest.approx(mle_score(p, 2, 2, rule).estimate)
            assert estimates_from_arrays("mle_riemann", arrays)[r] == pytest.approx(
                mle_riemann(p, 2, 2, rule).estimate)

    def test_checkpoints_equal_shorter_runs(self):
        rngs = lambda: [replicate_rng(4, r) for r in range(3)]
        acc = StatsAccumulator(SEL, 1e-3)
        simulate_batch(SEL, 2.0, 1e-3, rngs(), observers=[acc], checkpoints=[1000])
        short = StatsAccumulator(SEL, 1e-3)
        simulate_batch(SEL, 1.0, 1e-3, rngs(), observers=[short])
        np.testing.assert_array_equal(acc.snapshots[1000].stats_arrays()["A"], short.stats_arrays()["A"])

    def test_lan_matches_path_statistic(self):
        cfg = SimConfig(T=1, seed=2, start="stationary")
        p = simulate_paths(SEL, cfg, 2)
        acc = StatsAccumulator(SEL, cfg.dt, lan=True)
        simulate_batch(SEL, 1.0, 1e-3, [replicate_rng(2, r) for r in range(2)], "stationary", [acc])
        for r in range(2):
            np.testing.assert_allclose(acc.lan_delta(1.0)[:, r], lan_statistic(p[r], SEL), rtol=1e-10)

    def test_unknown_method(self):
        with pytest.raises(ParameterError):
            estimates_from_arrays("bayes", {"sel_integral": np.ones(1)})

    def test_degenerate_marked_nan(self):
        d = {"A": np.array([1.0, 0.0]), "B": np.array([1.0, 0.0]), "delta_x": np.zeros(2),
             "mut_integral": np.zeros(2), "sel_integral": np.array([4.0, 0.0])}
        est = estimates_from_arrays("mle_score", d)
        assert est[0] == 1.0 and np.isnan(est[1])
