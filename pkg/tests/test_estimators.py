import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from gpdlm import (EstimatorConfig, ISO_RBF, KernelModel, MarginalProjection,
                   SamplingError, VariationalPosterior, bmc_gradient,
                   build_tilted_sampler, make_likelihood, objective_gradient,
                   point_stream, product_sample, product_sample_batch,
                   reparam_gradient_exact, required_sample_size,
                   select_widths, smooth_bmc_gradient, ups_gradient,
                   vectorized_product_sample)
from gpdlm.likelihoods import DerivativeBounds, Likelihood
from gpdlm.objectives import ObjectiveSpec


class FlatLikelihood(Likelihood):
    """Constant density in f; the tilted distribution reduces to q."""

    kind = "flat"

    def __init__(self, level=0.7):
        self.level = level

    def log_phi(self, y, f):
        return np.full_like(np.asarray(f, dtype=float), math.log(self.level))

    def log_phi_d1(self, y, f):
        return np.zeros_like(np.asarray(f, dtype=float))

    def log_phi_d2(self, y, f):
        return np.zeros_like(np.asarray(f, dtype=float))

    def ell_max(self, y):
        return self.level

    def f_mode(self, y):
        return 0.0

    def conditional_mean(self, f):
        return f


def _proj(a1, b1=0.0, b2=0.0):
    a = np.asarray(a1, dtype=float)
    return MarginalProjection(a1=a, b1=b1, a2=a, b2=b2)


def _simple_q(m, L):
    return VariationalPosterior(m=np.asarray(m, dtype=float),
                                L=np.asarray(L, dtype=float))


# ---------------------------------------------------------------------------
# exact gradients
# ---------------------------------------------------------------------------

def test_exact_gradient_matches_gaussian_closed_form():
    lik = make_likelihood("gaussian", variance=0.4)
    q = _simple_q([0.7, -0.2], [[0.8, 0.0], [0.1, 0.5]])
    proj = _proj([0.6, -0.3], b1=0.1, b2=0.2)
    mu, v = proj.moments(q)
    g = reparam_gradient_exact(1.3, lik, q, proj)
    s2 = v + 0.4
    assert g.d_mu == pytest.approx((mu - 1.3) / s2, rel=1e-12)
    assert g.d_v == pytest.approx(0.5 / s2 - 0.5 * (1.3 - mu) ** 2 / s2 ** 2,
                                  rel=1e-12)
    assert np.allclose(g.grad_m, g.d_mu * proj.a1)
    assert np.allclose(g.grad_V, g.d_v * np.outer(proj.a2, proj.a2))
    # factor-space gradient follows the V chain rule
    assert np.allclose(g.grad_LV, np.tril(2.0 * g.grad_V @ q.L))


def test_exact_gradient_probit_direction_and_symmetry():
    lik = make_likelihood("probit")
    q = _simple_q([0.0, 0.0], np.eye(2))
    proj = _proj([0.5, 0.5], b2=0.1)
    mu, v = proj.moments(q)
    assert mu == 0.0
    g1 = reparam_gradient_exact(1, lik, q, proj)
    g0 = reparam_gradient_exact(0, lik, q, proj)
    # symbolic derivative of -log Phi(t mu / sqrt(v+1)) at mu = 0
    pdf0 = 1.0 / math.sqrt(2.0 * math.pi)
    expected = -(2 * 1 - 1) * (pdf0 / 0.5) / math.sqrt(v + 1.0)
    assert g1.d_mu == pytest.approx(expected, rel=1e-12)
    # opposite labels at mu = 0 give equal-and-opposite mean gradients
    assert g1.d_mu == pytest.approx(-g0.d_mu, rel=1e-12)
    assert np.allclose(g1.grad_m, -g0.grad_m)


def test_exact_gradient_matches_fd_of_analytic_loss():
    # gaussian and probit exact paths against central differences of the
    # closed-form loss in (mu, v)
    h = 1e-5
    cases = [(make_likelihood("gaussian", variance=0.4), 1.3),
             (make_likelihood("probit"), 1),
             (make_likelihood("probit"), 0)]
    for lik, y in cases:
        for mu, v in ((0.0, 1.0), (-1.2, 0.5), (0.7, 2.0)):
            q = _simple_q([mu], [[math.sqrt(v)]])
            proj = _proj([1.0], b2=0.0)
            g = reparam_gradient_exact(y, lik, q, proj)
            fd_mu = (lik.analytic_log_predictive(mu + h, v, y)
                     - lik.analytic_log_predictive(mu - h, v, y)) / (2 * h)
            fd_v = (lik.analytic_log_predictive(mu, v + h, y)
                    - lik.analytic_log_predictive(mu, v - h, y)) / (2 * h)
            assert abs(g.d_mu - fd_mu) <= 1e-5 * max(1.0, abs(fd_mu))
            assert abs(g.d_v - fd_v) <= 1e-5 * max(1.0, abs(fd_v))


def test_exact_gradient_quadrature_matches_fd_for_poisson():
    from gpdlm.objectives import nlog_predictive_terms
    lik = make_likelihood("poisson-exp")
    q = _simple_q([0.4, 0.1], [[0.9, 0.0], [-0.2, 0.6]])
    proj = _proj([0.8, -0.4], b2=0.3)
    mu, v = proj.moments(q)
    g = reparam_gradient_exact(3, lik, q, proj)
    h = 1e-5
    fd_mu = (nlog_predictive_terms(lik, [mu + h], [v], [3], nodes=64)[0]
             - nlog_predictive_terms(lik, [mu - h], [v], [3], nodes=64)[0]) / (2 * h)
    fd_v = (nlog_predictive_terms(lik, [mu], [v + h], [3], nodes=64)[0]
            - nlog_predictive_terms(lik, [mu], [v - h], [3], nodes=64)[0]) / (2 * h)
    assert g.d_mu == pytest.approx(fd_mu, rel=1e-6)
    assert g.d_v == pytest.approx(fd_v, rel=1e-6)


# ---------------------------------------------------------------------------
# biased Monte Carlo
# ---------------------------------------------------------------------------

def test_bmc_single_draw_matches_hand_evaluation():
    lik = make_likelihood("probit")
    q = _simple_q([0.3], [[0.9]])
    proj = _proj([1.0], b2=0.05)
    mu, v = proj.moments(q)
    cfg = EstimatorConfig(kind="bmc", samples=1, rng_seed=11)
    g = bmc_gradient(1, lik, q, proj, cfg, step=4, index=2)
    eps = point_stream(11, 4, 2).standard_normal(1)[0]
    f = mu + math.sqrt(v) * eps
    p, p1, p2 = lik.phi_triplet(1, np.asarray(f))
    assert g.d_mu == pytest.approx(-p1 / p, rel=1e-12)
    assert g.d_v == pytest.approx(-0.5 * p2 / p, rel=1e-12)


def test_bmc_deterministic_at_zero_variance():
    lik = make_likelihood("gaussian", variance=0.5)
    q = _simple_q([0.4], [[1e-8]])
    proj = _proj([1.0], b2=0.0)
    cfg = EstimatorConfig(kind="bmc", samples=3, rng_seed=0)
    g = bmc_gradient(0.9, lik, q, proj, cfg)
    e = reparam_gradient_exact(0.9, lik, q, proj)
    assert g.d_mu == pytest.approx(e.d_mu, rel=1e-6)
    assert g.d_v == pytest.approx(e.d_v, rel=1e-4)


def test_bmc_large_sample_mean_approaches_exact():
    lik = make_likelihood("probit")
    q = _simple_q([-0.5], [[1.0]])
    proj = _proj([1.0], b2=0.2)
    exact = reparam_gradient_exact(1, lik, q, proj)
    cfg = EstimatorConfig(kind="bmc", samples=10_000, rng_seed=5)
    means = np.mean([bmc_gradient(1, lik, q, proj, cfg, step=r).d_mu
                     for r in range(100)])
    assert abs(means - exact.d_mu) <= 0.01 * abs(exact.d_mu)


def test_bmc_bias_decays_with_sample_count():
    lik = make_likelihood("probit")
    q = _simple_q([-1.0], [[1.0]])
    proj = _proj([1.0], b2=0.3)
    exact = reparam_gradient_exact(1, lik, q, proj)
    bias = {}
    for L in (1, 10, 100, 1000):
        cfg = EstimatorConfig(kind="bmc", samples=L, rng_seed=9)
        est = np.mean([bmc_gradient(1, lik, q, proj, cfg, step=r).d_mu
                       for r in range(100)])
        bias[L] = abs(est - exact.d_mu)
    # nonincreasing across decades, allowing one noise-level inversion
    inversions = sum(bias[a] < bias[b]
                     for a, b in ((1, 10), (10, 100), (100, 1000)))
    assert inversions <= 1
    assert bias[1000] < bias[1]


def test_bmc_all_zero_phi_flag():
    lik = FlatLikelihood(level=1.0)

    class DeadLikelihood(FlatLikelihood):
        def log_phi(self, y, f):
            return np.full_like(np.asarray(f, dtype=float), -np.inf)

    q = _simple_q([0.0], [[1.0]])
    proj = _proj([1.0], b2=0.0)
    cfg = EstimatorConfig(kind="bmc", samples=4, rng_seed=0)
    g = bmc_gradient(0, DeadLikelihood(), q, proj, cfg)
    assert g.d_mu == 0.0 and g.d_v == 0.0
    assert g.telemetry["zero_phi_points"] == 1


# ---------------------------------------------------------------------------
# smoothed Monte Carlo
# ---------------------------------------------------------------------------

def test_smooth_bmc_reduces_to_bmc_at_zero_nu():
    lik = make_likelihood("poisson-exp")
    q = _simple_q([0.2], [[0.8]])
    proj = _proj([1.0], b2=0.1)
    plain = EstimatorConfig(kind="bmc", samples=7, rng_seed=3)
    smooth = EstimatorConfig(kind="smooth-bmc", samples=7, nu=0.0, rng_seed=3)
    g1 = bmc_gradient(2, lik, q, proj, plain, step=6, index=1)
    g2 = smooth_bmc_gradient(2, lik, q, proj, smooth, step=6, index=1)
    assert g1.d_mu == g2.d_mu and g1.d_v == g2.d_v


def test_smooth_bmc_vanishes_for_large_nu():
    lik = make_likelihood("poisson-exp")
    q = _simple_q([0.2], [[0.8]])
    proj = _proj([1.0], b2=0.1)
    cfg = EstimatorConfig(kind="smooth-bmc", samples=7, nu=1e12, rng_seed=3)
    g = smooth_bmc_gradient(2, lik, q, proj, cfg)
    assert abs(g.d_mu) < 1e-10 and abs(g.d_v) < 1e-10


def test_smooth_bmc_perturbation_bound():
    # |smooth - plain| <= nu / (sum phi + nu) * |plain|
    lik = make_likelihood("poisson-exp")
    q = _simple_q([0.1], [[0.6]])
    proj = _proj([1.0], b2=0.2)
    nu = 1e-4
    for step in range(20):
        plain = bmc_gradient(
            2, lik, q, proj,
            EstimatorConfig(kind="bmc", samples=10, rng_seed=1), step=step)
        smooth = smooth_bmc_gradient(
            2, lik, q, proj,
            EstimatorConfig(kind="smooth-bmc", samples=10, nu=nu, rng_seed=1),
            step=step)
        mu, v = proj.moments(q)
        eps = point_stream(1, step, 0).standard_normal(10)
        f = mu + math.sqrt(v) * eps
        s = float(np.sum(np.exp(lik.log_phi(2, f))))
        bound = nu / (s + nu) * abs(plain.d_mu) + 1e-12
        assert abs(smooth.d_mu - plain.d_mu) <= bound * (1.0 + 1e-9)


# ---------------------------------------------------------------------------
# tilted sampler
# ---------------------------------------------------------------------------

def test_width_radius_and_m2_examples():
    s = build_tilted_sampler(FlatLikelihood(), 0, mu=0.0, sigma2=1.0)
    # flat density keeps m1 = ell_max so only n = 1 qualifies
    assert s.n == 1 and s.m2 == 1.0

    from gpdlm.estimators import _width_radius
    r4 = _width_radius(4, np.array([1.0]))[0]
    assert r4 == pytest.approx(math.sqrt(math.log(4.0) / (1.0 - 0.25)), rel=1e-12)
    assert r4 == pytest.approx(1.3596, abs=1e-4)
    assert 1.0 / math.sqrt(9) == pytest.approx(1.0 / 3.0)


def test_width_selection_misaligned_prefers_wide():
    lik = make_likelihood("probit")
    n_aligned = select_widths(lik, np.array([1]), np.array([2.0]),
                              np.array([1.0]))[0]
    n_misaligned = select_widths(lik, np.array([1]), np.array([-3.0]),
                                 np.array([1.0]))[0]
    assert n_misaligned > n_aligned


def test_envelope_holds_on_grid():
    cases = [
        (make_likelihood("probit"), 1, -3.0, 1.0),
        (make_likelihood("probit"), 0, 2.0, 0.5),
        (make_likelihood("gaussian", variance=0.3), 1.5, 0.0, 1.0),
        (make_likelihood("poisson-exp"), 4, -1.0, 0.8),
        (make_likelihood("poisson-exp"), 0, 1.0, 2.0),
        (make_likelihood("logistic"), 1, -2.0, 1.5),
        (make_likelihood("student-t", nu=3.0, variance=1.0), 2.0, -1.0, 1.0),
        (FlatLikelihood(), 0, 0.0, 1.0),
    ]
    for lik, y, mu, s2 in cases:
        samp = build_tilted_sampler(lik, y, mu, s2)
        grid = np.linspace(mu - 10 * samp.proposal_std,
                           mu + 10 * samp.proposal_std, 10_000)
        assert float(np.min(samp.envelope_slack(grid))) >= -1e-9
        assert float(np.max(samp.log_accept_ratio(grid))) <= 1e-12


def test_product_sample_flat_likelihood_recovers_q():
    samp = build_tilted_sampler(FlatLikelihood(), 0, mu=1.3, sigma2=0.49)
    rng = np.random.default_rng(0)
    tel = {}
    draws = product_sample_batch(samp, rng, 40_000, telemetry=tel)
    assert abs(np.mean(draws) - 1.3) < 3.0 * 0.7 / math.sqrt(40_000)
    assert abs(np.std(draws) - 0.7) < 0.01
    # n = 1 and flat density accept every proposal
    assert tel["rejected_samples"] == 0


def _tilted_cdf_on_grid(lik, y, mu, sigma2, span=12.0, num=200_001):
    sig = math.sqrt(sigma2)
    grid = np.linspace(mu - span * sig, mu + span * sig, num)
    log_q = -0.5 * (grid - mu) ** 2 / sigma2
    dens = np.exp(log_q + lik.log_phi(y, grid))
    cdf = np.cumsum(dens)
    cdf /= cdf[-1]
    return grid, cdf


def _ks_against_grid(draws, grid, cdf):
    draws = np.sort(draws)
    cdf_at = np.interp(draws, grid, cdf)
    n = draws.shape[0]
    upper = np.max(np.abs(cdf_at - np.arange(1, n + 1) / n))
    lower = np.max(np.abs(cdf_at - np.arange(0, n) / n))
    return max(upper, lower)


def test_product_sample_matches_conjugate_gaussian_product():
    lik = make_likelihood("gaussian", variance=0.5)
    y, mu, v = 1.8, -0.4, 0.9
    samp = build_tilted_sampler(lik, y, mu, v)
    rng = np.random.default_rng(1)
    draws = product_sample_batch(samp, rng, 100_000)
    vt = 1.0 / (1.0 / v + 1.0 / 0.5)
    mt = vt * (mu / v + y / 0.5)
    # empirical CDF against the exact product-normal CDF
    from scipy.special import ndtr
    z = (np.sort(draws) - mt) / math.sqrt(vt)
    n = draws.shape[0]
    ks = np.max(np.abs(ndtr(z) - np.arange(1, n + 1) / n))
    assert ks < 0.01
    assert np.mean(draws) == pytest.approx(mt, abs=4 * math.sqrt(vt / n))


def test_product_sample_probit_tilts_towards_positive():
    lik = make_likelihood("probit")
    samp = build_tilted_sampler(lik, 1, mu=-3.0, sigma2=1.0)
    rng = np.random.default_rng(2)
    draws = product_sample_batch(samp, rng, 30_000)
    grid, cdf = _tilted_cdf_on_grid(lik, 1, -3.0, 1.0)
    assert _ks_against_grid(draws, grid, cdf) < 0.01
    assert np.mean(draws) > -3.0
    # grid-density oracle for the tilted mean
    dens_mean = np.trapezoid(grid * np.gradient(cdf, grid), grid)
    assert np.mean(draws) == pytest.approx(dens_mean, abs=0.05)


def test_single_product_sample_and_attempt_cap():
    lik = make_likelihood("probit")
    samp = build_tilted_sampler(lik, 1, mu=0.5, sigma2=1.0)
    tel = {}
    val = product_sample(samp, np.random.default_rng(3), telemetry=tel)
    assert np.isfinite(val)
    assert tel["accepted_samples"] == 1
    with pytest.raises(SamplingError):
        product_sample(samp, np.random.default_rng(3), max_attempts=0)


def test_vectorized_hybrid_matches_per_point_distribution():
    rng_cfg = np.random.default_rng(40)
    rng1 = np.random.default_rng(4)
    rng2 = np.random.default_rng(5)
    liks = [make_likelihood("probit"), make_likelihood("logistic"),
            make_likelihood("poisson-exp"),
            make_likelihood("gaussian", variance=0.5)]
    n_draws = 100_000
    for k in range(10):
        lik = liks[k % len(liks)]
        mu = float(rng_cfg.uniform(-2.0, 2.0))
        s2 = float(rng_cfg.uniform(0.3, 1.5))
        if lik.kind == "poisson-exp":
            y = int(rng_cfg.integers(0, 6))
        elif lik.kind == "gaussian":
            y = float(rng_cfg.normal())
        else:
            y = int(rng_cfg.integers(0, 2))
        samp = build_tilted_sampler(lik, y, mu, s2)
        a = product_sample_batch(samp, rng1, n_draws)
        b, tel = vectorized_product_sample([samp] * n_draws, rng2)
        assert ks_2samp(a, b).pvalue > 0.01, (lik.kind, y, mu, s2)
        hist = tel["rounds_histogram"]
        assert sum(hist.values()) == n_draws


def test_vectorized_round_one_accepts_everything_for_flat_width_one():
    samp = build_tilted_sampler(FlatLikelihood(), 0, mu=0.0, sigma2=1.0)
    draws, tel = vectorized_product_sample([samp] * 500,
                                           np.random.default_rng(6))
    assert tel["rounds_histogram"][1] == 500
    assert tel["rounds_histogram"]["individual"] == 0
    assert tel["fallback_indices"] == []


def test_aligned_sampler_acceptance_rate():
    lik = make_likelihood("gaussian", variance=1.0)
    samp = build_tilted_sampler(lik, 0.5, mu=0.0, sigma2=0.25)
    assert samp.n == 1
    tel = {}
    product_sample_batch(samp, np.random.default_rng(7), 20_000, telemetry=tel)
    rate = tel["accepted_samples"] / (tel["accepted_samples"]
                                      + tel["rejected_samples"])
    assert rate >= 0.25


# ---------------------------------------------------------------------------
# unbiased product sampling gradients
# ---------------------------------------------------------------------------

def test_ups_flat_likelihood_score_averages_to_zero():
    q = _simple_q([0.0], [[1.0]])
    proj = _proj([1.0], b2=0.0)
    cfg = EstimatorConfig(kind="ups", samples=50_000, rng_seed=8)
    g = ups_gradient(0, FlatLikelihood(), q, proj, cfg)
    assert abs(g.d_mu) < 3.0 / math.sqrt(50_000)
    assert abs(g.d_v) < 3.0 / math.sqrt(50_000)


def test_ups_unbiased_against_gaussian_conjugate_oracle():
    lik = make_likelihood("gaussian", variance=0.5)
    q = _simple_q([-0.4], [[math.sqrt(0.9)]])
    proj = _proj([1.0], b2=0.0)
    exact = reparam_gradient_exact(1.8, lik, q, proj)
    cfg = EstimatorConfig(kind="ups", samples=100_000, rng_seed=9)
    g = ups_gradient(1.8, lik, q, proj, cfg)
    v = 0.9
    vt = 1.0 / (1.0 / v + 2.0)
    se_mu = math.sqrt(vt / v ** 2 / 100_000)
    assert abs(g.d_mu - exact.d_mu) <= 3.0 * se_mu


def test_ups_probit_matches_exact_within_standard_errors():
    lik = make_likelihood("probit")
    q = _simple_q([-0.8], [[1.1]])
    proj = _proj([1.0], b2=0.15)
    mu, v = proj.moments(q)
    exact = reparam_gradient_exact(1, lik, q, proj)
    cfg = EstimatorConfig(kind="ups", samples=100_000, rng_seed=10)
    g = ups_gradient(1, lik, q, proj, cfg)
    # empirical standard errors from a fresh batch of tilted draws
    samp = build_tilted_sampler(lik, 1, mu, v)
    draws = product_sample_batch(samp, np.random.default_rng(11), 100_000)
    se_mu = np.std((draws - mu) / v) / math.sqrt(draws.size)
    se_v = np.std(((draws - mu) ** 2 - v) / (2 * v * v)) / math.sqrt(draws.size)
    assert abs(g.d_mu - exact.d_mu) <= 3.0 * se_mu
    assert abs(g.d_v - exact.d_v) <= 3.0 * se_v
    assert g.telemetry["accepted_samples"] == 100_000


# ---------------------------------------------------------------------------
# batch assembly and the sample-size bound
# ---------------------------------------------------------------------------

def test_objective_gradient_telemetry_counts():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(6, 1))
    y = rng.integers(0, 2, size=6)
    model = KernelModel(kernel_kind=ISO_RBF, lengthscales=[1.0],
                        signal_variance=1.0, Z=rng.normal(size=(3, 1)))
    L = np.eye(3)
    q = VariationalPosterior(m=np.zeros(3), L=L)
    lik = make_likelihood("probit")
    spec = ObjectiveSpec(kind="dlm-log", beta=1.0)
    for kind, L_samp in (("bmc", 7), ("ups", 3)):
        est = EstimatorConfig(kind=kind, samples=L_samp, rng_seed=1)
        g = objective_gradient((X, y), model, q, lik, spec, est)
        assert g.telemetry["accepted_samples"] == 6 * L_samp
        assert g.kind == kind
    g = objective_gradient((X, y), model, q, lik, spec,
                           EstimatorConfig(kind="ups", samples=3, rng_seed=1))
    assert sum(g.telemetry["chosen_widths"].values()) == 6


def test_required_sample_size_examples():
    b = DerivativeBounds(B=1.0, d1_lo=0.0, d1_hi=1.0, d2_lo=0.0, d2_hi=1.0)
    # M = 1 with unit moments
    assert required_sample_size(1, 0.05, 0.1, b, (1.0, 1.0, 1.0)) == 240
    # gamma halved scales the bound by four
    L1 = required_sample_size(1, 0.05, 0.2, b, (1.0, 1.0, 1.0))
    L2 = required_sample_size(1, 0.05, 0.1, b, (1.0, 1.0, 1.0))
    assert abs(L2 - 4 * L1) <= 4
    # logistic at mu = 0: E[phi] = 1/2 and odd symmetry kills both moments
    lb = make_likelihood("logistic").derivative_bounds(1)
    M = max(lb.B ** 2 / 0.25, (lb.d1_hi - lb.d1_lo) ** 2,
            (lb.d2_hi - lb.d2_lo) ** 2)
    assert M == 4.0
    got = required_sample_size(1, 0.05, 0.1, lb, (0.5, 0.0, 0.0))
    assert got == math.floor(math.log(120.0) / 0.02 * 4.0) + 1
