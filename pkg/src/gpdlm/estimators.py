"""Gradient estimation for the log-predictive loss terms.

The dlm-log data term -log E_{q(f_i)}[p(y_i|f_i)] has gradient components

    d/d mu_i = -E[phi'] / E[phi],     d/d v_i = -E[phi''] / (2 E[phi]),

with the expectations over f_i ~ N(mu_i, v_i). Four interchangeable routes
produce per-point estimates of these two scalars:

* ``exact``: analytic expectations (Gaussian, probit) or high-order
  Gauss-Hermite quadrature.
* ``bmc``: the ratio of sample sums sum phi' / sum phi over shared draws
  f = mu + sqrt(v) * eps, eps ~ N(0, 1). Biased for finite L.
* ``smooth-bmc``: same with a constant nu added to the denominator sum;
  nu = 0 reproduces bmc exactly.
* ``ups``: score-function evaluation at draws from the tilted density
  q(f) p(y|f) / E[p(y|f)], produced by rejection sampling. Unbiased.

Every per-point estimate is then pushed through the projection
mu_i = a1^T m + b1, v_i = a2^T V a2 + b2 to gradients in (m, L) and, in joint
mode, through the kernel matrices to the hyperparameters and inducing inputs.

All ratio arithmetic runs in log space with a max shift so that points far in
the likelihood tail do not underflow. Randomness comes from counter-based
streams keyed by (seed, step, point index), which makes estimates reproducible
and independent of batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import log_ndtr

from .errors import InputError, SamplingError
from .kernels import (KernelMatrices, KernelModel, MarginalProjection,
                      VariationalPosterior, chol_factor_gradient,
                      hyper_gradients_from_adjoints, kl_gaussian_adjoints,
                      posterior_marginals)
from .likelihoods import (DerivativeBounds, GaussianLikelihood, Likelihood,
                          ProbitLikelihood, adaptive_log_weights,
                          gauss_hermite_nodes)
from .objectives import ObjectiveSpec

BATCH_STREAM_INDEX = 0xFFFFFFFF


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "exact"
    samples: int = 10
    nu: float = 0.0
    n_max: int = 10
    vectorized_rounds: int = 2
    max_individual_attempts: int = 1000
    rng_seed: int = 0
    quad_nodes: int = 64

    def __post_init__(self):
        if self.kind not in ("exact", "bmc", "smooth-bmc", "ups"):
            raise InputError(f"unknown estimator kind {self.kind!r}")
        if self.samples < 1:
            raise InputError("sample count must be >= 1")
        if self.nu < 0:
            raise InputError("smoothing nu must be nonnegative")
        if self.n_max < 1:
            raise InputError("width multiplier cap must be >= 1")


@dataclass
class PointGradient:
    """Per-point contribution, in marginal coordinates and projected."""

    d_mu: float
    d_v: float
    grad_m: np.ndarray
    grad_V: np.ndarray
    grad_LV: np.ndarray
    d_noise: float | None = None
    telemetry: dict = field(default_factory=dict)


@dataclass
class GradientEstimate:
    """Batch gradient with provenance and sampler telemetry."""

    kind: str
    grad_m: np.ndarray
    grad_LV: np.ndarray
    grad_hyper: dict
    telemetry: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# reproducible streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer; spreads structured (seed, step, index) keys."""
    x &= _MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK64
    return x ^ (x >> 31)


def point_stream(seed: int, step: int, index: int) -> np.random.Generator:
    """Counter-based stream for one (seed, step, point) cell."""
    hi = _mix64(seed ^ 0x9E3779B97F4A7C15)
    lo = _mix64(((step & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF))
    key = np.array([lo, hi], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def batch_stream(seed: int, step: int) -> np.random.Generator:
    return point_stream(seed, step, BATCH_STREAM_INDEX)


def _eps_matrix(seed: int, step: int, indices, L: int) -> np.ndarray:
    rows = [point_stream(seed, step, int(i)).standard_normal(L) for i in indices]
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# marginal-coordinate estimators: arrays (g_mu, g_v[, g_noise]) over a batch
# ---------------------------------------------------------------------------

def _exact_marginal_gradients(lik, y, mu, v, nodes):
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(lik, GaussianLikelihood):
        s2 = v + lik.variance
        r = (y - mu) / s2
        g_mu = -r
        g_v = 0.5 / s2 - 0.5 * r * r
        return g_mu, g_v, g_v.copy()
    if isinstance(lik, ProbitLikelihood):
        t = 2.0 * np.asarray(y, dtype=float) - 1.0
        s = np.sqrt(v + 1.0)
        z = t * mu / s
        R = np.exp(-0.5 * z * z - 0.5 * math.log(2.0 * math.pi) - log_ndtr(z))
        g_mu = -t * R / s
        g_v = R * z / (2.0 * (v + 1.0))
        return g_mu, g_v, None
    lp, f = adaptive_log_weights(lik, y, mu, np.maximum(v, 1e-300), nodes)
    m = np.max(lp, axis=1, keepdims=True)
    w = np.exp(lp - m)
    den = np.sum(w, axis=1)
    r1 = lik.log_phi_d1(y[:, None], f)
    r2 = lik.log_phi_d2(y[:, None], f)
    g_mu = -np.sum(w * r1, axis=1) / den
    g_v = -0.5 * np.sum(w * (r2 + r1 * r1), axis=1) / den
    return g_mu, g_v, None


def _bmc_marginal_gradients(lik, y, mu, v, cfg: EstimatorConfig, step, indices):
    """Shared-draw ratio estimator, optionally smoothed in the denominator."""
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    eps = _eps_matrix(cfg.rng_seed, step, indices, cfg.samples)
    f = mu[:, None] + np.sqrt(np.maximum(v, 0.0))[:, None] * eps
    lp = lik.log_phi(y[:, None], f)
    m = np.max(lp, axis=1)
    dead = ~np.isfinite(m)
    m_safe = np.where(dead, 0.0, m)
    w = np.exp(lp - m_safe[:, None])
    den = np.sum(w, axis=1)
    # empirical minimum of (1/L) sum phi, a proxy for the positive lower
    # bound the convergence analysis assumes on E[phi]
    if np.all(dead):
        min_mean_phi = 0.0
    else:
        with np.errstate(divide="ignore"):
            log_mean = m_safe + np.log(den / cfg.samples)
        min_mean_phi = float(np.exp(np.min(log_mean[~dead])))
    if cfg.nu > 0.0:
        with np.errstate(over="ignore"):
            den = den + cfg.nu * np.exp(-m_safe)
    r1 = lik.log_phi_d1(y[:, None], f)
    r2 = lik.log_phi_d2(y[:, None], f)
    with np.errstate(invalid="ignore"):
        g_mu = -np.sum(w * r1, axis=1) / den
        g_v = -0.5 * np.sum(w * (r2 + r1 * r1), axis=1) / den
    g_noise = None
    if isinstance(lik, GaussianLikelihood):
        tau = lik.log_phi_dvar(y[:, None], f)
        with np.errstate(invalid="ignore"):
            g_noise = -np.sum(w * tau, axis=1) / den
        g_noise = np.where(dead | np.isinf(den), 0.0, np.nan_to_num(g_noise))
    inf_den = np.isinf(den)
    g_mu = np.where(dead | inf_den, 0.0, np.nan_to_num(g_mu))
    g_v = np.where(dead | inf_den, 0.0, np.nan_to_num(g_v))
    telemetry = {"accepted_samples": int(mu.shape[0] * cfg.samples),
                 "rejected_samples": 0,
                 "zero_phi_points": int(np.sum(dead)),
                 "min_mean_phi": min_mean_phi}
    return g_mu, g_v, g_noise, telemetry


def _ups_marginal_gradients(lik, y, mu, v, cfg: EstimatorConfig, step, indices):
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    widths = select_widths(lik, y, mu, v, cfg.n_max)
    draws, telemetry = _sample_tilted_units(
        lik, y, mu, v, widths, cfg.samples,
        seed=cfg.rng_seed, step=step, indices=indices,
        rounds=cfg.vectorized_rounds,
        max_individual_attempts=cfg.max_individual_attempts)
    centered = draws - mu[:, None]
    g_mu = -np.mean(centered, axis=1) / v
    g_v = -np.mean(centered * centered - v[:, None], axis=1) / (2.0 * v * v)
    g_noise = g_v.copy() if isinstance(lik, GaussianLikelihood) else None
    telemetry["chosen_widths"] = _width_histogram(widths)
    return g_mu, g_v, g_noise, telemetry


def _width_histogram(widths) -> dict:
    vals, counts = np.unique(np.asarray(widths), return_counts=True)
    return {int(k): int(c) for k, c in zip(vals, counts)}


# ---------------------------------------------------------------------------
# tilted-density rejection sampler
# ---------------------------------------------------------------------------

@dataclass
class TiltedSampler:
    """Rejection sampler for q(f) p(y|f) / E[p(y|f)] with q = N(mu, sigma2).

    Proposes from the widened Gaussian N(mu, n sigma2) and accepts with
    probability q(f) l(f) / (K h2(f)), K = sup_f l(f). The width n is the
    largest integer <= n_max whose interval likelihood maximum m1 over the
    intersection region [mu - r, mu + r] satisfies m1 <= m2 * K with
    m2 = 1 / sqrt(n); n = 1 when no larger width qualifies.
    """

    lik: Likelihood
    y: object
    mu: float
    sigma2: float
    n: int
    r: float
    m1: float
    m2: float
    K: float

    def log_accept_ratio(self, f):
        """log of q(f) l(f) / (K h2(f)); <= 0 wherever the envelope holds."""
        f = np.asarray(f, dtype=float)
        d2 = (f - self.mu) ** 2 / self.sigma2
        log_q_over_h2 = 0.5 * math.log(self.n) - 0.5 * d2 * (1.0 - 1.0 / self.n)
        return log_q_over_h2 + self.lik.log_phi(self.y, f) - math.log(self.K)

    def envelope_slack(self, f):
        """K h2(f) - q(f) l(f); nonnegative wherever the envelope is valid."""
        f = np.asarray(f, dtype=float)
        sigma = math.sqrt(self.sigma2)
        log_h2 = (-0.5 * math.log(2.0 * math.pi * self.n * self.sigma2)
                  - 0.5 * (f - self.mu) ** 2 / (self.n * self.sigma2))
        log_q = (-0.5 * math.log(2.0 * math.pi) - math.log(sigma)
                 - 0.5 * (f - self.mu) ** 2 / self.sigma2)
        return (self.K * np.exp(log_h2)
                - np.exp(log_q + self.lik.log_phi(self.y, f)))

    @property
    def proposal_std(self) -> float:
        return math.sqrt(self.n * self.sigma2)


def _width_radius(n, sigma):
    """Radius of the intersection region of N(mu, s^2) and N(mu, n s^2);
    the limit for n = 1 is sigma itself."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        rad = np.sqrt(np.log(n) / (1.0 - 1.0 / n))
    return sigma * np.where(n <= 1.0, 1.0, rad)


def select_widths(lik: Likelihood, y, mu, v, n_max: int = 10) -> np.ndarray:
    """Vectorized width choice for a batch of marginals."""
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    sigma = np.sqrt(v)
    ell = np.array([lik.ell_max(yi) for yi in np.atleast_1d(y)])
    modes = np.array([lik.f_mode(yi) for yi in np.atleast_1d(y)])
    chosen = np.ones(mu.shape[0], dtype=int)
    undecided = np.ones(mu.shape[0], dtype=bool)
    for n in range(n_max, 1, -1):
        if not np.any(undecided):
            break
        r = _width_radius(n, sigma)
        f_star = np.clip(modes, mu - r, mu + r)
        m1 = np.exp(lik.log_phi(np.atleast_1d(y), f_star))
        ok = undecided & (m1 <= ell / math.sqrt(n))
        chosen[ok] = n
        undecided &= ~ok
    return chosen


def build_tilted_sampler(lik: Likelihood, y, mu: float, sigma2: float,
                         n_max: int = 10) -> TiltedSampler:
    if sigma2 <= 0:
        raise InputError("tilted sampler needs a positive marginal variance")
    n = int(select_widths(lik, np.atleast_1d(y), np.array([mu]),
                          np.array([sigma2]), n_max)[0])
    sigma = math.sqrt(sigma2)
    r = float(_width_radius(n, np.array([sigma]))[0])
    m1 = lik.interval_max(y, mu - r, mu + r)
    return TiltedSampler(lik=lik, y=y, mu=float(mu), sigma2=float(sigma2),
                         n=n, r=r, m1=m1, m2=1.0 / math.sqrt(n),
                         K=lik.ell_max(y))


def product_sample(sampler: TiltedSampler, rng: np.random.Generator,
                   max_attempts: int = 1000, telemetry: dict | None = None) -> float:
    """One accepted draw from the tilted density."""
    std = sampler.proposal_std
    for attempt in range(max_attempts):
        f = sampler.mu + std * rng.standard_normal()
        if math.log(rng.uniform()) <= float(sampler.log_accept_ratio(f)):
            if telemetry is not None:
                telemetry["accepted_samples"] = telemetry.get("accepted_samples", 0) + 1
                telemetry["rejected_samples"] = telemetry.get("rejected_samples", 0) + attempt
            return float(f)
    raise SamplingError(
        f"no accepted sample in {max_attempts} attempts "
        f"(mu={sampler.mu:.3g}, sigma2={sampler.sigma2:.3g}, n={sampler.n})")


def product_sample_batch(sampler: TiltedSampler, rng: np.random.Generator,
                         size: int, max_rounds: int = 10000,
                         telemetry: dict | None = None) -> np.ndarray:
    """``size`` accepted draws from one sampler, proposing in blocks."""
    out = np.empty(size)
    filled = 0
    rejected = 0
    std = sampler.proposal_std
    for _ in range(max_rounds):
        need = size - filled
        block = max(need, 64)
        f = sampler.mu + std * rng.standard_normal(block)
        acc = np.log(rng.uniform(size=block)) <= sampler.log_accept_ratio(f)
        taken = f[acc][:need]
        rejected += int(np.sum(~acc))
        out[filled:filled + taken.shape[0]] = taken
        filled += taken.shape[0]
        if filled == size:
            if telemetry is not None:
                telemetry["accepted_samples"] = telemetry.get("accepted_samples", 0) + size
                telemetry["rejected_samples"] = telemetry.get("rejected_samples", 0) + rejected
            return out
    raise SamplingError("rejection sampling exceeded the round budget")


def vectorized_product_sample(samplers, rng: np.random.Generator,
                              rounds: int = 2,
                              max_individual_attempts: int = 1000):
    """Hybrid sampling over a batch: ``rounds`` vectorized accept/reject
    passes over all still-empty entries, then per-entry loops for the rest.

    Returns (draws, telemetry); telemetry records per-round acceptance counts
    and the indices that fell back to individual sampling.
    """
    if len(samplers) == 0:
        raise InputError("empty sampler batch")
    lik = samplers[0].lik
    if any(s.lik.kind != lik.kind for s in samplers):
        raise InputError("a sampler batch must share one likelihood family")
    mu = np.array([s.mu for s in samplers])
    sigma2 = np.array([s.sigma2 for s in samplers])
    n = np.array([s.n for s in samplers], dtype=float)
    logK = np.log(np.array([s.K for s in samplers]))
    y = np.array([s.y for s in samplers])
    draws, telemetry = _hybrid_rejection(
        lik, y, mu, sigma2, n, logK, rng=rng, rounds=rounds,
        max_individual_attempts=max_individual_attempts,
        fallback_rngs=None)
    return draws, telemetry


def _hybrid_rejection(lik, y, mu, sigma2, n, logK, rng, rounds,
                      max_individual_attempts, fallback_rngs=None):
    """Array core of the hybrid scheme; ``fallback_rngs`` optionally maps
    entry index -> generator for the individual stage."""
    size = mu.shape[0]
    draws = np.empty(size)
    pending = np.ones(size, dtype=bool)
    std = np.sqrt(n * sigma2)
    scale = 0.5 * np.log(n)
    shrink = (1.0 - 1.0 / n) / (2.0 * sigma2)
    rounds_hist = {}
    rejected = 0
    for rnd in range(1, rounds + 1):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        f = mu[idx] + std[idx] * rng.standard_normal(idx.size)
        la = (scale[idx] - shrink[idx] * (f - mu[idx]) ** 2
              + lik.log_phi(y[idx], f) - logK[idx])
        acc = np.log(rng.uniform(size=idx.size)) <= la
        draws[idx[acc]] = f[acc]
        pending[idx[acc]] = False
        rejected += int(np.sum(~acc))
        rounds_hist[rnd] = int(np.sum(acc))
    fallback = np.flatnonzero(pending)
    for i in fallback:
        gen = fallback_rngs[i] if fallback_rngs is not None else rng
        accepted = False
        for attempt in range(max_individual_attempts):
            f = mu[i] + std[i] * gen.standard_normal()
            la = (scale[i] - shrink[i] * (f - mu[i]) ** 2
                  + float(lik.log_phi(y[i], f)) - logK[i])
            if math.log(gen.uniform()) <= la:
                draws[i] = f
                rejected += attempt
                accepted = True
                break
        if not accepted:
            raise SamplingError(
                f"entry {int(i)}: no accepted sample in "
                f"{max_individual_attempts} attempts")
    rounds_hist["individual"] = int(fallback.size)
    telemetry = {"accepted_samples": size, "rejected_samples": rejected,
                 "rounds_histogram": rounds_hist,
                 "fallback_indices": fallback.tolist()}
    return draws, telemetry


def _sample_tilted_units(lik, y, mu, v, widths, L, seed, step, indices,
                         rounds, max_individual_attempts):
    """L tilted draws per point, flattened into (point, draw) units and run
    through the hybrid scheme. Vectorized rounds use the batch stream; the
    individual stage uses each point's own stream."""
    npts = mu.shape[0]
    rep = np.repeat
    y_u = rep(np.asarray(y), L)
    mu_u = rep(mu, L)
    v_u = rep(v, L)
    n_u = rep(np.asarray(widths, dtype=float), L)
    logK_u = np.log(rep(np.array([lik.ell_max(yi) for yi in np.atleast_1d(y)]), L))
    point_of_unit = rep(np.asarray(indices), L)
    rng = batch_stream(seed, step)
    cache = {}

    class _PerPoint:
        def __getitem__(self, unit):
            pid = int(point_of_unit[unit])
            if pid not in cache:
                cache[pid] = point_stream(seed, step, pid)
            return cache[pid]

    draws, telemetry = _hybrid_rejection(
        lik, y_u, mu_u, v_u, n_u, logK_u, rng=rng, rounds=rounds,
        max_individual_attempts=max_individual_attempts,
        fallback_rngs=_PerPoint())
    return draws.reshape(npts, L), telemetry


# ---------------------------------------------------------------------------
# per-point operation surface
# ---------------------------------------------------------------------------

def _as_point_gradient(g_mu, g_v, g_noise, q, proj, telemetry=None):
    a1, a2 = proj.a1, proj.a2
    grad_m = g_mu * a1
    grad_V = g_v * np.outer(a2, a2)
    return PointGradient(d_mu=float(g_mu), d_v=float(g_v),
                         grad_m=grad_m, grad_V=grad_V,
                         grad_LV=chol_factor_gradient(grad_V, q.L),
                         d_noise=None if g_noise is None else float(g_noise),
                         telemetry=telemetry or {})


def reparam_gradient_exact(y, lik: Likelihood, q: VariationalPosterior,
                           proj: MarginalProjection,
                           nodes: int = 64) -> PointGradient:
    """Deterministic gradient of -log E[p(y|f)] for one point."""
    mu, v = proj.moments(q)
    if v <= 0:
        raise InputError("marginal variance must be positive")
    g_mu, g_v, g_noise = _exact_marginal_gradients(
        lik, np.atleast_1d(y), np.array([mu]), np.array([v]), nodes)
    return _as_point_gradient(g_mu[0], g_v[0],
                              None if g_noise is None else g_noise[0], q, proj)


def bmc_gradient(y, lik: Likelihood, q: VariationalPosterior,
                 proj: MarginalProjection, cfg: EstimatorConfig,
                 step: int = 0, index: int = 0) -> PointGradient:
    """Ratio-of-sums Monte Carlo gradient over shared standard-normal draws."""
    mu, v = proj.moments(q)
    plain = EstimatorConfig(kind="bmc", samples=cfg.samples, nu=0.0,
                            rng_seed=cfg.rng_seed)
    g_mu, g_v, g_noise, tel = _bmc_marginal_gradients(
        lik, np.atleast_1d(y), np.array([mu]), np.array([v]), plain,
        step, [index])
    return _as_point_gradient(g_mu[0], g_v[0],
                              None if g_noise is None else g_noise[0],
                              q, proj, tel)


def smooth_bmc_gradient(y, lik: Likelihood, q: VariationalPosterior,
                        proj: MarginalProjection, cfg: EstimatorConfig,
                        step: int = 0, index: int = 0) -> PointGradient:
    """bmc with ``cfg.nu`` added to the denominator sum."""
    mu, v = proj.moments(q)
    g_mu, g_v, g_noise, tel = _bmc_marginal_gradients(
        lik, np.atleast_1d(y), np.array([mu]), np.array([v]), cfg,
        step, [index])
    return _as_point_gradient(g_mu[0], g_v[0],
                              None if g_noise is None else g_noise[0],
                              q, proj, tel)


def ups_gradient(y, lik: Likelihood, q: VariationalPosterior,
                 proj: MarginalProjection, cfg: EstimatorConfig,
                 step: int = 0, index: int = 0) -> PointGradient:
    """Unbiased product-sampling gradient: the score of N(mu, v) averaged over
    tilted draws, negated to give the gradient of -log E[p]."""
    mu, v = proj.moments(q)
    if v <= 0:
        raise InputError("marginal variance must be positive")
    g_mu, g_v, g_noise, tel = _ups_marginal_gradients(
        lik, np.atleast_1d(y), np.array([mu]), np.array([v]), cfg,
        step, [index])
    return _as_point_gradient(g_mu[0], g_v[0],
                              None if g_noise is None else g_noise[0],
                              q, proj, tel)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def marginal_loss_gradients(lik, y, mu, v, spec_kind: str,
                            est: EstimatorConfig, step, indices,
                            pred_residual=None):
    """(g_mu, g_v, g_noise, telemetry) arrays for one batch and objective.

    Only the log-predictive loss dispatches on the estimator kind; the
    evidence-bound and square-loss terms have tractable gradients and are
    always computed deterministically.
    """
    telemetry = {}
    if spec_kind == "dlm-square":
        g_mu = np.asarray(pred_residual, dtype=float)
        return g_mu, np.zeros_like(g_mu), None, telemetry
    if spec_kind == "elbo":
        return _elbo_marginal_gradients(lik, y, mu, v, est.quad_nodes) + (telemetry,)
    if est.kind == "exact":
        g = _exact_marginal_gradients(lik, y, mu, v, est.quad_nodes)
        return g + (telemetry,)
    if est.kind in ("bmc", "smooth-bmc"):
        cfg = est if est.kind == "smooth-bmc" else \
            EstimatorConfig(kind="bmc", samples=est.samples, nu=0.0,
                            rng_seed=est.rng_seed, quad_nodes=est.quad_nodes)
        return _bmc_marginal_gradients(lik, y, mu, v, cfg, step, indices)
    return _ups_marginal_gradients(lik, y, mu, v, est, step, indices)


def _elbo_marginal_gradients(lik, y, mu, v, nodes):
    """Gradient of the expected negative log density, differentiating the
    quadrature sum so value and gradient stay mutually consistent."""
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(lik, GaussianLikelihood):
        s2 = lik.variance
        g_mu = (mu - y) / s2
        g_v = np.full_like(mu, 0.5 / s2)
        g_noise = 0.5 / s2 - ((y - mu) ** 2 + v) / (2.0 * s2 * s2)
        return g_mu, g_v, g_noise
    x, w, _ = gauss_hermite_nodes(nodes)
    sqrt2v = np.sqrt(2.0 * np.maximum(v, 1e-300))
    f = mu[:, None] + sqrt2v[:, None] * x[None, :]
    r1 = lik.log_phi_d1(y[:, None], f)
    g_mu = -(r1 @ w) / math.sqrt(math.pi)
    g_v = -((r1 * x[None, :]) @ w) / math.sqrt(math.pi) / sqrt2v
    return g_mu, g_v, None


def objective_gradient(data, model: KernelModel, q: VariationalPosterior,
                       lik: Likelihood | None, spec: ObjectiveSpec,
                       est: EstimatorConfig, step: int = 0,
                       indices=None, n_full: int | None = None,
                       include_hypers: bool = False,
                       mats: KernelMatrices | None = None) -> GradientEstimate:
    """Gradient of the full objective over one batch.

    ``n_full`` is the dataset size behind a minibatch: the data term is scaled
    by n_full/|batch| and the regularizer enters whole, so the estimate is
    unbiased for the full-data gradient.
    """
    X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    nb = X.shape[0]
    if n_full is None:
        n_full = nb
    if indices is None:
        indices = np.arange(nb)

    mu, v, A, b2, mats = posterior_marginals(model, q, X, mats)
    residual = None
    if spec.kind == "dlm-square":
        residual = A.T @ q.m + model.mean_offset() - np.asarray(y, dtype=float)
    g_mu, g_v, g_noise, telemetry = marginal_loss_gradients(
        lik, y, mu, np.maximum(v, 1e-300), spec.kind, est, step, indices,
        pred_residual=residual)

    s_obj = spec.scale(n_full)
    sd = s_obj * (n_full / nb)
    gm = g_mu * sd
    gv = g_v * sd

    grad_m = A @ gm
    G_V = (A * gv) @ A.T

    Kinv = cho_solve((mats.L_uu, True), np.eye(model.num_inducing))
    alpha = Kinv @ q.m
    if spec.kind == "dlm-square":
        grad_m = grad_m + s_obj * spec.beta * alpha
        g_K_reg = -0.5 * s_obj * spec.beta * np.outer(alpha, alpha)
        g_V_reg = np.zeros_like(G_V)
    else:
        g_m_kl, g_V_kl, g_K_kl = kl_gaussian_adjoints(q, model, mats)
        grad_m = grad_m + s_obj * spec.beta * g_m_kl
        g_V_reg = s_obj * spec.beta * g_V_kl
        g_K_reg = s_obj * spec.beta * g_K_kl
    G_V = G_V + g_V_reg
    grad_LV = chol_factor_gradient(G_V, q.L)

    grad_hyper: dict = {}
    if include_hypers:
        C = cho_solve((mats.L_uu, True), q.V @ A)
        Abar_fu = (np.outer(gm, alpha) + 2.0 * ((C - A) * gv).T)
        Abar_uu = (-np.outer(A @ gm, alpha) + (A * gv) @ A.T
                   - 2.0 * (C * gv) @ A.T + g_K_reg)
        abar_ff = gv
        grad_hyper = hyper_gradients_from_adjoints(
            model, X, mats, Abar_uu, Abar_fu, abar_ff)
        if model.mean_kind == "constant":
            grad_hyper["mean_const"] = float(np.sum(gm))
        if isinstance(lik, GaussianLikelihood) and g_noise is not None:
            grad_hyper["log_noise_variance"] = float(
                np.sum(g_noise * sd) * lik.variance)

    return GradientEstimate(kind=est.kind if spec.kind == "dlm-log" else "exact",
                            grad_m=grad_m, grad_LV=grad_LV,
                            grad_hyper=grad_hyper, telemetry=telemetry)


# ---------------------------------------------------------------------------
# sample-size bound
# ---------------------------------------------------------------------------

def required_sample_size(n_data: int, delta_t: float, gamma_t: float,
                         bounds: DerivativeBounds,
                         moment_estimates=(None, None, None)) -> int:
    """Smallest sample count exceeding the relative-concentration bound

        L > log(6 n / delta_t) / (2 gamma_t^2) * M,

    with M the largest of the three squared range-to-moment ratios. Moments
    equal to zero (or omitted) for phi' and phi'' fall back to the ratio
    against 1. Diagnostic only; training uses a fixed sample count.
    """
    if not (0.0 < delta_t < 1.0) or not (0.0 < gamma_t < 1.0):
        raise InputError("delta_t and gamma_t must lie in (0, 1)")
    e_phi, e_d1, e_d2 = moment_estimates
    if e_phi is None or e_phi == 0.0:
        raise InputError("required_sample_size needs a positive E[phi] estimate")
    P = abs(e_d1) if e_d1 not in (None, 0.0) else 1.0
    Q = abs(e_d2) if e_d2 not in (None, 0.0) else 1.0
    M = max(bounds.B ** 2 / e_phi ** 2,
            (bounds.d1_hi - bounds.d1_lo) ** 2 / P ** 2,
            (bounds.d2_hi - bounds.d2_lo) ** 2 / Q ** 2)
    bound = math.log(6.0 * n_data / delta_t) / (2.0 * gamma_t ** 2) * M
    return int(math.floor(bound)) + 1
