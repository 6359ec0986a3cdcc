"""Per-observation likelihood models.

Each likelihood exposes the density ``phi(f) = p(y | f)`` of one observation as
a function of the latent value ``f``, together with its first and second
derivatives, the log density and its derivatives (used by the ratio-of-sums
gradient estimators, which must run in log space for tail stability), closed
form bounds on ``phi``, ``phi'``, ``phi''``, and predictive quantities under a
Gaussian latent ``f ~ N(mu, v)``:

* ``analytic_log_predictive``: ``-log E[p(y|f)]`` where a closed form exists
  (Gaussian, probit); ``None`` otherwise so callers can fall back to
  quadrature.
* ``quadrature_log_predictive``: Gauss-Hermite approximation of the same
  quantity for any likelihood.
* ``predictive_mean``: ``E[E[y|f]]``, analytic where the moment-generating
  function or the probit identity applies, quadrature otherwise.

Binary labels are stored as {0, 1} at the data layer and mapped to t = 2y - 1
inside the probit/logistic formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

from .errors import InputError

DEFAULT_QUAD_NODES = 20

# Lower bound applied to Gaussian / Student-t observation variances so that
# max_f p(y|f) stays finite.
MIN_CONTINUOUS_VARIANCE = 1e-4

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@lru_cache(maxsize=32)
def gauss_hermite_nodes(n: int):
    """Nodes and weights for E_{N(0,1)}[g] = sum_k w_k g(sqrt(2) x_k) / sqrt(pi)."""
    if n < 2:
        raise InputError(f"quadrature needs at least 2 nodes, got {n}")
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, w, np.log(w) - 0.5 * math.log(math.pi)


def gauss_hermite_points(mu, v, nodes):
    """Evaluation points mu + sqrt(2 v) x_k for E_{N(mu,v)}[g]."""
    x, w, logw = gauss_hermite_nodes(nodes)
    return np.asarray(mu) + np.sqrt(2.0 * max(float(v), 0.0)) * x, w, logw


@dataclass(frozen=True)
class DerivativeBounds:
    """Closed-form envelopes: 0 <= phi <= B, d1_lo <= phi' <= d1_hi,
    d2_lo <= phi'' <= d2_hi. ``b_star`` is the largest magnitude among them."""

    B: float
    d1_lo: float
    d1_hi: float
    d2_lo: float
    d2_hi: float

    def __post_init__(self):
        if not (self.B > 0 and self.d1_lo <= self.d1_hi and self.d2_lo <= self.d2_hi):
            raise InputError(f"inconsistent derivative bounds: {self}")

    @property
    def b_star(self) -> float:
        return max(self.B, abs(self.d1_lo), abs(self.d1_hi),
                   abs(self.d2_lo), abs(self.d2_hi))


class Likelihood:
    """Base class. Subclasses implement the log density and its derivatives in
    f; the raw density derivatives are derived from those."""

    kind: str = ""

    # -- density ------------------------------------------------------------

    def log_phi(self, y, f):
        raise NotImplementedError

    def log_phi_d1(self, y, f):
        """d/df log phi."""
        raise NotImplementedError

    def log_phi_d2(self, y, f):
        """d^2/df^2 log phi."""
        raise NotImplementedError

    def phi_triplet(self, y, f):
        """(phi, phi', phi'') at f. Uses phi' = phi * r1 and
        phi'' = phi * (r2 + r1^2) with r_k the log-density derivatives."""
        self.validate_labels(y)
        p = np.exp(self.log_phi(y, f))
        r1 = self.log_phi_d1(y, f)
        r2 = self.log_phi_d2(y, f)
        return p, p * r1, p * (r2 + r1 * r1)

    # -- support ------------------------------------------------------------

    def validate_labels(self, y):
        return None

    # -- bounds and sampler support ------------------------------------------

    def derivative_bounds(self, y) -> DerivativeBounds:
        raise NotImplementedError

    def ell_max(self, y) -> float:
        """sup_f p(y|f)."""
        raise NotImplementedError

    def f_mode(self, y) -> float:
        """argmax_f p(y|f); +-inf when the density is monotone in f."""
        raise NotImplementedError

    def interval_max(self, y, lo, hi) -> float:
        """max of p(y|f) over [lo, hi]; the density is unimodal in f for every
        supported model, so clipping the mode into the interval suffices."""
        f_star = min(max(self.f_mode(y), lo), hi)
        return float(np.exp(self.log_phi(y, f_star)))

    # -- predictive quantities ------------------------------------------------

    def analytic_log_predictive(self, mu, v, y):
        return None

    def conditional_mean(self, f):
        """E[y | f], used by the quadrature fallback of predictive_mean."""
        raise NotImplementedError

    def predictive_mean(self, mu, v, nodes: int = DEFAULT_QUAD_NODES):
        f, w, _ = gauss_hermite_points(mu, v, nodes)
        return float(np.dot(w, self.conditional_mean(f)) / math.sqrt(math.pi))

    def quadrature_log_predictive(self, mu, v, y, nodes: int = DEFAULT_QUAD_NODES):
        """-log E_{N(mu,v)}[p(y|f)] by mode-centered Gauss-Hermite.

        The rule is recentered on the mode of N(f; mu, v) p(y|f) with the
        curvature there setting the scale, so narrow likelihoods displaced
        from mu (small counts under a wide marginal, say) are still resolved.
        Exact for Gaussian observation noise.
        """
        self.validate_labels(y)
        if v < 0:
            raise InputError("negative marginal variance")
        mu = float(mu)
        v = float(v)
        if v < 1e-14:
            return float(-self.log_phi(y, np.asarray(mu)))
        terms, _ = adaptive_log_weights(self, np.atleast_1d(y),
                                        np.array([mu]), np.array([v]), nodes)
        m = np.max(terms)
        if not np.isfinite(m):
            return math.inf
        return float(-(m + math.log(np.sum(np.exp(terms - m)))))


class GaussianLikelihood(Likelihood):
    """p(y|f) = N(y; f, variance). The variance is floored so the density
    maximum c = 1/(sqrt(2 pi) sigma) stays finite."""

    kind = "gaussian"

    def __init__(self, variance: float):
        if variance <= 0:
            raise InputError("gaussian likelihood needs variance > 0")
        self.variance = max(float(variance), MIN_CONTINUOUS_VARIANCE)

    def log_phi(self, y, f):
        return -_HALF_LOG_2PI - 0.5 * math.log(self.variance) \
            - 0.5 * (y - f) ** 2 / self.variance

    def log_phi_d1(self, y, f):
        return (y - f) / self.variance

    def log_phi_d2(self, y, f):
        return -np.ones_like(np.asarray(f, dtype=float)) / self.variance

    def log_phi_dvar(self, y, f):
        """d/d variance of log phi, for noise-parameter gradients."""
        return 0.5 * (y - f) ** 2 / self.variance ** 2 - 0.5 / self.variance

    def derivative_bounds(self, y) -> DerivativeBounds:
        sigma = math.sqrt(self.variance)
        c = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)
        d1 = c / (math.sqrt(math.e) * sigma)
        return DerivativeBounds(B=c, d1_lo=-d1, d1_hi=d1,
                                d2_lo=-c / self.variance,
                                d2_hi=2.0 * c / (self.variance * math.e ** 1.5))

    def ell_max(self, y) -> float:
        return 1.0 / math.sqrt(2.0 * math.pi * self.variance)

    def f_mode(self, y) -> float:
        return float(y)

    def analytic_log_predictive(self, mu, v, y):
        s2 = v + self.variance
        return float(0.5 * math.log(2.0 * math.pi * s2) + 0.5 * (y - mu) ** 2 / s2)

    def conditional_mean(self, f):
        return f

    def predictive_mean(self, mu, v, nodes: int = DEFAULT_QUAD_NODES):
        return float(mu)


class ProbitLikelihood(Likelihood):
    """p(y=1|f) = Phi(f) with Phi the standard normal CDF; labels in {0, 1}."""

    kind = "probit"

    def validate_labels(self, y):
        arr = np.asarray(y)
        if not np.all((arr == 0) | (arr == 1)):
            raise InputError("probit labels must be in {0, 1}")

    @staticmethod
    def _t(y):
        return 2.0 * np.asarray(y, dtype=float) - 1.0

    def log_phi(self, y, f):
        return log_ndtr(self._t(y) * f)

    def log_phi_d1(self, y, f):
        t = self._t(y)
        u = t * f
        # inverse Mills ratio, stable far into the left tail
        r = np.exp(-_HALF_LOG_2PI - 0.5 * u * u - log_ndtr(u))
        return t * r

    def log_phi_d2(self, y, f):
        t = self._t(y)
        u = t * f
        r = np.exp(-_HALF_LOG_2PI - 0.5 * u * u - log_ndtr(u))
        return -u * r - r * r

    def phi_triplet(self, y, f):
        self.validate_labels(y)
        t = self._t(y)
        u = t * f
        pdf = np.exp(-_HALF_LOG_2PI - 0.5 * u * u)
        return ndtr(u), t * pdf, -u * pdf

    def derivative_bounds(self, y) -> DerivativeBounds:
        d1 = 1.0 / math.sqrt(2.0 * math.pi)
        d2 = 1.0 / math.sqrt(2.0 * math.pi * math.e)
        return DerivativeBounds(B=1.0, d1_lo=-d1, d1_hi=d1, d2_lo=-d2, d2_hi=d2)

    def ell_max(self, y) -> float:
        return 1.0

    def f_mode(self, y) -> float:
        return math.inf if y == 1 else -math.inf

    def analytic_log_predictive(self, mu, v, y):
        t = 2.0 * float(y) - 1.0
        return float(-log_ndtr(t * mu / math.sqrt(v + 1.0)))

    def conditional_mean(self, f):
        return ndtr(f)

    def predictive_mean(self, mu, v, nodes: int = DEFAULT_QUAD_NODES):
        """Class-1 probability Phi(mu / sqrt(v + 1))."""
        return float(ndtr(mu / math.sqrt(v + 1.0)))


class LogisticLikelihood(Likelihood):
    """p(y=1|f) = sigmoid(f); labels in {0, 1}. Included for bound
    verification and estimator tests."""

    kind = "logistic"

    def validate_labels(self, y):
        arr = np.asarray(y)
        if not np.all((arr == 0) | (arr == 1)):
            raise InputError("logistic labels must be in {0, 1}")

    @staticmethod
    def _t(y):
        return 2.0 * np.asarray(y, dtype=float) - 1.0

    def log_phi(self, y, f):
        z = self._t(y) * f
        # log sigmoid(z) = -log(1 + exp(-z)), computed without overflow
        return np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))),
                        z - np.log1p(np.exp(-np.abs(z))))

    def log_phi_d1(self, y, f):
        t = self._t(y)
        return t / (1.0 + np.exp(t * f))

    def log_phi_d2(self, y, f):
        z = self._t(y) * f
        s = 1.0 / (1.0 + np.exp(-z))
        return -s * (1.0 - s)

    def derivative_bounds(self, y) -> DerivativeBounds:
        return DerivativeBounds(B=1.0, d1_lo=-0.25, d1_hi=0.25,
                                d2_lo=-0.25, d2_hi=0.25)

    def ell_max(self, y) -> float:
        return 1.0

    def f_mode(self, y) -> float:
        return math.inf if y == 1 else -math.inf

    def conditional_mean(self, f):
        return 1.0 / (1.0 + np.exp(-f))


class PoissonExpLikelihood(Likelihood):
    """Poisson counts with log link: rate = exp(f), pmf rate^y e^{-rate} / y!."""

    kind = "poisson-exp"

    def validate_labels(self, y):
        arr = np.asarray(y)
        if not np.all((arr >= 0) & (arr == np.floor(arr))):
            raise InputError("poisson labels must be nonnegative integers")

    def log_phi(self, y, f):
        return y * f - np.exp(f) - gammaln(y + 1.0)

    def log_phi_d1(self, y, f):
        return y - np.exp(f)

    def log_phi_d2(self, y, f):
        return -np.exp(f)

    def derivative_bounds(self, y) -> DerivativeBounds:
        y = float(y)
        return DerivativeBounds(B=1.0, d1_lo=-y - 1.0, d1_hi=y,
                                d2_lo=-y - 0.25, d2_hi=2.0 * y * y + 3.0 * y + 2.0)

    def ell_max(self, y) -> float:
        # the pmf is maximized over the rate at rate = y; for y = 0 the
        # supremum e^{-rate} -> 1 is approached as f -> -inf
        if y == 0:
            return 1.0
        return float(np.exp(y * math.log(y) - y - gammaln(y + 1.0)))

    def f_mode(self, y) -> float:
        return math.log(y) if y >= 1 else -math.inf

    def conditional_mean(self, f):
        return np.exp(f)

    def predictive_mean(self, mu, v, nodes: int = DEFAULT_QUAD_NODES):
        """E[exp(f)] is the normal moment generating function at 1."""
        return float(math.exp(mu + 0.5 * v))


class PoissonSoftplusLikelihood(Likelihood):
    """Poisson counts with softplus link: rate = log(1 + exp(f))."""

    kind = "poisson-softplus"

    def validate_labels(self, y):
        arr = np.asarray(y)
        if not np.all((arr >= 0) & (arr == np.floor(arr))):
            raise InputError("poisson labels must be nonnegative integers")

    @staticmethod
    def _rate(f):
        lam = np.logaddexp(0.0, f)
        return np.maximum(lam, 1e-308)

    def log_phi(self, y, f):
        lam = self._rate(f)
        # log rate underflows for very negative f where rate ~ exp(f)
        log_lam = np.where(np.asarray(f) < -30.0, np.asarray(f, dtype=float),
                           np.log(lam))
        return y * log_lam - lam - gammaln(y + 1.0)

    def log_phi_d1(self, y, f):
        lam = self._rate(f)
        s = _sigmoid(f)
        return (y / lam - 1.0) * s

    def log_phi_d2(self, y, f):
        lam = self._rate(f)
        s = _sigmoid(f)
        return (y / lam - 1.0) * s * (1.0 - s) - (y / lam ** 2) * s * s

    def derivative_bounds(self, y) -> DerivativeBounds:
        return DerivativeBounds(B=1.0, d1_lo=-1.0, d1_hi=1.0,
                                d2_lo=-2.25, d2_hi=2.25)

    def ell_max(self, y) -> float:
        if y == 0:
            return 1.0
        return float(np.exp(y * math.log(y) - y - gammaln(y + 1.0)))

    def f_mode(self, y) -> float:
        # softplus(f) = y at f = log(e^y - 1)
        return math.log(math.expm1(y)) if y >= 1 else -math.inf

    def conditional_mean(self, f):
        return self._rate(f)


class StudentTLikelihood(Likelihood):
    """Student's t observation noise with dof nu and scale sigma^2 (floored)."""

    kind = "student-t"

    def __init__(self, nu: float, variance: float):
        if nu <= 0 or variance <= 0:
            raise InputError("student-t needs nu > 0 and variance > 0")
        self.nu = float(nu)
        self.variance = max(float(variance), MIN_CONTINUOUS_VARIANCE)

    @property
    def _log_c(self) -> float:
        nu, s2 = self.nu, self.variance
        return float(gammaln((nu + 1.0) / 2.0) - gammaln(nu / 2.0)
                     - 0.5 * math.log(math.pi * nu * s2))

    def log_phi(self, y, f):
        u = y - f
        return self._log_c - 0.5 * (self.nu + 1.0) * np.log1p(
            u * u / (self.variance * self.nu))

    def log_phi_d1(self, y, f):
        u = y - f
        return (self.nu + 1.0) * u / (self.variance * self.nu + u * u)

    def log_phi_d2(self, y, f):
        u = y - f
        den = self.variance * self.nu + u * u
        return (self.nu + 1.0) * (u * u - self.variance * self.nu) / (den * den)

    def derivative_bounds(self, y) -> DerivativeBounds:
        nu, s2 = self.nu, self.variance
        sigma = math.sqrt(s2)
        c = math.exp(self._log_c)
        d1 = (c / sigma) * ((nu + 1.0) / nu) * math.sqrt(nu / (nu + 2.0)) \
            / ((nu + 3.0) / (nu + 2.0)) ** ((nu + 3.0) / 2.0)
        d2_lo = -(c / s2) * (nu + 1.0) / nu
        d2_hi = 2.0 * (c / s2) * ((nu + 1.0) / nu) \
            * ((nu + 2.0) / (nu + 5.0)) ** ((nu + 5.0) / 2.0)
        return DerivativeBounds(B=c, d1_lo=-d1, d1_hi=d1, d2_lo=d2_lo, d2_hi=d2_hi)

    def ell_max(self, y) -> float:
        return math.exp(self._log_c)

    def f_mode(self, y) -> float:
        return float(y)

    def conditional_mean(self, f):
        return f


def _sigmoid(f):
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    e = np.exp(f[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# mode-centered quadrature over N(mu, v) p(y | f)
# ---------------------------------------------------------------------------

def product_mode_batch(lik: Likelihood, y, mu, v, iters: int = 30):
    """Mode f_hat and Laplace scale s2_hat of N(f; mu, v) p(y|f) per point.

    A clipped Newton iteration on the concave log product; the curvature is
    forced negative as a safeguard for heavy-tailed likelihoods, and the
    scale is clamped to [1e-12 v, 100 v].
    """
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    y = np.asarray(y)
    f = mu.copy()
    cap = 4.0 * np.sqrt(v) + 1.0
    for _ in range(iters):
        d1 = -(f - mu) / v + lik.log_phi_d1(y, f)
        d2 = -1.0 / v + lik.log_phi_d2(y, f)
        d2 = np.where(d2 < -1e-12, d2, -1.0 / v)
        step = np.clip(-d1 / d2, -cap, cap)
        f = f + step
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(f))):
            break
    d2 = -1.0 / v + lik.log_phi_d2(y, f)
    d2 = np.where(d2 < -1e-12, d2, -1.0 / v)
    s2 = np.clip(-1.0 / d2, 1e-12 * v, 100.0 * v)
    return f, s2


def adaptive_log_weights(lik: Likelihood, y, mu, v,
                         nodes: int = DEFAULT_QUAD_NODES):
    """Log integrand terms of the recentered rule, such that
    logsumexp(terms, axis=1) = log E_{N(mu,v)}[p(y|f)], plus the node matrix.

    Normalizing exp(terms) row-wise gives weights w with
    sum_k w_k g(f_k) ~ E[g p] / E[p] for any g, which is how the exact
    gradient ratios are computed.
    """
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    y = np.asarray(y)
    f_hat, s2_hat = product_mode_batch(lik, y, mu, v)
    x, _, logw = gauss_hermite_nodes(nodes)
    f = f_hat[:, None] + np.sqrt(2.0 * s2_hat)[:, None] * x[None, :]
    log_q = (-0.5 * np.log(2.0 * math.pi * v)[:, None]
             - 0.5 * (f - mu[:, None]) ** 2 / v[:, None])
    log_h = (-0.5 * np.log(2.0 * math.pi * s2_hat)[:, None]
             - 0.5 * (f - f_hat[:, None]) ** 2 / s2_hat[:, None])
    y_col = np.atleast_1d(y)[:, None]
    terms = logw[None, :] + log_q + lik.log_phi(y_col, f) - log_h
    return terms, f


_KINDS = {
    "gaussian": GaussianLikelihood,
    "probit": ProbitLikelihood,
    "logistic": LogisticLikelihood,
    "poisson-exp": PoissonExpLikelihood,
    "poisson-softplus": PoissonSoftplusLikelihood,
    "student-t": StudentTLikelihood,
}


def make_likelihood(kind: str, **params) -> Likelihood:
    """Instantiate a likelihood by kind name.

    gaussian(variance), probit(), logistic(), poisson-exp(),
    poisson-softplus(), student-t(nu, variance).
    """
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise InputError(f"unknown likelihood kind {kind!r}; "
                         f"expected one of {sorted(_KINDS)}") from None
    return cls(**params)


# ---------------------------------------------------------------------------
# module-level operation surface
# ---------------------------------------------------------------------------

def phi(lik: Likelihood, y, f):
    """Density value and first two f-derivatives at f: (phi, phi', phi'')."""
    return lik.phi_triplet(y, f)


def derivative_bounds(lik: Likelihood, y) -> DerivativeBounds:
    return lik.derivative_bounds(y)


def analytic_log_predictive(lik: Likelihood, mu: float, v: float, y):
    """Exact -log E_{N(mu,v)}[p(y|f)] or None when no closed form exists."""
    if v < 0:
        raise InputError("negative marginal variance")
    return lik.analytic_log_predictive(mu, v, y)


def quadrature_log_predictive(lik: Likelihood, mu: float, v: float, y,
                              nodes: int = DEFAULT_QUAD_NODES) -> float:
    return lik.quadrature_log_predictive(mu, v, y, nodes=nodes)


def predictive_mean(lik: Likelihood, mu: float, v: float,
                    nodes: int = DEFAULT_QUAD_NODES) -> float:
    if v < 0:
        raise InputError("negative marginal variance")
    return lik.predictive_mean(mu, v, nodes=nodes)


def ell_max(lik: Likelihood, y) -> float:
    return lik.ell_max(y)
