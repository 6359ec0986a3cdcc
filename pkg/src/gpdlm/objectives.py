"""Training objectives.

Three objectives share the structure "per-point loss + beta * KL":

* ``elbo``: per-point loss is the expected negative log density
  E_{q(f_i)}[-log p(y_i | f_i)], analytic for Gaussian noise and computed by
  Gauss-Hermite quadrature otherwise.
* ``dlm-log``: per-point loss is the negative log predictive
  -log E_{q(f_i)}[p(y_i | f_i)], analytic for Gaussian and probit, quadrature
  otherwise.
* ``dlm-square``: half squared error of the predictive mean; the objective
  depends on m only (the regularizer reduces to beta/2 * m^T Kuu^{-1} m) and
  admits a one-step closed-form solution in m.

``loss_scaling="mean"`` divides the whole objective by the number of points.
A minibatch evaluation scales the data term by n/|batch| and keeps the
regularizer whole, so the stochastic objective is unbiased for the full one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import InputError, NumericalError
from .kernels import (KernelMatrices, KernelModel, VariationalPosterior,
                      kernel_matrices, kl_gaussian, posterior_marginals)
from .likelihoods import (DEFAULT_QUAD_NODES, GaussianLikelihood, Likelihood,
                          adaptive_log_weights, gauss_hermite_nodes)

OBJECTIVE_KINDS = ("elbo", "dlm-log", "dlm-square")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    beta: float = 1.0
    loss_scaling: str = "sum"

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise InputError(f"unknown objective kind {self.kind!r}")
        if self.beta < 0:
            raise InputError("beta must be nonnegative")
        if self.loss_scaling not in ("sum", "mean"):
            raise InputError("loss_scaling must be 'sum' or 'mean'")

    def scale(self, n: int) -> float:
        return 1.0 / n if self.loss_scaling == "mean" else 1.0


def beta_grid(n: int, floor: float = 0.01) -> list[float]:
    """Model-selection grid: n halved repeatedly while >= floor, then floor."""
    grid = []
    b = float(n)
    while b >= floor:
        grid.append(b)
        b /= 2.0
    grid.append(floor)
    return grid


# ---------------------------------------------------------------------------
# per-point loss terms
# ---------------------------------------------------------------------------

def expected_nlog_terms(lik: Likelihood, mu, v, y,
                        nodes: int = DEFAULT_QUAD_NODES) -> np.ndarray:
    """E_{N(mu_i, v_i)}[-log p(y_i|f)] per point (the elbo data term)."""
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    y = np.asarray(y)
    if isinstance(lik, GaussianLikelihood):
        s2 = lik.variance
        return 0.5 * math.log(2.0 * math.pi * s2) + ((y - mu) ** 2 + v) / (2.0 * s2)
    x, w, _ = gauss_hermite_nodes(nodes)
    f = mu[:, None] + np.sqrt(2.0 * np.maximum(v, 0.0))[:, None] * x[None, :]
    vals = -lik.log_phi(y[:, None], f)
    return vals @ w / math.sqrt(math.pi)


def nlog_predictive_terms(lik: Likelihood, mu, v, y,
                          nodes: int = DEFAULT_QUAD_NODES) -> np.ndarray:
    """-log E_{N(mu_i, v_i)}[p(y_i|f)] per point (the dlm-log data term).

    Analytic forms where they exist, the mode-centered quadrature otherwise.
    """
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    y = np.asarray(y)
    analytic = lik.analytic_log_predictive(float(mu.flat[0]), float(v.flat[0]),
                                           np.asarray(y).flat[0])
    if analytic is not None:
        return np.array([lik.analytic_log_predictive(float(m_), float(v_), y_)
                         for m_, v_, y_ in zip(mu, v, y)])
    terms, _ = adaptive_log_weights(lik, y, mu, np.maximum(v, 1e-300), nodes)
    m = np.max(terms, axis=1)
    return -(m + np.log(np.sum(np.exp(terms - m[:, None]), axis=1)))


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _data_and_kl(data, model, q, spec, mats=None):
    X, y = data
    mu, v, _, _, mats = posterior_marginals(model, q, np.asarray(X, dtype=float),
                                            mats)
    return np.asarray(y), mu, v, kl_gaussian(q, model, mats), mats


def elbo_objective(data, model: KernelModel, q: VariationalPosterior,
                   lik: Likelihood, spec: ObjectiveSpec,
                   nodes: int = DEFAULT_QUAD_NODES,
                   mats: KernelMatrices | None = None) -> float:
    """Negative evidence lower bound with a beta-weighted KL."""
    if spec.kind != "elbo":
        raise InputError("spec.kind must be 'elbo'")
    y, mu, v, kl, _ = _data_and_kl(data, model, q, spec, mats)
    s = spec.scale(y.shape[0])
    return float(s * (np.sum(expected_nlog_terms(lik, mu, v, y, nodes))
                      + spec.beta * kl))


def dlm_log_objective(data, model: KernelModel, q: VariationalPosterior,
                      lik: Likelihood, spec: ObjectiveSpec,
                      nodes: int = DEFAULT_QUAD_NODES,
                      mats: KernelMatrices | None = None) -> float:
    """Log-loss of the Bayesian predictive, plus beta * KL."""
    if spec.kind != "dlm-log":
        raise InputError("spec.kind must be 'dlm-log'")
    y, mu, v, kl, _ = _data_and_kl(data, model, q, spec, mats)
    s = spec.scale(y.shape[0])
    return float(s * (np.sum(nlog_predictive_terms(lik, mu, v, y, nodes))
                      + spec.beta * kl))


def dlm_square_objective(data, model: KernelModel, q: VariationalPosterior,
                         spec: ObjectiveSpec,
                         mats: KernelMatrices | None = None) -> float:
    """Half squared error of the predictive mean plus beta/2 * m^T Kuu^{-1} m.

    The posterior covariance does not enter; ``q.L`` is left untouched by any
    optimization of this objective.
    """
    if spec.kind != "dlm-square":
        raise InputError("spec.kind must be 'dlm-square'")
    X, y = data
    y = np.asarray(y, dtype=float)
    if mats is None:
        mats = kernel_matrices(model, np.asarray(X, dtype=float))
    A = cho_solve((mats.L_uu, True), mats.K_fu.T)
    pred = A.T @ q.m + model.mean_offset()
    alpha = cho_solve((mats.L_uu, True), q.m)
    s = spec.scale(y.shape[0])
    return float(s * (0.5 * np.sum((pred - y) ** 2)
                      + 0.5 * spec.beta * (q.m @ alpha)))


def dlm_square_solve(data, model: KernelModel, spec: ObjectiveSpec) -> np.ndarray:
    """Closed-form minimizer of the square-loss objective in m.

    Solves (Phi^T Phi + beta Kuu^{-1}) m = Phi^T (y - b1) with
    Phi = K_fu Kuu^{-1}. With beta = 0 the system can be singular, in which
    case a :class:`NumericalError` advises using beta > 0.
    """
    X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    mats = kernel_matrices(model, X)
    Phi = cho_solve((mats.L_uu, True), mats.K_fu.T).T
    Kinv = cho_solve((mats.L_uu, True), np.eye(model.num_inducing))
    H = Phi.T @ Phi + spec.beta * Kinv
    rhs = Phi.T @ (y - model.mean_offset())
    try:
        c = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "square-loss normal equations are singular; use beta > 0") from None
    d = np.diag(c)
    if np.min(d) <= 1e-10 * np.max(d):
        raise NumericalError(
            "square-loss normal equations are numerically singular; "
            "use beta > 0")
    return cho_solve((c, True), rhs)


def objective_value(data, model, q, lik, spec: ObjectiveSpec,
                    nodes: int = DEFAULT_QUAD_NODES,
                    mats: KernelMatrices | None = None) -> float:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "elbo":
        return elbo_objective(data, model, q, lik, spec, nodes, mats)
    if spec.kind == "dlm-log":
        return dlm_log_objective(data, model, q, lik, spec, nodes, mats)
    return dlm_square_objective(data, model, q, spec, mats)
