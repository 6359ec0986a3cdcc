"""Empirical checks on gradient estimators and derivative bounds.

``estimate_bias`` repeats an estimator on a fixed point set and compares the
mean estimate against a reference gradient (analytic where available, or a
large-sample biased-MC estimate). Alongside the per-block bias it reports the
two step-direction statistics

    c1 = (grad_h . g_hat) / |grad_h|^2      and      c2 = |g_hat| / |grad_h|,

once with g_hat the mean estimate over repeats (systematic part) and once
averaged per repeat (per-step direction). For the exact estimator both equal
one. The smallest observed Monte Carlo denominator (1/L) sum phi is reported
as a proxy for the positive lower bound the convergence analysis assumes; it
is a proxy only, not an estimate of that bound.

``check_bounds`` sweeps the closed-form envelopes for phi, phi', phi'' over a
dense latent grid, ``fd_gradient_check`` compares analytic gradients with
central differences, and ``schedule_calculator`` tabulates the theoretical
per-step (gamma_t, delta_t, L_t, nu_t) schedules without wiring them into
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError
from .estimators import (EstimatorConfig, objective_gradient,
                         required_sample_size)
from .kernels import KernelModel, VariationalPosterior
from .likelihoods import DerivativeBounds, Likelihood
from .objectives import ObjectiveSpec


@dataclass
class BiasReport:
    estimator_kind: str
    samples: int
    repeats: int
    reference_kind: str
    reference_samples: int | None
    bias: dict
    standard_error: dict
    c1_systematic: float
    c2_systematic: float
    c1_step_mean: float
    c2_step_mean: float
    denominator_min_proxy: float | None
    reference: dict = field(default_factory=dict)

    def bias_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.bias.values()])

    def se_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.standard_error.values()])


def _flat_gradient(g) -> np.ndarray:
    return np.concatenate([g.grad_m, g.grad_LV.ravel()])


def estimate_bias(data, model: KernelModel, q: VariationalPosterior,
                  lik: Likelihood, est: EstimatorConfig,
                  reference: str = "exact", reference_samples: int = 10000,
                  repeats: int = 1000, seed: int = 0,
                  spec: ObjectiveSpec | None = None) -> BiasReport:
    """Mean estimator output minus a reference gradient, per parameter block.

    ``reference`` is "exact" or "bmc"; the latter averages a biased-MC
    estimate with ``reference_samples`` draws over the repeats. Repeats use
    independent stream steps so the report is reproducible under ``seed``.
    """
    if repeats < 30:
        raise InputError("bias estimation needs at least 30 repeats")
    spec = spec or ObjectiveSpec(kind="dlm-log", beta=1.0)
    X = np.asarray(data[0], dtype=float)
    indices = np.arange(X.shape[0])

    if reference == "exact":
        ref = objective_gradient(data, model, q, lik, spec,
                                 EstimatorConfig(kind="exact"))
        ref_vec = _flat_gradient(ref)
        ref_samples = None
    elif reference == "bmc":
        cfg = EstimatorConfig(kind="bmc", samples=reference_samples,
                              rng_seed=seed + 1)
        acc = None
        for r in range(repeats):
            g = objective_gradient(data, model, q, lik, spec, cfg,
                                   step=r, indices=indices)
            vec = _flat_gradient(g)
            acc = vec if acc is None else acc + vec
        ref_vec = acc / repeats
        ref_samples = reference_samples
    else:
        raise InputError("reference must be 'exact' or 'bmc'")

    est = replace(est, rng_seed=seed)
    sum_v = None
    sum_sq = None
    c1_steps = []
    c2_steps = []
    denom_min = math.inf
    ref_norm2 = float(ref_vec @ ref_vec)
    for r in range(repeats):
        g = objective_gradient(data, model, q, lik, spec, est,
                               step=r, indices=indices)
        vec = _flat_gradient(g)
        sum_v = vec if sum_v is None else sum_v + vec
        sum_sq = vec * vec if sum_sq is None else sum_sq + vec * vec
        c1_steps.append(float(ref_vec @ vec) / ref_norm2)
        c2_steps.append(float(np.linalg.norm(vec)) / math.sqrt(ref_norm2))
        proxy = g.telemetry.get("min_mean_phi")
        if proxy is not None:
            denom_min = min(denom_min, proxy)
    mean_vec = sum_v / repeats
    var_vec = np.maximum(sum_sq / repeats - mean_vec ** 2, 0.0)
    se_vec = np.sqrt(var_vec / repeats)

    M = model.num_inducing
    split = lambda v: {"m": v[:M], "LV": v[M:].reshape(M, M)}
    bias_vec = mean_vec - ref_vec
    return BiasReport(
        estimator_kind=est.kind, samples=est.samples, repeats=repeats,
        reference_kind=reference, reference_samples=ref_samples,
        bias=split(bias_vec), standard_error=split(se_vec),
        c1_systematic=float(ref_vec @ mean_vec) / ref_norm2,
        c2_systematic=float(np.linalg.norm(mean_vec)) / math.sqrt(ref_norm2),
        c1_step_mean=float(np.mean(c1_steps)),
        c2_step_mean=float(np.mean(c2_steps)),
        denominator_min_proxy=None if denom_min is math.inf else denom_min,
        reference={"kind": reference, "samples": ref_samples})


# ---------------------------------------------------------------------------
# bound verification
# ---------------------------------------------------------------------------

@dataclass
class BoundCheck:
    passed: bool
    worst_slack: float
    worst_location: dict
    margins: list


def check_bounds(lik: Likelihood, ys, f_grid=None,
                 slack_tol: float = 1e-12) -> BoundCheck:
    """Verify 0 <= phi <= B, the phi' envelope and the phi'' envelope on a
    dense grid; reports the tightest margin and where it occurs."""
    if f_grid is None:
        f_grid = np.linspace(-20.0, 20.0, 8001)
    f_grid = np.asarray(f_grid, dtype=float)
    worst = math.inf
    where = {}
    margins = []
    for y in np.atleast_1d(ys):
        b = lik.derivative_bounds(y)
        p, p1, p2 = lik.phi_triplet(y, f_grid)
        checks = [("phi_upper", b.B - p), ("phi_lower", p),
                  ("d1_upper", b.d1_hi - p1), ("d1_lower", p1 - b.d1_lo),
                  ("d2_upper", b.d2_hi - p2), ("d2_lower", p2 - b.d2_lo)]
        for name, slack in checks:
            k = int(np.argmin(slack))
            m = float(slack[k])
            margins.append({"y": y, "bound": name, "slack": m,
                            "f": float(f_grid[k])})
            if m < worst:
                worst = m
                where = {"y": y, "bound": name, "f": float(f_grid[k])}
    return BoundCheck(passed=worst >= -slack_tol, worst_slack=worst,
                      worst_location=where, margins=margins)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_gradient_check(value_fn, grad_fn, x0, step: float = 1e-4):
    """Max relative disagreement between grad_fn(x0) and central differences.

    Each coordinate is scaled by the larger of its two gradient magnitudes
    with a floor at 1e-3 of the largest finite-difference entry, so near-zero
    coordinates do not inflate the error."""
    x0 = np.asarray(x0, dtype=float)
    g = np.asarray(grad_fn(x0), dtype=float)
    fd = np.empty_like(x0)
    for i in range(x0.shape[0]):
        e = np.zeros_like(x0)
        e[i] = step
        fd[i] = (value_fn(x0 + e) - value_fn(x0 - e)) / (2.0 * step)
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(g)),
                       max(1e-3 * float(np.max(np.abs(fd))), 1e-10))
    return float(np.max(np.abs(g - fd) / scale))


# ---------------------------------------------------------------------------
# theoretical schedules
# ---------------------------------------------------------------------------

def schedule_calculator(delta: float, horizon: int, n_data: int = 1,
                        gamma=None, bounds: DerivativeBounds | None = None,
                        moment_estimates=(1.0, None, None),
                        zeta: float = 1.0) -> list:
    """Per-step (gamma_t, delta_t, L_t, nu_t) for t = 1..horizon.

    delta is split as delta_t = (6 / pi^2) delta / t^2, which sums back to
    delta; nu_t = gamma_t * zeta; L_t uses the sample-size bound and is left
    None where gamma_t reaches 1 (the bound needs gamma_t < 1). Reporting
    only; training keeps a fixed sample count.
    """
    if not (0.0 < delta < 1.0):
        raise InputError("delta must lie in (0, 1)")
    if gamma is None:
        gamma = lambda t: 1.0 / t
    if bounds is None:
        bounds = DerivativeBounds(B=1.0, d1_lo=0.0, d1_hi=1.0,
                                  d2_lo=0.0, d2_hi=1.0)
    rows = []
    for t in range(1, horizon + 1):
        g = float(gamma(t))
        if not (0.0 < g <= 1.0):
            raise InputError("gamma_t must lie in (0, 1]")
        d_t = (6.0 / math.pi ** 2) * delta / (t * t)
        L_t = None
        if g < 1.0:
            L_t = required_sample_size(n_data, d_t, g, bounds, moment_estimates)
        rows.append({"t": t, "gamma": g, "delta": d_t, "L": L_t,
                     "nu": g * zeta})
    return rows
