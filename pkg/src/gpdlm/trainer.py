"""Optimization loop and model selection.

Training runs Adam on the variational parameters (m and the Cholesky factor
of V, with a log diagonal) and, in ``joint`` mode, also on the log kernel
scales, the log noise variance, the constant mean and the inducing inputs.
``fixed-hyper`` mode freezes everything except the posterior, which is how a
donor model trained under one objective is re-fit under another.

Convergence follows a window rule: stop once the spread (max minus min) of
the objective over the last I recorded values drops to the tolerance. In
full-batch mode the objective is recorded every iteration; with minibatches it
is recorded once per epoch on the full data.

The square-loss objective is quadratic in m, so its m-update is a single
closed-form solve; joint mode alternates that solve with short runs of Adam
steps on the hyperparameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, NumericalError
from .estimators import (EstimatorConfig, GradientEstimate, objective_gradient,
                         point_stream)
from .kernels import (ARD_RBF, ISO_RBF, KernelModel, VariationalPosterior,
                      kernel_matrices, posterior_marginals)
from .likelihoods import (GaussianLikelihood, Likelihood, PoissonExpLikelihood,
                          make_likelihood)
from .objectives import ObjectiveSpec, beta_grid, dlm_square_solve, objective_value

_INIT_STREAM = 0xFFFFFFFE
_SQ_HYPER_STEPS_PER_SOLVE = 10


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float | None = None   # resolved: 1e-1 batch, 1e-3 stochastic
    max_iters: int | None = None         # resolved: 5000 regression, 3000 otherwise
    convergence_window: int | None = None  # resolved: 50 regression, 20 otherwise
    convergence_tol: float = 1e-4
    batch_size: int | None = None        # None = full batch
    mode: str = "joint"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0                  # record metrics every k epochs (0 = off)

    def __post_init__(self):
        if self.mode not in ("joint", "fixed-hyper"):
            raise InputError(f"unknown training mode {self.mode!r}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if self.convergence_window is not None and self.convergence_window < 2:
            raise InputError("convergence window must be >= 2")

    def resolved(self, task: str, n: int) -> "TrainConfig":
        stochastic = self.batch_size is not None and self.batch_size < n
        lr = self.learning_rate if self.learning_rate is not None else \
            (1e-3 if stochastic else 1e-1)
        regression = task == "regression"
        iters = self.max_iters if self.max_iters is not None else \
            (5000 if regression else 3000)
        window = self.convergence_window if self.convergence_window is not None \
            else (50 if regression else 20)
        return replace(self, learning_rate=lr, max_iters=iters,
                       convergence_window=window)


@dataclass
class TrainResult:
    model: KernelModel
    q: VariationalPosterior
    objective_trace: list
    metric_trace: list
    converged: bool
    iterations: int
    wall_ms: float
    wall_ms_per_iter: float
    telemetry: dict = None


def _merge_telemetry(total: dict, tel: dict) -> None:
    for key in ("accepted_samples", "rejected_samples", "zero_phi_points"):
        if key in tel:
            total[key] = total.get(key, 0) + tel[key]
    for width, count in tel.get("chosen_widths", {}).items():
        hist = total.setdefault("chosen_widths", {})
        hist[width] = hist.get(width, 0) + count
    if "min_mean_phi" in tel:
        total["min_mean_phi"] = min(total.get("min_mean_phi", math.inf),
                                    tel["min_mean_phi"])


def task_of(lik: Likelihood) -> str:
    if lik.kind == "gaussian" or lik.kind == "student-t":
        return "regression"
    if lik.kind in ("probit", "logistic"):
        return "binary"
    return "count"


def _likelihood_for(model: KernelModel, lik: Likelihood) -> Likelihood:
    """Regression reads the observation variance from the model so joint
    training of the noise stays consistent."""
    if isinstance(lik, GaussianLikelihood) and model.noise_variance is not None:
        return GaussianLikelihood(model.noise_variance)
    return lik


# ---------------------------------------------------------------------------
# parameter packing
# ---------------------------------------------------------------------------

class ParameterPacker:
    """Flattens (q, model) into one optimization vector.

    The posterior block holds m, log diag(L) and the strictly lower entries of
    L. Joint mode appends log signal variance, log lengthscales, log noise
    variance (when present), the constant mean (when present) and Z.
    """

    def __init__(self, model: KernelModel, include_posterior=True,
                 include_hypers=False):
        self.M = model.num_inducing
        self.d = model.input_dim
        self.include_posterior = include_posterior
        self.include_hypers = include_hypers
        self.tril_idx = np.tril_indices(self.M, k=-1)
        self.n_ls = model.lengthscales.shape[0]
        self.has_noise = model.noise_variance is not None
        self.has_mean = model.mean_kind == "constant"

    def pack(self, model: KernelModel, q: VariationalPosterior) -> np.ndarray:
        parts = []
        if self.include_posterior:
            parts += [q.m, np.log(np.diag(q.L)), q.L[self.tril_idx]]
        if self.include_hypers:
            parts += [[np.log(model.signal_variance)],
                      np.log(model.lengthscales)]
            if self.has_noise:
                parts.append([np.log(model.noise_variance)])
            if self.has_mean:
                parts.append([model.mean_const])
            parts.append(model.Z.ravel())
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack(self, x: np.ndarray, model: KernelModel,
               q: VariationalPosterior):
        pos = 0
        if self.include_posterior:
            m = x[pos:pos + self.M]; pos += self.M
            L = np.zeros((self.M, self.M))
            with np.errstate(over="ignore"):
                # underflow to an exact zero would fail posterior validation
                # before the divergence guard can report it
                diag = np.maximum(np.exp(x[pos:pos + self.M]), 1e-300)
            L[np.diag_indices(self.M)] = diag; pos += self.M
            k = self.tril_idx[0].shape[0]
            L[self.tril_idx] = x[pos:pos + k]; pos += k
            q = VariationalPosterior(m=m, L=L)
        if self.include_hypers:
            with np.errstate(over="ignore"):
                # keep underflowed scales positive; diverging values become
                # inf and trip the finite-kernel check with a usable trace
                sv = float(max(np.exp(x[pos]), 1e-300)); pos += 1
                ls = np.maximum(np.exp(x[pos:pos + self.n_ls]), 1e-300)
                pos += self.n_ls
                kw = dict(signal_variance=sv, lengthscales=ls)
                if self.has_noise:
                    kw["noise_variance"] = float(max(np.exp(x[pos]), 1e-300))
                    pos += 1
            if self.has_mean:
                kw["mean_const"] = float(x[pos]); pos += 1
            kw["Z"] = x[pos:pos + self.M * self.d].reshape(self.M, self.d)
            pos += self.M * self.d
            model = model.with_updates(**kw)
        return model, q

    def pack_grad(self, g: GradientEstimate, model: KernelModel,
                  q: VariationalPosterior) -> np.ndarray:
        parts = []
        if self.include_posterior:
            diag = np.diag(g.grad_LV) * np.diag(q.L)  # chain rule for log diag
            parts += [g.grad_m, diag, g.grad_LV[self.tril_idx]]
        if self.include_hypers:
            h = g.grad_hyper
            parts += [[h["log_signal_variance"]], h["log_lengthscales"]]
            if self.has_noise:
                parts.append([h.get("log_noise_variance", 0.0)])
            if self.has_mean:
                parts.append([h.get("mean_const", 0.0)])
            parts.append(h["Z"].ravel())
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])


class AdamState:
    def __init__(self, dim: int, cfg: TrainConfig):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.cfg = cfg

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.adam_beta1 * self.m + (1.0 - c.adam_beta1) * grad
        self.v = c.adam_beta2 * self.v + (1.0 - c.adam_beta2) * grad * grad
        mhat = self.m / (1.0 - c.adam_beta1 ** self.t)
        vhat = self.v / (1.0 - c.adam_beta2 ** self.t)
        return x - c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps)


def _window_converged(trace, window, tol) -> bool:
    if len(trace) < window:
        return False
    tail = trace[-window:]
    return max(tail) - min(tail) <= tol


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def initialize_model(X, y, task: str, M: int, seed: int = 0,
                     kernel_kind: str = ISO_RBF,
                     jitter_scale: float = 1e-6) -> KernelModel:
    """Seeded default model: unit scales, noise 0.1 for regression, constant
    zero mean for binary labels, inducing inputs a random subset of X."""
    X = np.asarray(X, dtype=float)
    if M > X.shape[0]:
        raise InputError("more inducing points than training points")
    rng = point_stream(seed, 0, _INIT_STREAM)
    idx = rng.choice(X.shape[0], size=M, replace=False)
    ls = np.ones(X.shape[1] if kernel_kind == ARD_RBF else 1)
    return KernelModel(
        kernel_kind=kernel_kind, lengthscales=ls, signal_variance=1.0,
        Z=X[np.sort(idx)].copy(),
        mean_kind="constant" if task == "binary" else "zero",
        mean_const=0.0,
        noise_variance=0.1 if task == "regression" else None,
        jitter_scale=jitter_scale)


def initialize_posterior(model: KernelModel) -> VariationalPosterior:
    """Start at the prior: m = 0, V = K_uu."""
    mats = kernel_matrices(model, np.zeros((0, model.input_dim)))
    return VariationalPosterior(m=np.zeros(model.num_inducing),
                                L=mats.L_uu.copy())


def default_likelihood(task: str, model: KernelModel) -> Likelihood:
    if task == "regression":
        return GaussianLikelihood(model.noise_variance)
    if task == "binary":
        return make_likelihood("probit")
    return PoissonExpLikelihood()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(data, model: KernelModel, q: VariationalPosterior, lik: Likelihood,
          spec: ObjectiveSpec, est: EstimatorConfig, cfg: TrainConfig,
          eval_data=None) -> TrainResult:
    """Optimize the requested objective; see the module docstring for the
    convergence and mode semantics."""
    X = np.asarray(data[0], dtype=float)
    y = np.asarray(data[1])
    if X.shape[0] != y.shape[0]:
        raise InputError("feature/label row mismatch")
    task = task_of(lik)
    cfg = cfg.resolved(task, X.shape[0])
    if spec.kind == "dlm-square":
        return _train_square(X, y, model, q, spec, est, cfg, lik)
    return _train_iterative(X, y, model, q, lik, spec, est, cfg, eval_data)


def _train_iterative(X, y, model, q, lik, spec, est, cfg, eval_data):
    n = X.shape[0]
    joint = cfg.mode == "joint"
    packer = ParameterPacker(model, include_posterior=True, include_hypers=joint)
    x = packer.pack(model, q)
    adam = AdamState(x.shape[0], cfg)
    stochastic = cfg.batch_size is not None and cfg.batch_size < n
    fixed_mats = None if joint else kernel_matrices(model, X)

    trace: list[float] = []
    metric_trace: list[dict] = []
    telemetry: dict = {}
    converged = False
    t0 = time.perf_counter()
    iters = 0

    def full_value(mdl, qq):
        mats = fixed_mats if not joint else None
        return objective_value((X, y), mdl, qq, _likelihood_for(mdl, lik),
                               spec, mats=mats)

    def record(value, mdl, qq, epoch):
        trace.append(value)
        if not np.isfinite(value):
            raise NumericalError("objective diverged", trace=trace)
        if eval_data is not None and cfg.eval_every > 0 \
                and epoch % cfg.eval_every == 0:
            metrics = evaluate(mdl, qq, _likelihood_for(mdl, lik), eval_data)
            metric_trace.append({"iteration": iters, **metrics})

    try:
        if stochastic:
            epoch = 0
            while iters < cfg.max_iters and not converged:
                perm = point_stream(cfg.seed, epoch,
                                    _INIT_STREAM - 1).permutation(n)
                for lo in range(0, n, cfg.batch_size):
                    idx = perm[lo:lo + cfg.batch_size]
                    mdl, qq = packer.unpack(x, model, q)
                    g = objective_gradient(
                        (X[idx], y[idx]), mdl, qq, _likelihood_for(mdl, lik),
                        spec, est, step=iters, indices=idx, n_full=n,
                        include_hypers=joint)
                    _merge_telemetry(telemetry, g.telemetry)
                    x = adam.step(x, packer.pack_grad(g, mdl, qq))
                    iters += 1
                    if iters >= cfg.max_iters:
                        break
                epoch += 1
                mdl, qq = packer.unpack(x, model, q)
                record(full_value(mdl, qq), mdl, qq, epoch)
                converged = _window_converged(trace, cfg.convergence_window,
                                              cfg.convergence_tol)
        else:
            indices = np.arange(n)
            while iters < cfg.max_iters and not converged:
                mdl, qq = packer.unpack(x, model, q)
                g = objective_gradient(
                    (X, y), mdl, qq, _likelihood_for(mdl, lik), spec, est,
                    step=iters, indices=indices, n_full=n, include_hypers=joint,
                    mats=fixed_mats)
                _merge_telemetry(telemetry, g.telemetry)
                record(full_value(mdl, qq), mdl, qq, iters)
                x = adam.step(x, packer.pack_grad(g, mdl, qq))
                iters += 1
                converged = _window_converged(trace, cfg.convergence_window,
                                              cfg.convergence_tol)
    except NumericalError as exc:
        if exc.trace is None:
            raise NumericalError(f"training diverged: {exc}", trace=trace) \
                from exc
        raise

    model, q = packer.unpack(x, model, q)
    wall = (time.perf_counter() - t0) * 1e3
    return TrainResult(model=model, q=q, objective_trace=trace,
                       metric_trace=metric_trace, converged=converged,
                       iterations=iters, wall_ms=wall,
                       wall_ms_per_iter=wall / max(iters, 1),
                       telemetry=telemetry)


def _train_square(X, y, model, q, spec, est, cfg, lik):
    """Closed-form m-solve; joint mode interleaves Adam steps on hypers."""
    t0 = time.perf_counter()
    if cfg.mode == "fixed-hyper":
        m = dlm_square_solve((X, y), model, spec)
        q = VariationalPosterior(m=m, L=q.L)
        val = objective_value((X, y), model, q, lik, spec)
        wall = (time.perf_counter() - t0) * 1e3
        return TrainResult(model=model, q=q, objective_trace=[val],
                           metric_trace=[], converged=True, iterations=1,
                           wall_ms=wall, wall_ms_per_iter=wall)

    packer = ParameterPacker(model, include_posterior=False, include_hypers=True)
    x = packer.pack(model, q)
    adam = AdamState(x.shape[0], cfg)
    trace: list[float] = []
    converged = False
    iters = 0
    while iters < cfg.max_iters and not converged:
        mdl, _ = packer.unpack(x, model, q)
        if iters % _SQ_HYPER_STEPS_PER_SOLVE == 0:
            q = VariationalPosterior(m=dlm_square_solve((X, y), mdl, spec),
                                     L=q.L)
        g = objective_gradient((X, y), mdl, q, None, spec, est,
                               step=iters, include_hypers=True)
        val = objective_value((X, y), mdl, q, None, spec)
        trace.append(val)
        if not np.isfinite(val):
            raise NumericalError("objective diverged", trace=trace)
        x = adam.step(x, packer.pack_grad(g, mdl, q))
        iters += 1
        converged = _window_converged(trace, cfg.convergence_window,
                                      cfg.convergence_tol)
    model, _ = packer.unpack(x, model, q)
    q = VariationalPosterior(m=dlm_square_solve((X, y), model, spec), L=q.L)
    wall = (time.perf_counter() - t0) * 1e3
    return TrainResult(model=model, q=q, objective_trace=trace,
                       metric_trace=[], converged=converged,
                       iterations=iters, wall_ms=wall,
                       wall_ms_per_iter=wall / max(iters, 1))


# ---------------------------------------------------------------------------
# evaluation and model selection
# ---------------------------------------------------------------------------

def evaluate(model: KernelModel, q: VariationalPosterior, lik: Likelihood,
             data_test) -> dict:
    """Held-out metrics: mean NLL always; squared error for regression, error
    rate for binary labels (ties predicted as class 1), relative error for
    counts."""
    X, y = data_test
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    lik = _likelihood_for(model, lik)
    mu, v, _, _, _ = posterior_marginals(model, q, X)
    task = task_of(lik)

    nll_terms = []
    for m_, v_, y_ in zip(mu, v, y):
        a = lik.analytic_log_predictive(float(m_), float(v_), y_)
        nll_terms.append(a if a is not None
                         else lik.quadrature_log_predictive(float(m_), float(v_), y_))
    out = {"nll": float(np.mean(nll_terms))}

    if task == "regression":
        out["mse"] = float(np.mean((mu - np.asarray(y, dtype=float)) ** 2))
    elif task == "binary":
        p1 = np.array([lik.predictive_mean(float(m_), float(v_))
                       for m_, v_ in zip(mu, v)])
        pred = (p1 >= 0.5).astype(float)
        out["error_rate"] = float(np.mean(pred != np.asarray(y, dtype=float)))
    else:
        yhat = np.array([lik.predictive_mean(float(m_), float(v_))
                         for m_, v_ in zip(mu, v)])
        yf = np.asarray(y, dtype=float)
        out["mre"] = float(np.mean(np.abs(yhat - yf) / np.maximum(1.0, yf)))
        out["mse"] = float(np.mean((yhat - yf) ** 2))
    return out


def validation_score(metrics: dict, spec: ObjectiveSpec) -> float:
    return metrics["mse"] if spec.kind == "dlm-square" else metrics["nll"]


def select_beta(data_train, data_val, spec_template: ObjectiveSpec,
                est: EstimatorConfig, cfg: TrainConfig,
                model: KernelModel, q: VariationalPosterior,
                lik: Likelihood) -> dict:
    """Grid search over the halving grid [n, n/2, ..., 0.01]; the winner is
    the lowest validation loss, ties going to the larger beta. Failed betas
    are recorded and skipped."""
    n = np.asarray(data_train[0]).shape[0]
    if np.asarray(data_val[0]).shape[0] == 0:
        raise InputError("beta selection needs a nonempty validation set")
    records = []
    best = None
    for beta in beta_grid(n):
        spec = replace(spec_template, beta=beta)
        rec = {"beta": beta, "method": spec.kind}
        try:
            res = train(data_train, model, q, lik, spec, est, cfg)
            metrics = evaluate(res.model, res.q, lik, data_val)
            score = validation_score(metrics, spec)
            rec.update({"score": score, "converged": res.converged,
                        "iterations": res.iterations, **{
                            f"val_{k}": val for k, val in metrics.items()}})
            if best is None or score < best["score"]:
                best = rec
        except NumericalError as exc:
            rec.update({"error": str(exc)})
        records.append(rec)
    if best is None:
        raise NumericalError("every beta in the grid failed to train")
    return {"best_beta": best["beta"], "best_score": best["score"],
            "records": records}


# ---------------------------------------------------------------------------
# state round-trip
# ---------------------------------------------------------------------------

def save_state(path, model: KernelModel, q: VariationalPosterior,
               lik: Likelihood) -> None:
    lik_params = {}
    if isinstance(lik, GaussianLikelihood):
        lik_params["variance"] = lik.variance
    if lik.kind == "student-t":
        lik_params = {"nu": lik.nu, "variance": lik.variance}
    np.savez(path,
             kernel_kind=model.kernel_kind,
             lengthscales=model.lengthscales,
             signal_variance=model.signal_variance,
             Z=model.Z, mean_kind=model.mean_kind,
             mean_const=model.mean_const,
             noise_variance=np.nan if model.noise_variance is None
             else model.noise_variance,
             jitter_scale=model.jitter_scale,
             m=q.m, L=q.L, lik_kind=lik.kind,
             lik_params=np.array([lik_params.get("nu", np.nan),
                                  lik_params.get("variance", np.nan)]))


def load_state(path):
    z = np.load(path, allow_pickle=False)
    noise = float(z["noise_variance"])
    model = KernelModel(
        kernel_kind=str(z["kernel_kind"]), lengthscales=z["lengthscales"],
        signal_variance=float(z["signal_variance"]), Z=z["Z"],
        mean_kind=str(z["mean_kind"]), mean_const=float(z["mean_const"]),
        noise_variance=None if np.isnan(noise) else noise,
        jitter_scale=float(z["jitter_scale"]))
    q = VariationalPosterior(m=z["m"], L=z["L"])
    kind = str(z["lik_kind"])
    nu, var = z["lik_params"]
    if kind == "gaussian":
        lik = make_likelihood(kind, variance=float(var))
    elif kind == "student-t":
        lik = make_likelihood(kind, nu=float(nu), variance=float(var))
    else:
        lik = make_likelihood(kind)
    return model, q, lik
