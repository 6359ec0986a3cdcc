"""Kernel evaluation, inducing-point linear algebra and the Gaussian KL term.

The model keeps an RBF kernel (isotropic or per-dimension lengthscales), a set
of inducing inputs Z, an optional constant mean and, for regression, an
observation noise variance. The variational posterior over the inducing values
is N(m, V) with V = L L^T held through its Cholesky factor.

For a test input x the latent marginal under the posterior is Gaussian with

    mu = a^T m + b1,          a  = Kuu^{-1} k(Z, x),   b1 = mean offset,
    v  = a^T V a + b2,        b2 = k(x, x) - k(x, Z) Kuu^{-1} k(Z, x),

which is the projection form every objective and estimator works through.

Gradients with respect to kernel hyperparameters and Z are assembled by the
adjoint route: callers accumulate d(objective)/d(Kuu), d/d(Kfu) and
d/d(diag Kff) and this module contracts them against the kernel derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import InputError, NumericalError

ISO_RBF = "isotropic-RBF"
ARD_RBF = "ARD-RBF"

# jitter escalation: start at jitter_scale * signal_variance, multiply by 10
# until the Cholesky succeeds or the relative jitter exceeds this cap
MAX_RELATIVE_JITTER = 1e-2


@dataclass(frozen=True)
class KernelModel:
    """RBF sparse-GP model state.

    ``lengthscales`` has one entry (isotropic) or one per input dimension
    (ARD). Positivity of the scale parameters is the caller's concern; the
    trainer keeps them positive by optimizing logs.
    """

    kernel_kind: str
    lengthscales: np.ndarray
    signal_variance: float
    Z: np.ndarray
    mean_kind: str = "zero"
    mean_const: float = 0.0
    noise_variance: float | None = None
    jitter_scale: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "lengthscales",
                           np.atleast_1d(np.asarray(self.lengthscales, dtype=float)))
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=float))
        if self.kernel_kind not in (ISO_RBF, ARD_RBF):
            raise InputError(f"unknown kernel kind {self.kernel_kind!r}")
        if self.mean_kind not in ("zero", "constant"):
            raise InputError(f"unknown mean kind {self.mean_kind!r}")
        if self.Z.ndim != 2:
            raise InputError("inducing inputs must be an M x d matrix")
        if self.kernel_kind == ARD_RBF and self.lengthscales.shape[0] != self.Z.shape[1]:
            raise InputError("ARD kernel needs one lengthscale per input dimension")
        if self.kernel_kind == ISO_RBF and self.lengthscales.shape[0] != 1:
            raise InputError("isotropic kernel takes a single lengthscale")
        if np.any(self.lengthscales <= 0) or self.signal_variance <= 0:
            raise InputError("kernel scales must be strictly positive")
        if self.noise_variance is not None and self.noise_variance <= 0:
            raise InputError("noise variance must be strictly positive")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    def mean_offset(self) -> float:
        return self.mean_const if self.mean_kind == "constant" else 0.0

    def with_updates(self, **kw) -> "KernelModel":
        return replace(self, **kw)


@dataclass(frozen=True)
class VariationalPosterior:
    """q(u) = N(m, V) with V = L L^T, L lower triangular, diag(L) > 0."""

    m: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        object.__setattr__(self, "L", np.asarray(self.L, dtype=float))
        M = self.m.shape[0]
        if self.L.shape != (M, M):
            raise InputError("posterior factor shape mismatch")
        if np.any(np.diag(self.L) <= 0):
            raise InputError("posterior Cholesky factor needs a positive diagonal")

    @property
    def V(self) -> np.ndarray:
        return self.L @ self.L.T

    @staticmethod
    def from_covariance(m, V) -> "VariationalPosterior":
        return VariationalPosterior(np.asarray(m, dtype=float),
                                    np.linalg.cholesky(np.asarray(V, dtype=float)))


@dataclass(frozen=True)
class MarginalProjection:
    """Per-input projection coefficients (a1, b1, a2, b2); a2 = a1 for this
    posterior family, and b2 is clamped at zero against round-off."""

    a1: np.ndarray
    b1: float
    a2: np.ndarray
    b2: float

    def moments(self, q: VariationalPosterior) -> tuple[float, float]:
        mu = float(self.a1 @ q.m + self.b1)
        t = q.L.T @ self.a2
        return mu, float(t @ t + self.b2)


@dataclass
class KernelMatrices:
    """Cached kernel quantities for one training-input matrix."""

    K_uu: np.ndarray          # with jitter on the diagonal
    K_fu: np.ndarray
    K_ff_diag: np.ndarray
    L_uu: np.ndarray          # Cholesky of K_uu
    jitter: float
    sqdist_uu: np.ndarray = field(repr=False, default=None)   # scaled, per pair
    sqdist_fu: np.ndarray = field(repr=False, default=None)


def _scaled_sqdist(A, B, lengthscales):
    """sum_d (A_id - B_jd)^2 / l_d^2 for all pairs, clipped at zero."""
    As = A / lengthscales
    Bs = B / lengthscales
    d2 = (np.sum(As * As, axis=1)[:, None] + np.sum(Bs * Bs, axis=1)[None, :]
          - 2.0 * As @ Bs.T)
    return np.maximum(d2, 0.0)


def _broadcast_lengthscales(model: KernelModel) -> np.ndarray:
    if model.kernel_kind == ISO_RBF:
        return np.full(model.input_dim, model.lengthscales[0])
    return model.lengthscales


def kernel_matrices(model: KernelModel, X: np.ndarray) -> KernelMatrices:
    """K_uu (jittered, with its Cholesky), K_fu and the diagonal of K_ff.

    The jitter starts at ``jitter_scale * signal_variance`` and is escalated
    by factors of 10 up to ``1e-2 * signal_variance`` if the factorization
    fails; running past the cap raises :class:`NumericalError`.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(
            f"input dimension {X.shape} incompatible with inducing inputs "
            f"of dimension {model.input_dim}")
    ls = _broadcast_lengthscales(model)
    sv = model.signal_variance
    d_uu = _scaled_sqdist(model.Z, model.Z, ls)
    d_fu = _scaled_sqdist(X, model.Z, ls)
    K_uu_raw = sv * np.exp(-0.5 * d_uu)
    K_fu = sv * np.exp(-0.5 * d_fu)
    K_ff_diag = np.full(X.shape[0], sv)

    if not np.all(np.isfinite(K_uu_raw)):
        raise NumericalError("kernel matrix is not finite")
    jitter = model.jitter_scale * sv
    eye = np.eye(model.num_inducing)
    while True:
        try:
            L = np.linalg.cholesky(K_uu_raw + jitter * eye)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > MAX_RELATIVE_JITTER * sv * (1.0 + 1e-12):
                raise NumericalError(
                    "Cholesky of K_uu failed after jitter escalation") from None
    return KernelMatrices(K_uu=K_uu_raw + jitter * eye, K_fu=K_fu,
                          K_ff_diag=K_ff_diag, L_uu=L, jitter=jitter,
                          sqdist_uu=d_uu, sqdist_fu=d_fu)


def projection_coefficients(model: KernelModel, X: np.ndarray,
                            mats: KernelMatrices | None = None):
    """Batched projections: A (M x n) with columns Kuu^{-1} k(Z, x_i), the
    mean offsets b1 (n,) and the clamped conditional variances b2 (n,)."""
    if mats is None:
        mats = kernel_matrices(model, X)
    A = cho_solve((mats.L_uu, True), mats.K_fu.T)
    b2 = np.maximum(mats.K_ff_diag - np.sum(mats.K_fu.T * A, axis=0), 0.0)
    b1 = np.full(X.shape[0], model.mean_offset())
    return A, b1, b2, mats


def marginal_projection(model: KernelModel, x: np.ndarray) -> MarginalProjection:
    """Projection coefficients for a single input point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    A, b1, b2, _ = projection_coefficients(model, x)
    a = A[:, 0]
    return MarginalProjection(a1=a, b1=float(b1[0]), a2=a, b2=float(b2[0]))


def posterior_marginals(model: KernelModel, q: VariationalPosterior,
                        X: np.ndarray, mats: KernelMatrices | None = None):
    """Latent marginal means and variances for every row of X."""
    A, b1, b2, mats = projection_coefficients(model, X, mats)
    mu = A.T @ q.m + b1
    T = q.L.T @ A
    v = np.sum(T * T, axis=0) + b2
    return mu, v, A, b2, mats


def kl_gaussian(q: VariationalPosterior, model: KernelModel,
                mats: KernelMatrices | None = None) -> float:
    """KL( N(m, V) || N(0, K_uu) ), clamped at zero against round-off."""
    if mats is None:
        mats = kernel_matrices(model, model.Z[:0].reshape(0, model.input_dim))
    L_K = mats.L_uu
    M = model.num_inducing
    W = solve_triangular(L_K, q.L, lower=True)
    alpha = solve_triangular(L_K, q.m, lower=True)
    logdet_K = 2.0 * np.sum(np.log(np.diag(L_K)))
    logdet_V = 2.0 * np.sum(np.log(np.diag(q.L)))
    kl = 0.5 * (np.sum(W * W) + alpha @ alpha - M + logdet_K - logdet_V)
    return float(max(kl, 0.0))


def kl_gaussian_adjoints(q: VariationalPosterior, model: KernelModel,
                         mats: KernelMatrices):
    """Gradients of the KL term: (d/dm, d/dV, d/dK_uu).

    The matrix gradients follow the full convention dF = sum_ij G_ij dM_ij.
    """
    Kinv = cho_solve((mats.L_uu, True), np.eye(model.num_inducing))
    alpha = Kinv @ q.m
    Linv = solve_triangular(q.L, np.eye(q.L.shape[0]), lower=True)
    Vinv = Linv.T @ Linv
    g_m = alpha
    g_V = 0.5 * (Kinv - Vinv)
    g_K = 0.5 * (Kinv - Kinv @ q.V @ Kinv - np.outer(alpha, alpha))
    return g_m, g_V, g_K


def chol_factor_gradient(G_V: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Map a symmetric gradient in V = L L^T to the lower-triangular factor."""
    return np.tril(2.0 * G_V @ L)


def hyper_gradients_from_adjoints(model: KernelModel, X: np.ndarray,
                                  mats: KernelMatrices,
                                  g_K_uu: np.ndarray | None,
                                  g_K_fu: np.ndarray | None,
                                  g_K_ff: np.ndarray | None) -> dict:
    """Contract kernel-matrix adjoints against RBF derivatives.

    Returns gradients with respect to log signal variance, log lengthscales
    and the inducing inputs Z. The jitter is proportional to the signal
    variance, so the jittered diagonal contributes to the signal-variance
    gradient but not to the lengthscale or Z gradients.
    """
    M, d = model.Z.shape
    ls = _broadcast_lengthscales(model)
    K_uu_raw = mats.K_uu - mats.jitter * np.eye(M)
    out = {"log_signal_variance": 0.0,
           "log_lengthscales": np.zeros(model.lengthscales.shape[0]),
           "Z": np.zeros_like(model.Z)}

    g_sv = 0.0
    if g_K_uu is not None:
        g_sv += float(np.sum(g_K_uu * mats.K_uu))
    if g_K_fu is not None:
        g_sv += float(np.sum(g_K_fu * mats.K_fu))
    if g_K_ff is not None:
        g_sv += float(np.sum(g_K_ff) * model.signal_variance)
    out["log_signal_variance"] = g_sv

    S_uu = 0.5 * (g_K_uu + g_K_uu.T) if g_K_uu is not None else None
    GK_uu = S_uu * K_uu_raw if S_uu is not None else None
    GK_fu = g_K_fu * mats.K_fu if g_K_fu is not None else None

    iso = model.kernel_kind == ISO_RBF
    for k in range(model.lengthscales.shape[0]):
        acc = 0.0
        if iso:
            if GK_uu is not None:
                acc += float(np.sum(GK_uu * mats.sqdist_uu))
            if GK_fu is not None:
                acc += float(np.sum(GK_fu * mats.sqdist_fu))
        else:
            dz = (model.Z[:, k][:, None] - model.Z[:, k][None, :]) / ls[k]
            dx = (X[:, k][:, None] - model.Z[:, k][None, :]) / ls[k]
            if GK_uu is not None:
                acc += float(np.sum(GK_uu * dz * dz))
            if GK_fu is not None:
                acc += float(np.sum(GK_fu * dx * dx))
        out["log_lengthscales"][k] = acc

    gZ = out["Z"]
    for k in range(d):
        inv_l2 = 1.0 / (ls[k] * ls[k])
        if GK_uu is not None:
            H = 2.0 * GK_uu
            gZ[:, k] += inv_l2 * (H @ model.Z[:, k] - H.sum(axis=1) * model.Z[:, k])
        if GK_fu is not None:
            gZ[:, k] += inv_l2 * (GK_fu.T @ X[:, k]
                                  - GK_fu.sum(axis=0) * model.Z[:, k])
    return out
