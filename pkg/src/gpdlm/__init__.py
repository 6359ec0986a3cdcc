"""Sparse Gaussian processes trained by direct loss minimization.

The package trains the variational posterior of a sparse GP either for the
evidence bound or directly for the loss of the Bayesian predictor (log loss,
or squared error of the predictive mean), with interchangeable gradient
estimators for the log-predictive terms: exact, biased Monte Carlo, smoothed
Monte Carlo, and unbiased product sampling via rejection from a widened
Gaussian proposal.
"""

from .data import (Dataset, Normalizer, load_dataset, make_poisson_lograte,
                   make_sine_binary, make_sine_regression, make_two_moons,
                   resolve_dataset, split_dataset)
from .diagnostics import (BiasReport, BoundCheck, check_bounds, estimate_bias,
                          fd_gradient_check, schedule_calculator)
from .errors import GpdlmError, InputError, NumericalError, SamplingError
from .estimators import (EstimatorConfig, GradientEstimate, PointGradient,
                         TiltedSampler, bmc_gradient, build_tilted_sampler,
                         objective_gradient, point_stream, product_sample,
                         product_sample_batch, reparam_gradient_exact,
                         required_sample_size, select_widths,
                         smooth_bmc_gradient, ups_gradient,
                         vectorized_product_sample)
from .kernels import (ARD_RBF, ISO_RBF, KernelModel, MarginalProjection,
                      VariationalPosterior, kernel_matrices, kl_gaussian,
                      marginal_projection, posterior_marginals)
from .likelihoods import (DerivativeBounds, Likelihood, analytic_log_predictive,
                          derivative_bounds, ell_max, make_likelihood, phi,
                          predictive_mean, quadrature_log_predictive)
from .objectives import (ObjectiveSpec, beta_grid, dlm_log_objective,
                         dlm_square_objective, dlm_square_solve,
                         elbo_objective, objective_value)
from .trainer import (TrainConfig, TrainResult, default_likelihood, evaluate,
                      initialize_model, initialize_posterior, load_state,
                      save_state, select_beta, train)
from .cli import ExperimentConfig, emit_curves, run_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
