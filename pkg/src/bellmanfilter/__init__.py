"""State-space filtering by posterior-mode dynamic programming.

A quadratic value-function filter generalizing the Kalman filter to
nonlinear/non-Gaussian observation densities and degenerate state
dynamics, with an approximate maximum-likelihood estimator driven by the
filter's own output, an exact Kalman reference, a continuous-resampling
particle baseline, and a Monte Carlo study harness.
"""

from .bellman import (FilterStepOutput, StateBelief, UpdateOptions,
                      diffuse_belief, filter_general, filter_lg,
                      filter_lg_arrays, info_update_general, stability_jacobian,
                      step_general, update_lg)
from .bundles import ScalarModelBundle, QmleKalmanBundle, make_bundle
from .dynamics import (DegeneracyMask, LinearGaussianDynamics,
                       TransitionDerivatives, lg_transition_logpdf,
                       predict_state, transition_derivatives)
from .estimation import (FitOptions, FitResult, Transform, fit, maximize,
                         objective)
from .harness import StudyConfig, StudyReport, child_rng, metrics, mode_oracle, run_study
from .kalman import (kalman_filter, kalman_filter_cov, kalman_loglik,
                     kalman_step, qmle_transforms)
from .numerics import (BlockSystem, block_inverse, fd_gradient, fd_hessian,
                       predict_info_lg, predict_info_woodbury,
                       stationary_moments)
from .obsmodels import MODEL_IDS, LinearGaussianObservation, ObservationModel, get_model
from .particle import csir_estimate, csir_filter, csir_univariate_adapter
from .svleverage import (SvLeverageParams, sv_filter, sv_fit, sv_obs_eval,
                         sv_simulate, sv_trans_eval)

__version__ = "0.1.0"
