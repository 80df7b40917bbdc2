"""Actor-critic learning for entropy-regularized mean-field control."""

__version__ = "0.1.0"

from .actor import (
    GradientEstimate,
    TrainingLog,
    TrainingResult,
    TrainingSchedule,
    gateaux_gradient,
    policy_gradient,
    q_pop,
    q_rep,
    train,
)
from .critic import CriticCoefficients, GalerkinSystem, assemble, critic_eval, hjb_residual, solve
from .cylindrical import CylindricalBasis, crowd_basis, quadratic_basis, systemic_risk_basis
from .exceptions import *  # noqa: F401,F403
from .experiment import Experiment, load_experiment
from .measures import EmpiricalMeasure, FeatureFamily, GaussianBump, Monomial, kernel_convolution
from .models import CrowdModel, LQRModel, check_lqr_assumptions, load_model
from .policy import AffineFeatureMap, GaussianPolicy
from .riccati import optimal_policy, optimal_value, reference_targets, solve_riccati
from .simulate import (
    InitialCondition,
    estimate_value,
    occupancy_samples,
    simulate,
    simulate_affine_exact,
    simulate_euler,
)
