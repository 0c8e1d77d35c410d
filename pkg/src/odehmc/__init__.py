"""Bayesian system identification with HMC through a differentiable RK4 solver."""
from .dynamics import (
    FeatureLibrary,
    MlpClosure,
    ModelParams,
    ModelSpec,
    build_feature_library,
    denormalize_coefficients,
    eval_rhs,
    vjp_rhs,
)
from .integrate import SegmentPlan, integrate_segment, rk4_step, segment_vjp

__version__ = "0.1.0"
