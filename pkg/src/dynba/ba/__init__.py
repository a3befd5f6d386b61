"""Sliding-window bundle adjustment with adaptive dynamic-candidate residuals."""
from .factors import (CandidateVisualFactor, ImuFactor, NegativeDepthDuringLinearization, PriorFactor,
                      StaticVisualFactor, candidate_sigma, huber, imu_residual, visual_residual)
from .marginalization import SingularMarginalization, marginalize_dense
from .problem import EmptyWindow, OptimizeResult, Problem, SolverConfig, SolverDiverged, optimize
from .states import FrameState, LandmarkState
from .window import Window, confirm_dynamic

__all__ = [
    "CandidateVisualFactor", "EmptyWindow", "FrameState", "ImuFactor", "LandmarkState",
    "NegativeDepthDuringLinearization", "OptimizeResult", "PriorFactor", "Problem",
    "SingularMarginalization", "SolverConfig", "SolverDiverged", "StaticVisualFactor", "Window",
    "candidate_sigma", "confirm_dynamic", "huber", "imu_residual", "marginalize_dense", "optimize",
    "visual_residual",
]
