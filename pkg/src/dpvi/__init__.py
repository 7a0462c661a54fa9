"""Differentially private doubly stochastic variational inference."""

from .accounting import (
    Adjacency,
    MechanismParams,
    PrivacyBudget,
    PrivacyReport,
    bounded_dp_epsilon,
    advanced_pipeline_epsilon,
    calibrate_sigma_for_budget,
)
from .estimators import DPVIGaussianMixture, DPVILogisticRegression
from .models import GmmModel, LogRegModel, ModelSpec
from .optimizer import OptimizerConfig, RunTrace, run_dpvi
from .variational import GaussianVariational, ParameterBlock, Transform

__version__ = "0.1.0"

__all__ = [
    "Adjacency",
    "MechanismParams",
    "PrivacyBudget",
    "PrivacyReport",
    "bounded_dp_epsilon",
    "advanced_pipeline_epsilon",
    "calibrate_sigma_for_budget",
    "DPVIGaussianMixture",
    "DPVILogisticRegression",
    "GmmModel",
    "LogRegModel",
    "ModelSpec",
    "OptimizerConfig",
    "RunTrace",
    "run_dpvi",
    "GaussianVariational",
    "ParameterBlock",
    "Transform",
]
