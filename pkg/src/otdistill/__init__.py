"""Optimal-transport feature-matching losses and desk-scale distillation."""

from .backend import ACTIVE_BACKEND
from .ot_core import (
    CostMatrix,
    FeatureBatch,
    MassVector,
    OtSolution,
    TransportPlan,
    cosine_cost,
    exact_emd_uniform,
    plan_cost,
    validate_plan,
)
from .solvers import IpotConfig, SinkhornConfig, ipot, ot_loss, remd, sinkhorn_rot

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_BACKEND",
    "CostMatrix",
    "FeatureBatch",
    "IpotConfig",
    "MassVector",
    "OtSolution",
    "SinkhornConfig",
    "TransportPlan",
    "cosine_cost",
    "exact_emd_uniform",
    "ipot",
    "ot_loss",
    "plan_cost",
    "remd",
    "sinkhorn_rot",
    "validate_plan",
]
