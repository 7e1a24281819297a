"""Approximate transport solvers: entropic Sinkhorn, proximal-point, REMD.

Three ways to evaluate the transport cost between two feature batches,
trading exactness for speed:

* ``sinkhorn_rot`` minimizes <T, C> + eps * sum T log T by alternating
  scaling of the kernel exp(-C/eps); the reported cost is always the
  unregularized <T, C>, with the entropy term surfaced separately.
* ``ipot`` runs proximal point iterations with kernel exp(-C/beta): each
  outer step re-centers the entropic problem on the current plan, so the
  iterates approach the unregularized optimum rather than a blurred one.
* ``remd`` drops one marginal constraint at a time; each relaxation is
  solved by sending every row (or column) to its cheapest partner, and
  the larger of the two relaxed values is a lower bound on the exact
  cost with a one-pass closed form.

All solvers share the :class:`~otdistill.ot_core.OtSolution` contract and
are pure functions of their inputs.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ot_core import (
    CostMatrix,
    DimensionMismatch,
    FeatureBatch,
    MassVector,
    OtSolution,
    TransportPlan,
    cosine_cost,
    exact_emd_uniform,
)


class NumericalUnderflow(ArithmeticError):
    """A kernel row/column collapsed to zero in working precision."""


@dataclass
class SinkhornConfig:
    """Entropic-solver settings.

    ``marginal_tol`` is the stopping threshold on the L1 violation of the
    un-enforced marginal; iteration also stops at ``max_iters``. Small
    epsilon needs a deep iteration budget: the contraction factor
    approaches 1 as the plan sharpens, so tight tolerances at
    epsilon = 0.05 can take 1e5 iterations on unlucky instances.
    """

    epsilon: float = 0.05
    max_iters: int = 100000
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be > 0")


@dataclass
class IpotConfig:
    """Proximal-point solver settings.

    Defaults follow the training configuration: kernel scale beta = 20
    and N = 50 outer iterations. The method is inexact by construction,
    so the number of inner scaling sweeps per outer step is exposed;
    the canonical recurrence uses a single sweep.
    """

    beta: float = 20.0
    num_iters: int = 50
    inner_sinkhorn_steps: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.num_iters < 1:
            raise ValueError("num_iters must be >= 1")
        if self.inner_sinkhorn_steps < 1:
            raise ValueError("inner_sinkhorn_steps must be >= 1")


def _check_marginals(cost: CostMatrix, mu: MassVector, nu: MassVector):
    cost.require_square()
    b = cost.size
    if len(mu) != b or len(nu) != b:
        raise DimensionMismatch(
            f"marginal lengths ({len(mu)}, {len(nu)}) do not match cost size {b}"
        )


def _entropy(T: np.ndarray) -> float:
    # sum T log T with 0 log 0 = 0
    mask = T > 0
    return float((T[mask] * np.log(T[mask])).sum())


def sinkhorn_rot(
    cost: CostMatrix, mu: MassVector, nu: MassVector, cfg: SinkhornConfig
) -> OtSolution:
    """Entropic-regularized transport via Sinkhorn scaling.

    Runs in the standard domain and switches to log-domain potentials
    automatically when the kernel exp(-C/eps) underflows, which changes
    nothing about the fixed point. Raises :class:`NumericalUnderflow`
    only when even the log-domain iteration produces non-finite
    potentials (epsilon pathologically small).
    """
    _check_marginals(cost, mu, nu)
    C = cost.entries
    eps = cfg.epsilon
    with np.errstate(over="ignore"):  # C/eps may overflow for absurd eps
        K = np.exp(-C / eps)
    status = _kernels.UNDERFLOW
    if float(K.min()) > 0.0:
        T, iters, converged, violation, status = _kernels.sinkhorn_iterate(
            K, mu.weights, nu.weights, cfg.max_iters, cfg.marginal_tol
        )
    if status == _kernels.UNDERFLOW:
        if np.any(mu.weights == 0.0) or np.any(nu.weights == 0.0):
            raise NumericalUnderflow(
                "kernel exp(-C/epsilon) underflowed and a marginal has zero "
                "mass; epsilon is too small for this cost matrix"
            )
        T, iters, converged, violation, status = _kernels.sinkhorn_log_iterate(
            C, np.log(mu.weights), np.log(nu.weights), eps, cfg.max_iters, cfg.marginal_tol
        )
        if status == _kernels.UNDERFLOW:
            raise NumericalUnderflow(
                f"Sinkhorn potentials are non-finite at epsilon={eps}; "
                "epsilon is too small for this cost matrix"
            )
    plan = TransportPlan(T, mu, nu)
    return OtSolution(
        cost=float(np.sum(T * C)),
        plan=plan,
        iterations_used=int(iters),
        converged=bool(converged),
        marginal_violation=float(violation),
        entropy=_entropy(T),
    )


def ipot(cost: CostMatrix, mu: MassVector, nu: MassVector, cfg: IpotConfig) -> OtSolution:
    """Inexact proximal point iterations toward the exact transport cost.

    v starts at (1/b) 1, the plan starts at the all-ones matrix, and each
    of the N outer steps forms Q = exp(-C/beta) * T, applies the inner
    scaling sweeps, and re-projects T = diag(u) Q diag(v). (The all-ones
    start is deliberate: the first projection restores marginal scale, so
    it only affects the first proximal step.) Always runs all N
    iterations; the reported violation is the L1 gap on the row marginal.
    """
    _check_marginals(cost, mu, nu)
    C = cost.entries
    T, violation, status = _kernels.ipot_iterate(
        C, mu.weights, nu.weights, cfg.beta, cfg.num_iters, cfg.inner_sinkhorn_steps
    )
    if status == _kernels.UNDERFLOW:
        raise NumericalUnderflow(
            f"IPOT kernel underflowed at beta={cfg.beta}; beta is too small "
            "for this cost matrix"
        )
    plan = TransportPlan(T, mu, nu)
    return OtSolution(
        cost=float(np.sum(T * C)),
        plan=plan,
        iterations_used=cfg.num_iters,
        converged=True,
        marginal_violation=float(violation),
    )


def remd(cost: CostMatrix) -> OtSolution:
    """Relaxed transport cost: the larger of the two one-sided optima.

    Dropping the column constraint lets each row send its whole 1/b mass
    to its cheapest column (and symmetrically for rows), so the value is
    (1/b) max(sum_i min_j C[i,j], sum_j min_i C[i,j]). No plan is
    returned: the relaxed optima are not feasible couplings in general.
    """
    cost.require_square()
    row_sum, col_sum = _kernels.remd_minsums(cost.entries)
    value = max(row_sum, col_sum) / cost.size
    return OtSolution(
        cost=float(value), plan=None, iterations_used=1, converged=True,
        marginal_violation=0.0,
    )


def remd_subgradient_plan(cost: CostMatrix) -> np.ndarray:
    """Mass placement realizing the active REMD relaxation.

    Puts 1/b at each row's argmin column when the row-relaxation attains
    the max, else at each column's argmin row; ties resolve to the first
    index. Used as the fixed plan for envelope gradients. This is not a
    feasible coupling.
    """
    cost.require_square()
    C = cost.entries
    b = cost.size
    row_sum, col_sum = _kernels.remd_minsums(C)
    P = np.zeros((b, b))
    if row_sum >= col_sum:
        P[np.arange(b), np.argmin(C, axis=1)] = 1.0 / b
    else:
        P[np.argmin(C, axis=0), np.arange(b)] = 1.0 / b
    return P


METHODS = ("exact", "sinkhorn", "ipot", "remd")


def ot_loss(teacher: FeatureBatch, student: FeatureBatch, method: str, config=None):
    """Transport loss between two feature batches under the cosine cost.

    Dispatches on ``method`` with uniform marginals; returns
    ``(loss, plan)`` where ``plan`` is a :class:`TransportPlan` for the
    plan-producing solvers and None for REMD.
    """
    C = cosine_cost(teacher, student)
    b = C.size
    if method == "exact":
        sol = exact_emd_uniform(C)
    elif method == "sinkhorn":
        cfg = config if config is not None else SinkhornConfig()
        sol = sinkhorn_rot(C, MassVector.uniform(b), MassVector.uniform(b), cfg)
    elif method == "ipot":
        cfg = config if config is not None else IpotConfig()
        sol = ipot(C, MassVector.uniform(b), MassVector.uniform(b), cfg)
    elif method == "remd":
        sol = remd(C)
    else:
        raise ValueError(f"unknown OT method {method!r}; expected one of {METHODS}")
    return sol.cost, sol.plan
