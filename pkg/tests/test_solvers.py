import itertools

import numpy as np
import pytest

from conftest import brute_force_emd_uniform, random_cost_instance
from otdistill import _kernels
from otdistill.backend import NUMBA_ENABLED
from otdistill.ot_core import (
    CostMatrix,
    FeatureBatch,
    MassVector,
    NonSquare,
    cosine_cost,
    exact_emd_uniform,
    validate_plan,
)
from otdistill.solvers import (
    IpotConfig,
    NumericalUnderflow,
    SinkhornConfig,
    ipot,
    ot_loss,
    remd,
    remd_subgradient_plan,
    sinkhorn_rot,
)


def uniform(b):
    return MassVector.uniform(b)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------

def test_sinkhorn_zero_cost_gives_max_entropy_coupling():
    b = 4
    sol = sinkhorn_rot(CostMatrix(np.zeros((b, b))), uniform(b), uniform(b),
                       SinkhornConfig(epsilon=0.3))
    np.testing.assert_allclose(sol.plan.entries, 1.0 / b**2, atol=1e-12)
    assert abs(sol.cost) <= 1e-15
    assert sol.converged


def test_sinkhorn_single_point():
    for eps in (0.01, 0.1, 1.0):
        sol = sinkhorn_rot(CostMatrix([[0.7]]), uniform(1), uniform(1),
                           SinkhornConfig(epsilon=eps))
        np.testing.assert_allclose(sol.plan.entries, [[1.0]], atol=1e-12)
        assert abs(sol.cost - 0.7) <= 1e-12


def test_sinkhorn_small_epsilon_approaches_exact():
    C = random_cost_instance(42, b=6)
    exact = exact_emd_uniform(C).cost
    sol = sinkhorn_rot(C, uniform(6), uniform(6), SinkhornConfig(epsilon=0.01))
    assert abs(sol.cost - exact) <= 5e-3


def test_sinkhorn_feasibility_and_upper_bound(cost_suite):
    cfg = SinkhornConfig(epsilon=0.05, max_iters=200000, marginal_tol=1e-6)
    for C in cost_suite[:25]:
        b = C.size
        sol = sinkhorn_rot(C, uniform(b), uniform(b), cfg)
        assert sol.converged
        assert not validate_plan(sol.plan, 10 * cfg.marginal_tol)
        assert sol.cost >= exact_emd_uniform(C).cost - 1e-9


def test_sinkhorn_reports_entropy_separately():
    C = random_cost_instance(9, b=5)
    sol = sinkhorn_rot(C, uniform(5), uniform(5), SinkhornConfig(epsilon=0.1))
    T = sol.plan.entries
    expected_entropy = float((T[T > 0] * np.log(T[T > 0])).sum())
    assert abs(sol.entropy - expected_entropy) <= 1e-12
    # reported cost excludes the entropy term
    assert abs(sol.cost - float((T * C.entries).sum())) <= 1e-12


def test_sinkhorn_epsilon_monotonicity():
    C = random_cost_instance(77, b=6)
    costs = [
        sinkhorn_rot(C, uniform(6), uniform(6), SinkhornConfig(epsilon=e)).cost
        for e in (0.5, 0.1, 0.02)
    ]
    assert costs[0] >= costs[1] - 1e-6
    assert costs[1] >= costs[2] - 1e-6


def test_sinkhorn_auto_log_domain_switch():
    # epsilon small enough that exp(-C/eps) underflows entirely
    C = random_cost_instance(5, b=3)
    eps = 0.002
    assert np.exp(-C.entries.max() / eps) == 0.0 or np.exp(-C.entries / eps).min() >= 0
    sol = sinkhorn_rot(C, uniform(3), uniform(3),
                       SinkhornConfig(epsilon=eps, max_iters=5000, marginal_tol=1e-7))
    assert np.isfinite(sol.cost)
    assert C.entries.min() / 3 <= sol.cost <= C.entries.max()


def test_sinkhorn_log_domain_matches_standard_domain():
    C = random_cost_instance(21, b=5)
    mu = uniform(5)
    K = np.exp(-C.entries / 0.1)
    T1, _, conv1, _, s1 = _kernels.sinkhorn_iterate_numpy(K, mu.weights, mu.weights, 5000, 1e-12)
    T2, _, conv2, _, s2 = _kernels.sinkhorn_log_iterate_numpy(
        C.entries, np.log(mu.weights), np.log(mu.weights), 0.1, 5000, 1e-12
    )
    assert s1 == s2 == _kernels.OK and conv1 and conv2
    np.testing.assert_allclose(T1, T2, atol=1e-10)


def test_sinkhorn_underflow_error():
    C = random_cost_instance(31, b=3)
    with pytest.raises(NumericalUnderflow):
        sinkhorn_rot(C, uniform(3), uniform(3), SinkhornConfig(epsilon=1e-320))


def test_sinkhorn_rejects_nonsquare():
    with pytest.raises(NonSquare):
        sinkhorn_rot(CostMatrix(np.zeros((2, 3))), uniform(2), uniform(3), SinkhornConfig())


# ---------------------------------------------------------------------------
# IPOT
# ---------------------------------------------------------------------------

def test_ipot_zero_cost():
    b = 4
    sol = ipot(CostMatrix(np.zeros((b, b))), uniform(b), uniform(b),
               IpotConfig(beta=20.0, num_iters=10))
    assert abs(sol.cost) <= 1e-15


def test_ipot_single_point_one_iteration():
    sol = ipot(CostMatrix([[0.7]]), uniform(1), uniform(1), IpotConfig(beta=20.0, num_iters=1))
    np.testing.assert_allclose(sol.plan.entries, [[1.0]], atol=1e-12)
    assert abs(sol.cost - 0.7) <= 1e-12


def test_ipot_converges_to_exact():
    rng = np.random.default_rng(0)
    t = FeatureBatch(rng.standard_normal((4, 6)))
    s = FeatureBatch(rng.standard_normal((4, 6)))
    C = cosine_cost(t, s)
    exact = exact_emd_uniform(C).cost
    sol = ipot(C, uniform(4), uniform(4), IpotConfig(beta=20.0, num_iters=2000))
    assert abs(sol.cost - exact) <= 1e-3 * (1 + abs(exact))


def test_ipot_runs_prescribed_iterations():
    C = random_cost_instance(3, b=4)
    sol = ipot(C, uniform(4), uniform(4), IpotConfig(beta=20.0, num_iters=37))
    assert sol.iterations_used == 37
    assert sol.converged


def test_ipot_marginal_feasibility():
    C = random_cost_instance(8, b=6)
    sol = ipot(C, uniform(6), uniform(6), IpotConfig(beta=20.0, num_iters=2000))
    # columns exact by construction, rows bounded by the reported violation
    assert not validate_plan(sol.plan, max(1e-5, 10 * sol.marginal_violation))


def test_ipot_underflow_error():
    C = random_cost_instance(12, b=3)
    with pytest.raises(NumericalUnderflow):
        ipot(C, uniform(3), uniform(3), IpotConfig(beta=1e-3, num_iters=5))


def test_ipot_inner_steps_configurable():
    C = random_cost_instance(15, b=5)
    exact = exact_emd_uniform(C).cost
    sol = ipot(C, uniform(5), uniform(5),
               IpotConfig(beta=20.0, num_iters=500, inner_sinkhorn_steps=3))
    assert abs(sol.cost - exact) <= 1e-2


# ---------------------------------------------------------------------------
# REMD
# ---------------------------------------------------------------------------

def test_remd_zero_cost():
    assert remd(CostMatrix(np.zeros((3, 3)))).cost == 0.0


def test_remd_zero_diagonal():
    sol = remd(CostMatrix([[0.0, 1.0], [1.0, 0.0]]))
    assert sol.cost == 0.0
    assert sol.plan is None
    assert sol.iterations_used == 1 and sol.converged


def test_remd_closed_form_vs_brute_force_relaxations():
    C = np.array([[0.2, 0.5], [0.3, 0.1]])
    # one-sided relaxations computed independently
    r_rows = C.min(axis=1).sum() / 2  # rows keep 1/b, columns freed
    r_cols = C.min(axis=0).sum() / 2
    expected = max(r_rows, r_cols)
    assert abs(expected - 0.15) <= 1e-15
    sol = remd(CostMatrix(C))
    assert abs(sol.cost - expected) <= 1e-15
    # the bound is tight on this instance: brute-force exact agrees
    assert abs(brute_force_emd_uniform(C) - 0.15) <= 1e-15


def test_remd_lower_bounds_exact(cost_suite):
    for C in cost_suite:
        assert remd(C).cost <= exact_emd_uniform(C).cost + 1e-9


def test_remd_positive_homogeneity():
    C = random_cost_instance(51, b=6).entries
    base = remd(CostMatrix(C)).cost
    for c in (0.5, 2.0, 8.0):  # powers of two scale exactly in floating point
        assert remd(CostMatrix(c * C)).cost == c * base
    for c in (0.3, 1.7):
        assert abs(remd(CostMatrix(c * C)).cost - c * base) <= 1e-12 * (1 + c * base)


def test_remd_subgradient_plan_matches_value():
    for seed in range(10):
        C = random_cost_instance(200 + seed)
        P = remd_subgradient_plan(C)
        assert abs(float((P * C.entries).sum()) - remd(C).cost) <= 1e-12
        # one winning side has its marginal exact
        b = C.size
        row_ok = np.allclose(P.sum(axis=1), 1.0 / b)
        col_ok = np.allclose(P.sum(axis=0), 1.0 / b)
        assert row_ok or col_ok


def test_remd_ties_take_first_index():
    C = CostMatrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
    P = remd_subgradient_plan(C)
    np.testing.assert_array_equal(P, np.array([[0.5, 0.0], [0.5, 0.0]]))


# ---------------------------------------------------------------------------
# ot_loss dispatcher
# ---------------------------------------------------------------------------

def test_ot_loss_identical_batches():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 7))
    fb = FeatureBatch(X)
    loss, plan = ot_loss(fb, FeatureBatch(X.copy()), "exact")
    assert loss <= 1e-12
    assert plan is not None
    loss, _ = ot_loss(fb, FeatureBatch(X.copy()), "ipot", IpotConfig(beta=20.0, num_iters=2000))
    assert loss <= 1e-6


def test_ot_loss_permuted_rows_zero():
    rng = np.random.default_rng(61)
    X = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    loss, _ = ot_loss(FeatureBatch(X), FeatureBatch(X[perm]), "exact")
    assert loss <= 1e-12


def test_ot_loss_method_ordering():
    rng = np.random.default_rng(62)
    for _ in range(5):
        t = FeatureBatch(rng.standard_normal((6, 8)))
        s = FeatureBatch(rng.standard_normal((6, 8)))
        r, _ = ot_loss(t, s, "remd")
        e, _ = ot_loss(t, s, "exact")
        k, _ = ot_loss(t, s, "sinkhorn", SinkhornConfig(epsilon=0.05, max_iters=20000))
        assert r <= e + 1e-9
        assert k >= e - 1e-9


def test_ot_loss_unknown_method():
    fb = FeatureBatch([[1.0, 0.0]])
    with pytest.raises(ValueError):
        ot_loss(fb, fb, "emd2")


def test_permutation_invariance_all_methods():
    rng = np.random.default_rng(63)
    for _ in range(8):
        b = int(rng.integers(3, 8))
        t = FeatureBatch(rng.standard_normal((b, 5)))
        Y = rng.standard_normal((b, 5))
        perm = rng.permutation(b)
        for method, cfg in (
            ("exact", None),
            ("ipot", IpotConfig(beta=20.0, num_iters=200)),
            ("remd", None),
        ):
            a, _ = ot_loss(t, FeatureBatch(Y), method, cfg)
            p, _ = ot_loss(t, FeatureBatch(Y[perm]), method, cfg)
            assert abs(a - p) <= 1e-8, method


# ---------------------------------------------------------------------------
# kernel backend equivalence
# ---------------------------------------------------------------------------

@pytest.mark.skipif(not NUMBA_ENABLED, reason="numba backend not active")
def test_kernel_variants_agree():
    C = random_cost_instance(99, b=6).entries
    mu = np.full(6, 1.0 / 6)
    r_np = _kernels.remd_minsums_numpy(C)
    r_nb = _kernels.remd_minsums_loops(C)
    np.testing.assert_allclose(r_np, r_nb, rtol=1e-14)

    T_np, v_np, s_np = _kernels.ipot_iterate_numpy(C, mu, mu, 20.0, 300, 1)
    T_nb, v_nb, s_nb = _kernels.ipot_iterate_loops(C, mu, mu, 20.0, 300, 1)
    assert s_np == s_nb == _kernels.OK
    np.testing.assert_allclose(T_np, T_nb, atol=1e-12)

    K = np.exp(-C / 0.1)
    out_np = _kernels.sinkhorn_iterate_numpy(K, mu, mu, 2000, 1e-10)
    out_nb = _kernels.sinkhorn_iterate_loops(K, mu, mu, 2000, 1e-10)
    np.testing.assert_allclose(out_np[0], out_nb[0], atol=1e-12)
    assert out_np[1] == out_nb[1]  # same iteration count

    l_np = _kernels.sinkhorn_log_iterate_numpy(C, np.log(mu), np.log(mu), 0.1, 2000, 1e-10)
    l_nb = _kernels.sinkhorn_log_iterate_loops(C, np.log(mu), np.log(mu), 0.1, 2000, 1e-10)
    np.testing.assert_allclose(l_np[0], l_nb[0], atol=1e-12)
