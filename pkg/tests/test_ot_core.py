import itertools

import numpy as np
import pytest

from conftest import brute_force_emd_uniform, random_cost_instance
from otdistill.ot_core import (
    CostMatrix,
    DimensionMismatch,
    FeatureBatch,
    FeatureFormatError,
    MassVector,
    NonFinite,
    NonSquare,
    TransportPlan,
    ZeroNormRow,
    cosine_cost,
    exact_emd_uniform,
    load_feature_bin,
    load_feature_csv,
    load_feature_file,
    plan_cost,
    save_feature_bin,
    save_feature_csv,
    validate_plan,
)


# ---------------------------------------------------------------------------
# cosine_cost
# ---------------------------------------------------------------------------

def test_cosine_identical_unit_vectors():
    C = cosine_cost(FeatureBatch([[1.0, 0.0]]), FeatureBatch([[1.0, 0.0]]))
    assert C.entries[0, 0] == 0.0


def test_cosine_orthogonal_vectors():
    C = cosine_cost(FeatureBatch([[1.0, 0.0]]), FeatureBatch([[0.0, 1.0]]))
    assert C.entries[0, 0] == 1.0


def test_cosine_antipodal_vectors():
    C = cosine_cost(FeatureBatch([[1.0, 0.0]]), FeatureBatch([[-1.0, 0.0]]))
    assert C.entries[0, 0] == 2.0


def test_cosine_range_and_parallel_zero():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = FeatureBatch(rng.standard_normal((6, 5)))
        s = FeatureBatch(rng.standard_normal((6, 5)))
        C = cosine_cost(t, s).entries
        assert C.min() >= 0.0 and C.max() <= 2.0
    # zero distance exactly when positively parallel
    x = rng.standard_normal(5)
    C = cosine_cost(FeatureBatch([x]), FeatureBatch([2.5 * x]))
    assert C.entries[0, 0] <= 1e-15
    C = cosine_cost(FeatureBatch([x]), FeatureBatch([-2.5 * x]))
    assert C.entries[0, 0] > 1.0


def test_cosine_scale_invariance():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((4, 3))
    Y = rng.standard_normal((4, 3))
    C1 = cosine_cost(FeatureBatch(X), FeatureBatch(Y)).entries
    C2 = cosine_cost(FeatureBatch(3.7 * X), FeatureBatch(0.2 * Y)).entries
    np.testing.assert_allclose(C1, C2, atol=1e-12)


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine_cost(FeatureBatch([[1.0, 0.0]]), FeatureBatch([[1.0, 0.0, 0.0]]))
    with pytest.raises(DimensionMismatch):
        cosine_cost(FeatureBatch([[1.0, 0.0]]), FeatureBatch([[1.0, 0.0], [0.0, 1.0]]))


def test_cosine_zero_norm_row_is_error():
    with pytest.raises(ZeroNormRow) as exc:
        cosine_cost(FeatureBatch([[1.0, 0.0], [0.0, 0.0]]), FeatureBatch([[1.0, 0.0], [0.0, 1.0]]))
    assert exc.value.index == 1


def test_feature_batch_rejects_nonfinite():
    with pytest.raises(NonFinite):
        FeatureBatch([[np.nan, 1.0]])


# ---------------------------------------------------------------------------
# exact_emd_uniform
# ---------------------------------------------------------------------------

def test_exact_zero_diagonal():
    sol = exact_emd_uniform(CostMatrix([[0.0, 1.0], [1.0, 0.0]]))
    assert sol.cost == 0.0
    np.testing.assert_array_equal(sol.plan.entries, 0.5 * np.eye(2))


def test_exact_zero_antidiagonal():
    sol = exact_emd_uniform(CostMatrix([[1.0, 0.0], [0.0, 1.0]]))
    assert sol.cost == 0.0
    np.testing.assert_array_equal(sol.plan.entries, 0.5 * np.array([[0, 1], [1, 0]]))


def test_exact_matches_brute_force_5x5():
    rng = np.random.default_rng(11)
    C = rng.uniform(0.0, 2.0, size=(5, 5))
    sol = exact_emd_uniform(CostMatrix(C))
    assert abs(sol.cost - brute_force_emd_uniform(C)) <= 1e-10


def test_exact_matches_brute_force_sweep():
    # every b <= 8 against exhaustive enumeration
    for seed in range(40):
        C = random_cost_instance(seed).entries
        if C.shape[0] > 7:
            continue
        sol = exact_emd_uniform(CostMatrix(C))
        assert abs(sol.cost - brute_force_emd_uniform(C)) <= 1e-10


def test_exact_plan_is_scaled_permutation():
    C = random_cost_instance(5, b=6).entries
    sol = exact_emd_uniform(CostMatrix(C))
    T = sol.plan.entries
    b = 6
    assert np.all((T == 0) | (np.abs(T - 1.0 / b) < 1e-15))
    np.testing.assert_allclose(T.sum(axis=0), 1.0 / b)
    np.testing.assert_allclose(T.sum(axis=1), 1.0 / b)
    # cost/plan consistency declared on OtSolution
    assert abs(sol.cost - plan_cost(sol.plan, CostMatrix(C))) <= 1e-10


def test_exact_lower_bounds_feasible_plans():
    # convex mixtures of permutation plans are feasible couplings
    rng = np.random.default_rng(7)
    for _ in range(20):
        b = int(rng.integers(2, 7))
        C = CostMatrix(rng.uniform(0, 2, size=(b, b)))
        perms = [rng.permutation(b) for _ in range(3)]
        w = rng.dirichlet(np.ones(3))
        T = np.zeros((b, b))
        for wk, p in zip(w, perms):
            T[np.arange(b), p] += wk / b
        plan = TransportPlan(T, MassVector.uniform(b), MassVector.uniform(b))
        assert not validate_plan(plan, 1e-9)
        assert plan_cost(plan, C) >= exact_emd_uniform(C).cost - 1e-10


def test_exact_permutation_equivariance():
    rng = np.random.default_rng(13)
    C = rng.uniform(0, 2, size=(6, 6))
    base = exact_emd_uniform(CostMatrix(C)).cost
    for _ in range(5):
        p = rng.permutation(6)
        assert abs(exact_emd_uniform(CostMatrix(C[:, p])).cost - base) <= 1e-12


def test_exact_rejects_nonsquare():
    with pytest.raises(NonSquare):
        exact_emd_uniform(CostMatrix(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# validate_plan / plan_cost
# ---------------------------------------------------------------------------

def test_validate_identity_plan_clean():
    plan = TransportPlan(0.5 * np.eye(2), MassVector.uniform(2), MassVector.uniform(2))
    assert validate_plan(plan, 1e-9) == []


def test_validate_flags_negative_entry():
    T = np.full((2, 2), 0.25)
    T[0, 1] = -0.01
    T[0, 0] = 0.51
    plan = TransportPlan(T, MassVector.uniform(2), MassVector.uniform(2))
    kinds = {v.kind for v in validate_plan(plan, 1e-9)}
    assert "negative_entry" in kinds


def test_validate_independent_coupling_clean():
    b = 4
    plan = TransportPlan(np.full((b, b), 1.0 / b**2), MassVector.uniform(b), MassVector.uniform(b))
    assert validate_plan(plan, 1e-9) == []


def test_validate_flags_marginal_gaps():
    T = np.full((2, 2), 0.25)
    T[0, 0] = 0.30
    plan = TransportPlan(T, MassVector.uniform(2), MassVector.uniform(2))
    kinds = {v.kind for v in validate_plan(plan, 1e-3)}
    assert kinds == {"row_sum", "col_sum"}


def test_plan_cost_examples():
    C = CostMatrix([[0.0, 1.0], [1.0, 0.0]])
    ident = TransportPlan(0.5 * np.eye(2), MassVector.uniform(2), MassVector.uniform(2))
    anti = TransportPlan(
        0.5 * np.array([[0.0, 1.0], [1.0, 0.0]]), MassVector.uniform(2), MassVector.uniform(2)
    )
    assert plan_cost(ident, C) == 0.0
    assert plan_cost(anti, C) == 1.0


def test_plan_cost_constant_cost_degeneracy():
    rng = np.random.default_rng(17)
    b = 5
    # any feasible plan against constant cost c gives c
    perms = [rng.permutation(b) for _ in range(4)]
    w = rng.dirichlet(np.ones(4))
    T = np.zeros((b, b))
    for wk, p in zip(w, perms):
        T[np.arange(b), p] += wk / b
    plan = TransportPlan(T, MassVector.uniform(b), MassVector.uniform(b))
    c = 0.73
    assert abs(plan_cost(plan, CostMatrix(np.full((b, b), c))) - c) <= 1e-12


def test_plan_cost_shape_mismatch():
    plan = TransportPlan(0.5 * np.eye(2), MassVector.uniform(2), MassVector.uniform(2))
    with pytest.raises(DimensionMismatch):
        plan_cost(plan, CostMatrix(np.zeros((3, 3))))


# ---------------------------------------------------------------------------
# MassVector
# ---------------------------------------------------------------------------

def test_uniform_mass_vector_entries():
    for b in (1, 2, 3, 7, 64):
        m = MassVector.uniform(b)
        assert np.all(m.weights == 1.0 / b)
        assert abs(m.weights.sum() - 1.0) <= 1e-12


def test_mass_vector_rejects_bad_input():
    with pytest.raises(ValueError):
        MassVector(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        MassVector(np.array([-0.1, 1.1]))


# ---------------------------------------------------------------------------
# feature file formats
# ---------------------------------------------------------------------------

def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    fb = FeatureBatch(rng.standard_normal((7, 4)))
    path = tmp_path / "feats.csv"
    save_feature_csv(fb, path)
    back = load_feature_csv(path)
    np.testing.assert_array_equal(back.data, fb.data)
    assert open(path).readline().strip() == "dim=4"


def test_feature_bin_round_trip(tmp_path):
    rng = np.random.default_rng(29)
    fb = FeatureBatch(rng.standard_normal((5, 9)))
    path = tmp_path / "feats.bin"
    save_feature_bin(fb, path)
    back = load_feature_bin(path)
    np.testing.assert_array_equal(back.data, fb.data)


def test_feature_file_sniffing(tmp_path):
    fb = FeatureBatch([[1.0, 2.0], [3.0, 4.0]])
    csv_path = tmp_path / "a.features"
    bin_path = tmp_path / "b.features"
    save_feature_csv(fb, csv_path)
    save_feature_bin(fb, bin_path)
    np.testing.assert_array_equal(load_feature_file(csv_path).data, fb.data)
    np.testing.assert_array_equal(load_feature_file(bin_path).data, fb.data)


def test_feature_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("dim=3\n1.0,2.0\n")
    with pytest.raises(FeatureFormatError):
        load_feature_csv(path)
    path.write_text("d=3\n1.0,2.0,3.0\n")
    with pytest.raises(FeatureFormatError):
        load_feature_csv(path)
    path.write_text("dim=2\n1.0,oops\n")
    with pytest.raises(FeatureFormatError):
        load_feature_csv(path)


def test_feature_bin_truncation(tmp_path):
    fb = FeatureBatch([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "t.bin"
    save_feature_bin(fb, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FeatureFormatError):
        load_feature_bin(path)
