"""Cost matrices, the exact transport oracle, and plan validation.

Feature batches are compared through the cosine distance on the unit
sphere, C[i,j] = 1 - <x_i, y_j> / (|x_i| |y_j|), which lives in [0, 2].
With both marginals uniform at 1/b the transport polytope is a scaled
Birkhoff polytope, so an optimal plan can always be taken to be 1/b times
a permutation matrix and the exact cost reduces to a linear assignment
problem. That assignment solve is the ground truth every approximate
solver in :mod:`otdistill.solvers` is measured against.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment


class DimensionMismatch(ValueError):
    pass


class ZeroNormRow(ValueError):
    def __init__(self, index: int, side: str = "row"):
        self.index = index
        super().__init__(f"{side} {index} has norm below 1e-12; cosine distance undefined")


class NonSquare(ValueError):
    pass


class NonFinite(ValueError):
    pass


class FeatureFormatError(ValueError):
    """Malformed feature file (CSV or binary)."""


MIN_ROW_NORM = 1e-12


def _as_float64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass
class FeatureBatch:
    """b x d matrix of feature vectors; rows are examples."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_float64(self.data)
        if self.data.ndim != 2:
            raise DimensionMismatch(f"expected 2-d feature array, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatch(f"need b >= 1 and d >= 1, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFinite("feature batch contains non-finite entries")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class CostMatrix:
    """b x b pairwise ground costs plus the tag of the generating metric."""

    entries: np.ndarray
    metric_tag: str = "cosine"

    def __post_init__(self):
        self.entries = _as_float64(self.entries)
        if self.entries.ndim != 2:
            raise DimensionMismatch(f"cost matrix must be 2-d, got shape {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise NonFinite("cost matrix contains non-finite entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def require_square(self):
        if self.entries.shape[0] != self.entries.shape[1]:
            raise NonSquare(f"cost matrix must be square, got shape {self.entries.shape}")


@dataclass
class MassVector:
    """Nonnegative weights on b points summing to 1."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = _as_float64(self.weights)
        if self.weights.ndim != 1:
            raise DimensionMismatch("mass vector must be 1-d")
        if np.any(self.weights < 0):
            raise ValueError("mass vector has negative weight")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mass vector sums to {self.weights.sum()!r}, expected 1")

    @classmethod
    def uniform(cls, b: int) -> "MassVector":
        return cls(np.full(b, 1.0 / b))

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class TransportPlan:
    """Nonnegative b x b coupling with prescribed row/column marginals."""

    entries: np.ndarray
    row_marginal: MassVector
    col_marginal: MassVector

    def __post_init__(self):
        self.entries = _as_float64(self.entries)
        if self.entries.ndim != 2:
            raise DimensionMismatch("transport plan must be 2-d")
        b_rows, b_cols = self.entries.shape
        if b_rows != len(self.row_marginal) or b_cols != len(self.col_marginal):
            raise DimensionMismatch(
                f"plan shape {self.entries.shape} does not match marginals "
                f"({len(self.row_marginal)}, {len(self.col_marginal)})"
            )


@dataclass
class OtSolution:
    """Result of one transport solve.

    ``cost`` is always the unregularized transport cost <T, C>. Solvers
    that never materialize a feasible coupling (REMD) leave ``plan`` as
    None. ``entropy`` is sum T log T, reported by the entropic solver.
    """

    cost: float
    plan: Optional[TransportPlan]
    iterations_used: int
    converged: bool
    marginal_violation: float = 0.0
    entropy: Optional[float] = None


@dataclass
class Violation:
    """One constraint violation found by validate_plan."""

    kind: str  # "negative_entry" | "row_sum" | "col_sum"
    index: tuple
    magnitude: float


def cosine_cost(teacher: FeatureBatch, student: FeatureBatch) -> CostMatrix:
    """Pairwise cosine distances between teacher and student rows.

    C[i,j] = 1 - <x_i, y_j> / (|x_i| |y_j|), clamped to [0, 2] to absorb
    round-off. Rows with norm below 1e-12 are an error rather than being
    silently regularized: the distance is undefined there and a zero
    feature row almost always signals an upstream bug.
    """
    if teacher.dim != student.dim:
        raise DimensionMismatch(f"feature dims differ: {teacher.dim} vs {student.dim}")
    if teacher.batch_size != student.batch_size:
        raise DimensionMismatch(
            f"batch sizes differ: {teacher.batch_size} vs {student.batch_size}"
        )
    x_norms = np.linalg.norm(teacher.data, axis=1)
    y_norms = np.linalg.norm(student.data, axis=1)
    for i, n in enumerate(x_norms):
        if n < MIN_ROW_NORM:
            raise ZeroNormRow(i, side="teacher row")
    for j, n in enumerate(y_norms):
        if n < MIN_ROW_NORM:
            raise ZeroNormRow(j, side="student row")
    sims = (teacher.data / x_norms[:, None]) @ (student.data / y_norms[:, None]).T
    entries = np.clip(1.0 - sims, 0.0, 2.0)
    return CostMatrix(entries, metric_tag="cosine")


def exact_emd_uniform(cost: CostMatrix) -> OtSolution:
    """Exact transport cost for uniform marginals, via linear assignment.

    Returns the minimizing plan in the form (1/b) P for a permutation
    matrix P together with its cost (1/b) sum_i C[i, sigma(i)].
    """
    cost.require_square()
    C = cost.entries
    b = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    total = float(C[rows, cols].sum()) / b
    entries = np.zeros((b, b))
    entries[rows, cols] = 1.0 / b
    plan = TransportPlan(entries, MassVector.uniform(b), MassVector.uniform(b))
    return OtSolution(cost=total, plan=plan, iterations_used=1, converged=True)


def validate_plan(plan: TransportPlan, tol: float) -> list:
    """Diagnostic check of nonnegativity and marginal constraints.

    Returns an empty list iff every entry is >= -tol and every row and
    column sum is within tol of its declared marginal.
    """
    violations = []
    T = plan.entries
    neg = np.argwhere(T < -tol)
    for i, j in neg:
        violations.append(Violation("negative_entry", (int(i), int(j)), float(T[i, j])))
    row_gap = np.abs(T.sum(axis=1) - plan.row_marginal.weights)
    for i in np.flatnonzero(row_gap > tol):
        violations.append(Violation("row_sum", (int(i),), float(row_gap[i])))
    col_gap = np.abs(T.sum(axis=0) - plan.col_marginal.weights)
    for j in np.flatnonzero(col_gap > tol):
        violations.append(Violation("col_sum", (int(j),), float(col_gap[j])))
    return violations


def plan_cost(plan: TransportPlan, cost: CostMatrix) -> float:
    """Frobenius inner product <T, C>."""
    if plan.entries.shape != cost.entries.shape:
        raise DimensionMismatch(
            f"plan shape {plan.entries.shape} vs cost shape {cost.entries.shape}"
        )
    return float(np.sum(plan.entries * cost.entries))


# ---------------------------------------------------------------------------
# Feature batch file formats (used by the CLI `solve` subcommand)
# ---------------------------------------------------------------------------
#
# CSV:    first line `dim=<d>`, then one comma-separated row per example.
# Binary: little-endian [u32 b][u32 d][f64 * b*d], row-major.

_BIN_HEADER_DTYPE = np.dtype("<u4")


def save_feature_csv(batch: FeatureBatch, path):
    with open(path, "w") as fh:
        fh.write(f"dim={batch.dim}\n")
        for row in batch.data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_feature_csv(path) -> FeatureBatch:
    with open(path, "r") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise FeatureFormatError(f"{path}: expected 'dim=<d>' header, got {header!r}")
        try:
            d = int(header[4:])
        except ValueError:
            raise FeatureFormatError(f"{path}: bad dimension in header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d:
                raise FeatureFormatError(
                    f"{path}:{lineno}: expected {d} values, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FeatureFormatError(f"{path}:{lineno}: non-numeric value")
    if not rows:
        raise FeatureFormatError(f"{path}: no feature rows")
    return FeatureBatch(np.array(rows))


def save_feature_bin(batch: FeatureBatch, path):
    with open(path, "wb") as fh:
        np.array([batch.batch_size, batch.dim], dtype=_BIN_HEADER_DTYPE).tofile(fh)
        fh.write(batch.data.astype("<f8").tobytes())


def load_feature_bin(path) -> FeatureBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FeatureFormatError(f"{path}: truncated header")
    b, d = (int(x) for x in np.frombuffer(raw[:8], dtype=_BIN_HEADER_DTYPE))
    expected = 8 + b * d * 8
    if len(raw) != expected:
        raise FeatureFormatError(
            f"{path}: expected {expected} bytes for b={b}, d={d}, got {len(raw)}"
        )
    data = np.frombuffer(raw[8:], dtype="<f8").reshape(b, d).copy()
    return FeatureBatch(data)


def load_feature_file(path) -> FeatureBatch:
    """Load either format; CSV is recognized by its `dim=` prefix."""
    with open(path, "rb") as fh:
        prefix = fh.read(4)
    if prefix == b"dim=":
        return load_feature_csv(path)
    return load_feature_bin(path)
