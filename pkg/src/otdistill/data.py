"""Synthetic datasets, CSV ingestion, and stratified splitting.

Everything here is a pure function of (parameters, seed). Randomness
comes from numpy's Philox generator, a 64-bit counter-based stream with
a published specification, so identical seeds reproduce identical bytes
across platforms. Class means are placed on a fixed-radius sphere rather
than in a cube so that angular structure between classes is present from
the first layer on; the cluster spread then acts as a difficulty knob
(small spread = well-separated classes).
"""

from dataclasses import dataclass, field

import numpy as np


class InvalidParams(ValueError):
    pass


class InvalidFraction(ValueError):
    pass


class ClassTooSmall(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class InconsistentWidth(ValueError):
    def __init__(self, line: int, expected: int, got: int):
        self.line = line
        super().__init__(f"line {line}: expected {expected} columns, got {got}")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise InvalidParams("inputs must be (n, d), labels must be (n,)")
        if len(self.inputs) != len(self.labels):
            raise InvalidParams("inputs and labels length mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidParams(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def one_hot_labels(self) -> np.ndarray:
        out = np.zeros((len(self), self.class_count))
        out[np.arange(len(self)), self.labels] = 1.0
        return out


def _rng(seed: int):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


MEAN_SPHERE_RADIUS = 3.0


def gen_gaussian_mixture(
    classes: int, per_class: int, dim: int, spread: float, seed: int
) -> Dataset:
    """K isotropic Gaussian clusters with seed-derived means on a sphere.

    Means sit on the sphere of radius 3, clusters have standard deviation
    ``spread``, labels follow cluster membership. Separation-to-noise is
    therefore 3/spread: spread -> 0 gives perfectly separable classes.
    """
    if classes < 2 or per_class < 1 or dim < 2 or spread <= 0:
        raise InvalidParams(
            f"need classes >= 2, per_class >= 1, dim >= 2, spread > 0; "
            f"got ({classes}, {per_class}, {dim}, {spread})"
        )
    rng = _rng(seed)
    directions = rng.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * MEAN_SPHERE_RADIUS
    inputs = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for k in range(classes):
        block = slice(k * per_class, (k + 1) * per_class)
        inputs[block] = means[k] + spread * rng.standard_normal((per_class, dim))
        labels[block] = k
    provenance = {
        "generator": "gaussian_mixture",
        "classes": classes,
        "per_class": per_class,
        "dim": dim,
        "spread": spread,
        "seed": seed,
    }
    return Dataset(inputs, labels, classes, provenance)


def split(ds: Dataset, test_fraction: float, seed: int):
    """Stratified train/test split; disjoint, exhaustive, seed-deterministic.

    Each class contributes round(test_fraction * n_class) test examples,
    clipped so both sides keep at least one example per class.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InvalidFraction(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = _rng(seed)
    train_idx = []
    test_idx = []
    for k in range(ds.class_count):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < 2:
            raise ClassTooSmall(f"class {k} has {len(members)} examples; need >= 2 to split")
        perm = rng.permutation(members)
        n_test = int(np.floor(test_fraction * len(members) + 0.5))
        n_test = min(max(n_test, 1), len(members) - 1)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)

    def _subset(idx, role):
        prov = dict(ds.provenance)
        prov.update({"split": role, "test_fraction": test_fraction, "split_seed": seed})
        return Dataset(ds.inputs[idx], ds.labels[idx], ds.class_count, prov)

    return _subset(train_idx, "train"), _subset(test_idx, "test")


def save_csv(ds: Dataset, path):
    with open(path, "w") as fh:
        fh.write("label," + ",".join(f"f{i + 1}" for i in range(ds.dim)) + "\n")
        for y, row in zip(ds.labels, ds.inputs):
            fh.write(str(int(y)) + "," + ",".join(repr(float(x)) for x in row) + "\n")


def load_csv(path) -> Dataset:
    """Parse `label,f1,...,fd` CSV; class count inferred as max label + 1."""
    with open(path, "r") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "label":
            raise ParseError(1, f"expected header starting with 'label', got {header!r}")
        d = len(cols) - 1
        if d < 1:
            raise ParseError(1, "no feature columns in header")
        rows = []
        labels = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 1:
                raise InconsistentWidth(lineno, d + 1, len(parts))
            try:
                label = int(parts[0])
            except ValueError:
                raise ParseError(lineno, f"bad label {parts[0]!r}")
            if label < 0:
                raise ParseError(lineno, f"negative label {label}")
            try:
                rows.append([float(p) for p in parts[1:]])
            except ValueError:
                raise ParseError(lineno, "non-numeric feature value")
            labels.append(label)
    if not rows:
        raise ParseError(2, "no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(
        np.asarray(rows), labels, int(labels.max()) + 1, {"source": str(path)}
    )
