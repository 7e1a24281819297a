import itertools

import numpy as np
import pytest

from otdistill.ot_core import CostMatrix, FeatureBatch, cosine_cost


def brute_force_emd_uniform(C: np.ndarray) -> float:
    """Exhaustive-permutation oracle: (1/b) min over assignments."""
    b = C.shape[0]
    best = min(
        sum(C[i, p[i]] for i in range(b)) for p in itertools.permutations(range(b))
    )
    return best / b


def random_cost_instance(seed: int, b: int = None, d: int = None) -> CostMatrix:
    """Seeded random cosine cost between two Gaussian feature batches."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    if b is None:
        b = int(rng.integers(2, 9))
    if d is None:
        d = int(rng.integers(3, 12))
    t = FeatureBatch(rng.standard_normal((b, d)))
    s = FeatureBatch(rng.standard_normal((b, d)))
    return cosine_cost(t, s)


@pytest.fixture(scope="session")
def cost_suite():
    """100 seeded random cosine-cost instances with b in 2..8."""
    return [random_cost_instance(1000 + i) for i in range(100)]
