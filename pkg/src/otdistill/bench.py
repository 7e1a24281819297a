"""Wall-clock timing of the transport solvers and their kernel variants."""

import time

import numpy as np

from . import _kernels, solvers
from .backend import NUMBA_ENABLED
from .ot_core import CostMatrix, FeatureBatch, MassVector, cosine_cost, exact_emd_uniform
from .solvers import IpotConfig, SinkhornConfig

BENCH_METHODS = ("exact", "sinkhorn", "ipot", "remd")


def random_cosine_cost(b: int, d: int, seed: int) -> CostMatrix:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    t = FeatureBatch(rng.standard_normal((b, d)))
    s = FeatureBatch(rng.standard_normal((b, d)))
    return cosine_cost(t, s)


def _solver_fn(method, C, mu, nu, epsilon, beta, iters):
    if method == "exact":
        return lambda: exact_emd_uniform(C)
    if method == "sinkhorn":
        cfg = SinkhornConfig(epsilon=epsilon, max_iters=iters)
        return lambda: solvers.sinkhorn_rot(C, mu, nu, cfg)
    if method == "ipot":
        cfg = IpotConfig(beta=beta, num_iters=iters)
        return lambda: solvers.ipot(C, mu, nu, cfg)
    if method == "remd":
        return lambda: solvers.remd(C)
    raise ValueError(f"unknown bench method {method!r}")


def time_solver(method, b, reps=5, seed=0, d=64, epsilon=0.05, beta=20.0, iters=50):
    """Median wall-clock per solve in ms, plus the iterations used."""
    C = random_cosine_cost(b, d, seed)
    mu = MassVector.uniform(b)
    nu = MassVector.uniform(b)
    fn = _solver_fn(method, C, mu, nu, epsilon, beta, iters)
    sol = fn()  # warm-up: JIT compilation, allocator, caches
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sol = fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times)), sol.iterations_used


def run_bench(methods, sizes, reps=5, seed=0, d=64, epsilon=0.05, beta=20.0, iters=50):
    """Rows of {method, b, median_ms, iters} on the active backend."""
    rows = []
    for method in methods:
        for b in sizes:
            median_ms, used = time_solver(
                method, b, reps=reps, seed=seed, d=d,
                epsilon=epsilon, beta=beta, iters=iters,
            )
            rows.append({"method": method, "b": b, "median_ms": median_ms, "iters": used})
    return rows


def _kernel_fn(variant, method, C, mu, nu, epsilon, beta, iters):
    kernels = _kernels.KERNEL_VARIANTS[variant]
    if method == "remd":
        return lambda: kernels["remd"](C.entries)
    if method == "ipot":
        return lambda: kernels["ipot"](C.entries, mu.weights, nu.weights, beta, iters, 1)
    if method == "sinkhorn":
        K = np.exp(-C.entries / epsilon)
        return lambda: kernels["sinkhorn"](K, mu.weights, nu.weights, iters, 1e-9)
    raise ValueError(f"method {method!r} has no kernel variants")


def run_kernel_comparison(methods, sizes, reps=5, seed=0, d=64,
                          epsilon=0.05, beta=20.0, iters=50):
    """Time the numpy and numba kernel variants side by side.

    Rows carry an extra ``backend`` column. The numba rows are present
    only when the numba backend is importable and enabled.
    """
    variants = ["numpy"] + (["numba"] if NUMBA_ENABLED else [])
    rows = []
    for method in methods:
        if method == "exact":
            continue  # single implementation (assignment solve)
        for b in sizes:
            C = random_cosine_cost(b, d, seed)
            mu = MassVector.uniform(b)
            nu = MassVector.uniform(b)
            for variant in variants:
                fn = _kernel_fn(variant, method, C, mu, nu, epsilon, beta, iters)
                fn()
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn()
                    times.append((time.perf_counter() - t0) * 1000.0)
                rows.append(
                    {"backend": variant, "method": method, "b": b,
                     "median_ms": float(np.median(times)), "iters": iters}
                )
    return rows


def fit_loglog_slope(sizes, medians_ms) -> float:
    """Least-squares slope of log(time) against log(b)."""
    return float(np.polyfit(np.log(np.asarray(sizes, dtype=float)),
                            np.log(np.asarray(medians_ms, dtype=float)), 1)[0])


def slopes_by_method(rows) -> dict:
    out = {}
    methods = {r["method"] for r in rows}
    for method in sorted(methods):
        pts = sorted((r["b"], r["median_ms"]) for r in rows if r["method"] == method)
        if len(pts) >= 2:
            out[method] = fit_loglog_slope([p[0] for p in pts], [p[1] for p in pts])
    return out
