"""Benchmark sweeps: tip count, pattern count, worker count, kernel implementation.

Every measurement times a fixed number of gradient iterations (matrices,
transposes, both traversals, gradient kernel and reduction) on a seeded
fixture, and records the per-kernel breakdown of those iterations.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .backend import Backend, BackendConfig, KernelTimings, default_workers
from .core import LikelihoodEngine, as_patterns, oracle_gradient_quadratic
from .model import (CodonModelParams, RateCategories, SubstitutionModel, build_codon_m0,
                    build_gtr, discrete_gamma)
from .simulate import fixture_with_patterns

CSV_FIELDS = ("N", "C", "S", "backend", "workers", "kernels", "kernel", "nsTotal", "calls")
ITERATIONS = 5


def bench_model(states: int, rate_categories: int = 1) -> SubstitutionModel:
    cats = discrete_gamma(0.5, rate_categories) if rate_categories > 1 else RateCategories.single()
    if states == 4:
        rm = build_gtr([1.0, 2.5, 0.8, 1.1, 3.0, 1.0], [0.3, 0.2, 0.2, 0.3])
    elif states == 61:
        rm = build_codon_m0(CodonModelParams(kappa=2.0, omega=0.3))
    else:
        raise ValueError("benchmarks use 4 or 61 states")
    return SubstitutionModel(rm, cats)


@dataclass
class Measurement:
    tips: int
    patterns: int
    states: int
    backend: str
    workers: int
    implementation: str
    seconds: float  # best wall time of one gradient iteration
    timings: KernelTimings  # accumulated over the timed iterations

    def rows(self):
        for row in self.timings.rows():
            yield {
                "N": self.tips, "C": self.patterns, "S": self.states, "backend": self.backend,
                "workers": self.workers, "kernels": self.implementation, "kernel": row["name"],
                "nsTotal": row["nsTotal"], "calls": row["calls"],
            }


def measure_gradient(tree, model, alignment, config: BackendConfig,
                     iterations: int = ITERATIONS, min_seconds: float = 0.0) -> Measurement:
    """Best wall time of one gradient iteration.

    Runs ``iterations`` timed iterations, then keeps going (up to 200) until
    ``min_seconds`` of timed work has accumulated, so millisecond-scale
    fixtures are not judged on a handful of noisy samples.
    """
    data = as_patterns(alignment)
    with Backend(config) as backend:
        engine = LikelihoodEngine(tree, model, data, backend)
        engine.gradient()  # warm caches and plans
        backend.timings.reset()
        best = np.inf
        spent = 0.0
        done = 0
        while done < iterations or (spent < min_seconds and done < 200):
            engine.set_tree(tree)
            start = time.perf_counter()
            engine.gradient()
            elapsed = time.perf_counter() - start
            best = min(best, elapsed)
            spent += elapsed
            done += 1
        timings = KernelTimings()
        timings.merge(backend.timings)
        impl = backend.kernel_implementation
    workers = config.workers if config.kind == "parallel" else 1
    return Measurement(tree.tip_count, data.pattern_count, model.state_count, config.kind,
                       workers, impl, best, timings)


def measure_oracle(tree, model, alignment, repeats: int = 3) -> float:
    oracle_gradient_quadratic(tree, model, alignment)  # warm-up, untimed
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        oracle_gradient_quadratic(tree, model, alignment)
        best = min(best, time.perf_counter() - start)
    return best


def fit_exponent(x, y) -> float:
    """Slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def tips_sweep(tips=(16, 32, 64, 128), patterns: int = 1000, states: int = 4, seed: int = 1,
               config: BackendConfig | None = None, oracle: bool = True, iterations=ITERATIONS,
               min_seconds: float = 0.25):
    config = config or BackendConfig()
    model = bench_model(states)
    out = {"measurements": [], "oracleSeconds": [], "tips": list(tips)}
    for k, n in enumerate(tips):
        tree, raw = fixture_with_patterns(n, patterns, model, seed + k)
        out["measurements"].append(
            measure_gradient(tree, model, raw, config, iterations, min_seconds))
        if oracle:
            out["oracleSeconds"].append(measure_oracle(tree, model, raw))
    out["gradientExponent"] = fit_exponent(tips, [m.seconds for m in out["measurements"]])
    if oracle:
        out["oracleExponent"] = fit_exponent(tips, out["oracleSeconds"])
    return out


def columns_sweep(patterns=(1, 64, 256, 1024, 2048), states: int = 61, tips: int = 62,
                  seed: int = 1, config: BackendConfig | None = None, iterations=ITERATIONS):
    config = config or BackendConfig(kind="parallel", workers=default_workers())
    model = bench_model(states)
    tree, raw = fixture_with_patterns(tips, max(patterns), model, seed)
    out = {"measurements": [], "throughput": []}
    for c in patterns:
        sub = type(raw)(raw.names, np.ascontiguousarray(raw.codes[:, :c]), raw.masks,
                        raw.state_count, raw.alphabet)
        m = measure_gradient(tree, model, sub, config, iterations)
        out["measurements"].append(m)
        out["throughput"].append(c / m.seconds)
    return out


def workers_sweep(workers=(1, 2, 4, 8), states: int = 61, tips: int = 62, patterns: int = 1024,
                  seed: int = 1, iterations=ITERATIONS):
    model = bench_model(states)
    tree, raw = fixture_with_patterns(tips, patterns, model, seed)
    serial = measure_gradient(tree, model, raw, BackendConfig(kind="serial"), iterations)
    out = {"serial": serial, "measurements": [], "speedup": []}
    for w in workers:
        m = measure_gradient(tree, model, raw, BackendConfig(kind="parallel", workers=w), iterations)
        out["measurements"].append(m)
        out["speedup"].append(serial.seconds / m.seconds)
    return out


def implementation_sweep(states: int = 4, tips: int = 32, patterns: int = 500, seed: int = 1,
                         iterations=ITERATIONS):
    """Compiled kernels against the numpy fallback on one fixture."""
    model = bench_model(states)
    tree, raw = fixture_with_patterns(tips, patterns, model, seed)
    out = {"measurements": []}
    for name in sorted(kernels.IMPLEMENTATIONS):
        out["measurements"].append(
            measure_gradient(tree, model, raw, BackendConfig(kernels=name), iterations))
    times = {m.implementation: m.seconds for m in out["measurements"]}
    if "compiled" in times:
        out["compiledSpeedup"] = times["python"] / times["compiled"]
    return out


def to_csv(measurements) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for m in measurements:
        for row in m.rows():
            writer.writerow(row)
    return buf.getvalue()
