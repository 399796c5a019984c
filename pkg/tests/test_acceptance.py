"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the
terminal summary.  Run with ``pytest tests/test_acceptance.py -s`` to see
them inline.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from phylograd import bench
from phylograd import model as M
from phylograd.alignment import compress_patterns
from phylograd.backend import Backend, BackendConfig, default_workers, make_backend
from phylograd.cli import main
from phylograd.core import (
    LikelihoodEngine, finite_difference_gradient, full_gradient, gradient_scale,
    oracle_gradient_quadratic,
    relative_deviation,
)
from phylograd.hmc import HmcConfig, hmc_sample
from phylograd.simulate import make_fixture

from helpers import brute_force_site_likelihoods, random_instance

pytestmark = pytest.mark.slow


def _instances():
    """50 seeded instances covering every (N, S, R, C) combination at least once."""
    grid = list(itertools.product((2, 4, 8, 16), (4, 61), (1, 4), (1, 10, 200)))
    rng = np.random.default_rng(2024)
    extra = [grid[k] for k in rng.choice(len(grid), 50 - len(grid), replace=False)]
    out = []
    for k, (n, s, r, c) in enumerate(grid + extra):
        out.append(dict(seed=1000 + k, tips=n, states=s, rates=r, columns=c,
                        ambiguity=k % 3 == 0, zero_root_branch=k % 5 == 0))
    return out


INSTANCES = _instances()


@pytest.fixture(scope="module")
def instances():
    return [random_instance(**spec) for spec in INSTANCES]


def test_criterion_1_oracle_triangle(instances, criterion):
    start = time.perf_counter()
    worst_quad = worst_fd = 0.0
    for tree, model, data in instances:
        got = full_gradient(tree, model, data).per_branch
        scale = gradient_scale(model, data.weights)
        quad = oracle_gradient_quadratic(tree, model, data)
        fd = finite_difference_gradient(tree, model, data, h=1e-5)
        worst_quad = max(worst_quad, relative_deviation(got, quad, scale))
        worst_fd = max(worst_fd, relative_deviation(got, fd, scale))
    elapsed = time.perf_counter() - start
    ok = worst_quad <= 1e-8 and worst_fd <= 1e-6 and elapsed < 300
    criterion(1, "oracle triangle", ok,
              f"{len(instances)} instances, max dev vs quadratic {worst_quad:.2e} (<= 1e-8), "
              f"vs FD {worst_fd:.2e} (<= 1e-6), {elapsed:.1f}s (< 300s)")
    assert ok


def test_criterion_2_node_invariance(instances, criterion):
    worst = 0.0
    for tree, model, data in instances:
        engine = LikelihoodEngine(tree, model, data)
        engine.gradient()
        ref = engine.node_log_likelihoods(tree.root)
        for node in range(tree.node_count):
            rel = np.abs(np.expm1(engine.node_log_likelihoods(node) - ref))
            worst = max(worst, float(rel.max()))
    ok = worst <= 1e-10
    criterion(2, "node invariance", ok,
              f"max relative spread of per-pattern likelihood over nodes {worst:.2e} (<= 1e-10)")
    assert ok


def test_criterion_3_brute_force(criterion):
    worst = 0.0
    cases = 0
    for n in range(2, 7):
        for r in (1, 2):
            for rep in range(2):
                tree, model, data = random_instance(300 + 10 * n + 2 * r + rep, n, 4, r, 8,
                                                    ambiguity=rep == 1)
                value = LikelihoodEngine(tree, model, data).log_likelihood()
                brute = float(np.dot(data.weights, np.log(brute_force_site_likelihoods(tree, model, data))))
                worst = max(worst, abs(value - brute) / abs(brute))
                cases += 1
    ok = worst <= 1e-10
    criterion(3, "brute-force equivalence", ok,
              f"{cases} cases N=2..6, R in (1,2): max relative error {worst:.2e} (<= 1e-10)")
    assert ok


def test_criterion_4_complexity(criterion):
    start = time.perf_counter()
    res = bench.tips_sweep(tips=(16, 32, 64, 128), patterns=1000, states=4, seed=1)
    elapsed = time.perf_counter() - start
    g, o = res["gradientExponent"], res["oracleExponent"]
    ok = 0.8 <= g <= 1.3 and 1.7 <= o <= 2.3 and elapsed < 600
    criterion(4, "complexity", ok,
              f"full_gradient exponent {g:.2f} (in [0.8, 1.3]), quadratic oracle exponent "
              f"{o:.2f} (in [1.7, 2.3]), {elapsed:.1f}s (< 600s)")
    assert ok


def test_criterion_5_saturation_and_speedup(criterion):
    workers = max(4, default_workers())
    cols = bench.columns_sweep(patterns=(1024, 2048), states=61, tips=62, seed=1,
                               config=BackendConfig(kind="parallel", workers=workers))
    t1024, t2048 = cols["throughput"]
    ratio = max(t1024, t2048) / min(t1024, t2048)
    sweep = bench.workers_sweep(workers=(1, 2, 4, 8), states=61, tips=62, patterns=1024, seed=1)
    speedups = sweep["speedup"]
    best4 = max(s for w, s in zip((1, 2, 4, 8), speedups) if w >= 4)
    monotone = all(b >= a * 0.95 for a, b in zip(speedups[:3], speedups[1:3]))
    ok = ratio <= 1.3 and best4 >= 2.0 and monotone
    criterion(5, "saturation and parallel speedup", ok,
              f"throughput C=1024 {t1024:.0f}/s, C=2048 {t2048:.0f}/s, ratio {ratio:.2f} (<= 1.3); "
              f"speedup over serial at workers 1,2,4,8 = "
              f"{', '.join(f'{s:.2f}' for s in speedups)} (need >= 2.0 with >= 4 workers, "
              f"monotone); cpu count {default_workers()}")
    assert ok


def test_criterion_6_determinism(criterion):
    tree, model, data = random_instance(77, 16, 61, 4, 200, ambiguity=True)
    serial = [full_gradient(tree, model, data, Backend()).per_branch for _ in range(5)]
    bitwise = all(np.array_equal(serial[0], s) for s in serial[1:])
    worst = 0.0
    for w in (1, 2, 4, 8):
        with make_backend("parallel", workers=w) as backend:
            for _ in range(5):
                got = full_gradient(tree, model, data, backend).per_branch
                worst = max(worst, relative_deviation(got, serial[0]))
    ok = bitwise and worst <= 1e-12
    criterion(6, "determinism", ok,
              f"serial 5 runs bit-identical: {bitwise}; parallel workers 1,2,4,8 x 5 runs max "
              f"relative deviation {worst:.2e} (<= 1e-12)")
    assert ok


def _bench_kernels(states, tmp_path, capsys):
    timings = tmp_path / f"t{states}.json"
    code = main(["bench", "--sweep", "single", "--tips", "16", "--patterns", "100",
                 "--states", str(states), "--iterations", "2", "--timings-json", str(timings)])
    capsys.readouterr()
    assert code == 0
    return {row["name"]: row["calls"] for row in json.loads(timings.read_text())["kernels"]}


def test_criterion_7_timing_report(tmp_path, capsys, criterion):
    table = ("preOrderPartials", "gradient", "postOrderPartials", "matrixTranspose",
             "nodeSiteReduction")
    codon = _bench_kernels(61, tmp_path, capsys)
    nuc = _bench_kernels(4, tmp_path, capsys)
    all_rows = all(codon.get(name, 0) > 0 for name in table)
    no_transpose = "matrixTranspose" not in nuc and all(nuc.get(n, 0) > 0 for n in table if n != "matrixTranspose")
    ok = all_rows and no_transpose
    criterion(7, "timing report shape", ok,
              f"S=61 rows {[f'{n}:{codon.get(n, 0)}' for n in table]}; "
              f"S=4 matrixTranspose absent: {'matrixTranspose' not in nuc}")
    assert ok


def test_criterion_8_hmc_demo(criterion):
    jc = M.SubstitutionModel(M.jukes_cantor())
    tree, raw = make_fixture(5, 500, jc, seed=8, mean_length=0.1)
    data = compress_patterns(raw)
    truth = tree.branch_lengths
    start = time.perf_counter()
    cfg = HmcConfig(step_size=0.05, leapfrog_steps=10, iterations=20000, warmup=1000, seed=8)
    result = hmc_sample(tree, jc, data, cfg)
    elapsed = time.perf_counter() - start
    z = np.abs(result.means - truth) / result.sds
    ok = (elapsed < 600 and 0.4 <= result.acceptance_rate <= 0.95 and np.all(z <= 3)
          and result.divergences == 0)
    criterion(8, "HMC demo", ok,
              f"20000 iterations in {elapsed:.0f}s (< 600s), acceptance {result.acceptance_rate:.3f} "
              f"(in [0.4, 0.95]), step {result.step_size:.3g}, max |mean - truth|/sd {z.max():.2f} "
              f"(<= 3), divergences {result.divergences} (== 0)")
    assert ok
