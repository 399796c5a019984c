import csv
import io

import pytest

from phylograd import bench, kernels
from phylograd.backend import BackendConfig


def test_fit_exponent():
    assert bench.fit_exponent([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0)


def test_measure_and_csv():
    model = bench.bench_model(61)
    tree, raw = bench.fixture_with_patterns(6, 20, model, 1)
    m = bench.measure_gradient(tree, model, raw, BackendConfig(), iterations=2)
    assert m.seconds > 0 and m.patterns == 20 and m.states == 61
    rows = list(csv.DictReader(io.StringIO(bench.to_csv([m]))))
    assert tuple(rows[0]) == bench.CSV_FIELDS
    names = {r["kernel"] for r in rows}
    assert {"preOrderPartials", "gradient", "postOrderPartials", "matrixTranspose",
            "nodeSiteReduction"} <= names
    calls = {r["kernel"]: int(r["calls"]) for r in rows}
    assert calls["gradient"] == 2 and calls["postOrderPartials"] == 2 * 5
    with pytest.raises(ValueError):
        bench.bench_model(20)


def test_small_sweeps():
    res = bench.tips_sweep(tips=(4, 8), patterns=20, iterations=1)
    assert len(res["measurements"]) == 2 and "oracleExponent" in res
    cols = bench.columns_sweep(patterns=(1, 8), tips=5, iterations=1,
                               config=BackendConfig(kind="parallel", workers=2))
    assert len(cols["throughput"]) == 2
    workers = bench.workers_sweep(workers=(1, 2), tips=5, patterns=8, iterations=1)
    assert len(workers["speedup"]) == 2
    impl = bench.implementation_sweep(tips=5, patterns=10, iterations=1)
    assert {m.implementation for m in impl["measurements"]} == set(kernels.IMPLEMENTATIONS)
