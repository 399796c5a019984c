"""Block-decomposed execution of the likelihood kernels.

A launch is described by an :class:`ExecutionPlan`: a grid of independent
blocks, each covering a tile of ``states x columns`` lanes and staging its
operands into a bounded scratch arena before computing.  The serial backend
runs every block on the calling thread; the parallel backend hands
contiguous block ranges to a work-stealing pool of OS threads.  Blocks write
disjoint output slabs and all reductions use fixed trees, so results do not
depend on the worker count.
"""

from __future__ import annotations

import collections
import json
import math
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .model import TransitionMatrixSet

MAX_THREADS_PER_BLOCK = 512
DEFAULT_STAGING_BUDGET = 48 * 1024
TABLE_ORDER = (
    "preOrderPartials",
    "gradient",
    "postOrderPartials",
    "matrixTranspose",
    "nodeSiteReduction",
)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "serial"
    workers: int = 1
    cbs_nucleotide: int = 16
    cbs_large_state: int = 8
    pbs: int = 8
    mbs: int = 16
    columns_per_thread_nucleotide: int = 4
    staging_budget: int = DEFAULT_STAGING_BUDGET
    cbs: int | None = None
    kernels: str | None = None

    def __post_init__(self):
        if self.kind not in ("serial", "parallel"):
            raise ConfigurationError(f"backend kind must be serial or parallel, got {self.kind!r}")
        for name in ("workers", "cbs_nucleotide", "cbs_large_state", "pbs", "mbs",
                     "columns_per_thread_nucleotide", "staging_budget"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.cbs is not None and self.cbs < 1:
            raise ConfigurationError("cbs must be a positive integer")

    def column_block_size(self, states: int) -> int:
        """CBS for a padded state count.

        An explicit ``cbs`` is used verbatim (and may fail plan validation);
        the defaults are capped so ``states * CBS <= 512``.
        """
        if self.cbs is not None:
            return self.cbs
        base = self.cbs_nucleotide if states <= 4 else self.cbs_large_state
        return max(1, min(base, MAX_THREADS_PER_BLOCK // states))

    def to_dict(self):
        return {
            "kind": self.kind,
            "workers": self.workers,
            "cbsNucleotide": self.cbs_nucleotide,
            "cbsLargeState": self.cbs_large_state,
            "cbsOverride": self.cbs,
            "pbs": self.pbs,
            "mbs": self.mbs,
            "columnsPerThreadNucleotide": self.columns_per_thread_nucleotide,
            "stagingBudget": self.staging_budget,
            "kernels": self.kernels or kernels.DEFAULT,
        }


@dataclass(frozen=True)
class ExecutionPlan:
    kernel: str
    grid: tuple
    block_shape: tuple  # (states-per-block, columns-per-block)
    cbs: int
    pbs: int
    mbs: int
    staging_bytes: int
    staging_budget: int
    lane_columns: int = 1

    @property
    def block_count(self) -> int:
        return math.prod(self.grid)

    @property
    def threads(self) -> int:
        return self.block_count * self.block_shape[0] * self.block_shape[1]

    @property
    def matrix_entries_per_stage(self) -> int:
        states = self.block_shape[0]
        return states * min(self.pbs, states)

    def blocks(self):
        import itertools

        return itertools.product(*(range(g) for g in self.grid))


class KernelTimings:
    """Monotonic nanosecond totals and call counts per kernel name."""

    def __init__(self):
        self._data = collections.OrderedDict()
        self._lock = threading.Lock()

    def add(self, name, ns, calls=1):
        with self._lock:
            entry = self._data.setdefault(name, [0, 0])
            entry[0] += ns
            entry[1] += calls

    def reset(self):
        with self._lock:
            self._data.clear()

    def snapshot(self):
        with self._lock:
            return {k: tuple(v) for k, v in self._data.items()}

    def since(self, before: dict) -> "KernelTimings":
        """Timings accumulated after ``before`` (a :meth:`snapshot`)."""
        out = KernelTimings()
        for name, (ns, calls) in self.snapshot().items():
            ns0, calls0 = before.get(name, (0, 0))
            if calls > calls0:
                out.add(name, ns - ns0, calls - calls0)
        return out

    def merge(self, other: "KernelTimings"):
        for name, (ns, calls) in other.snapshot().items():
            self.add(name, ns, calls)

    def rows(self):
        data = self.snapshot()
        total = sum(ns for ns, _ in data.values()) or 1
        names = [n for n in TABLE_ORDER if n in data] + sorted(n for n in data if n not in TABLE_ORDER)
        return [
            {
                "name": n,
                "calls": data[n][1],
                "nsTotal": data[n][0],
                "nsPerCall": data[n][0] / data[n][1] if data[n][1] else 0.0,
                "percent": 100.0 * data[n][0] / total,
            }
            for n in names
        ]

    def to_json(self, indent=2):
        return json.dumps({"kernels": self.rows()}, indent=indent)


class WorkStealingPool:
    """Persistent worker threads with per-worker deques.

    Each launch deals its task ranges out in contiguous runs, one deque per
    worker; a worker drains its own deque from the front and, once empty,
    steals from the back of the others.
    """

    def __init__(self, workers: int):
        self.size = workers
        self._deques = [collections.deque() for _ in range(workers)]
        self._lock = threading.Lock()
        self._work = threading.Condition(self._lock)
        self._done = threading.Condition(self._lock)
        self._generation = 0
        self._pending = 0
        self._errors = []
        self._fn = None
        self._closed = False
        self._launch = threading.Lock()
        self._threads = [
            threading.Thread(target=self._loop, args=(k,), daemon=True, name=f"phylograd-{k}")
            for k in range(workers)
        ]
        for t in self._threads:
            t.start()

    def run(self, fn, tasks):
        if not tasks:
            return
        with self._launch:
            with self._lock:
                per = -(-len(tasks) // self.size)
                for k in range(self.size):
                    self._deques[k].extend(tasks[k * per : (k + 1) * per])
                self._fn = fn
                self._pending = len(tasks)
                self._errors = []
                self._generation += 1
                self._work.notify_all()
                while self._pending:
                    self._done.wait()
                errors = self._errors
            if errors:
                raise errors[0]

    def _take(self, k):
        try:
            return self._deques[k].popleft()
        except IndexError:
            pass
        for j in range(1, self.size):
            try:
                return self._deques[(k + j) % self.size].pop()
            except IndexError:
                continue
        return None

    def _loop(self, k):
        seen = 0
        while True:
            with self._lock:
                while self._generation == seen and not self._closed:
                    self._work.wait()
                if self._closed:
                    return
                seen = self._generation
                fn = self._fn
            while True:
                task = self._take(k)
                if task is None:
                    break
                try:
                    fn(k, *task)
                except BaseException as exc:  # propagated to the launching thread
                    with self._lock:
                        self._errors.append(exc)
                with self._lock:
                    self._pending -= 1
                    if self._pending == 0:
                        self._done.notify_all()

    def close(self):
        with self._lock:
            self._closed = True
            self._work.notify_all()
        for t in self._threads:
            t.join(timeout=1.0)


class Backend:
    """Plans and executes kernel launches; owns the scratch arenas and timings."""

    def __init__(self, config: BackendConfig | None = None):
        self.config = config or BackendConfig()
        self.kernels = kernels.get(self.config.kernels)
        self.timings = KernelTimings()
        workers = self.config.workers if self.config.kind == "parallel" else 1
        self._arenas = [np.zeros(self.config.staging_budget // 8) for _ in range(workers)]
        self._pool = WorkStealingPool(workers) if self.config.kind == "parallel" else None
        self._plans = {}

    @property
    def kernel_implementation(self) -> str:
        return "compiled" if self.kernels is kernels.compiled else "python"

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    # planning -------------------------------------------------------------

    def plan(self, kernel: str, *, states: int = 0, patterns: int = 0, rates: int = 1,
             branches: int = 0) -> ExecutionPlan:
        key = (kernel, states, patterns, rates, branches)
        cached = self._plans.get(key)
        if cached is not None:
            return cached
        cfg = self.config
        mbs = cfg.mbs
        pbs = cfg.pbs
        lane_columns = 1
        rate_block = 1
        if kernel in ("preOrderPartials", "postOrderPartials", "gradient", "rescalePartials"):
            cbs = cfg.column_block_size(states)
            if states <= 4:
                lane_columns = cfg.columns_per_thread_nucleotide
            if states * cbs > MAX_THREADS_PER_BLOCK:
                raise ConfigurationError(
                    f"{kernel}: S_pad x CBS = {states} x {cbs} exceeds "
                    f"{MAX_THREADS_PER_BLOCK} threads per block"
                )
            n_cb = -(-patterns // cbs)
            block_shape = (states, cbs)
            if kernel == "gradient":
                grid = (branches, n_cb)
                rate_block = min(rates, states * cbs)
            elif kernel == "rescalePartials":
                grid = (n_cb,)
            else:
                grid = (rates, n_cb)
        elif kernel == "matrixTranspose":
            cbs = cfg.column_block_size(states)
            side = -(-states // mbs)
            grid = (side, side)
            block_shape = (mbs, mbs)
        elif kernel == "nodeSiteReduction":
            cbs = cfg.column_block_size(states) if states else 1
            grid = (branches, -(-patterns // kernels.REDUCTION_WIDTH))
            block_shape = (1, kernels.REDUCTION_WIDTH)
        else:
            raise ConfigurationError(f"unknown kernel {kernel!r}")
        staging = 8 * kernels.staging_doubles(
            kernel, states, block_shape[1] if kernel != "matrixTranspose" else cbs, pbs,
            mbs=mbs, rate_block=rate_block,
        )
        if staging > cfg.staging_budget:
            raise ConfigurationError(
                f"{kernel}: block stages {staging} bytes, over the "
                f"{cfg.staging_budget}-byte staging budget"
            )
        plan = ExecutionPlan(kernel, grid, block_shape, block_shape[1] if kernel != "matrixTranspose" else cbs,
                             pbs, mbs, staging, cfg.staging_budget, lane_columns)
        self._plans[key] = plan
        return plan

    # execution ------------------------------------------------------------

    def run_plan(self, plan: ExecutionPlan, fn, *args, scratch: bool = True):
        """Execute every block of ``plan`` exactly once via ``fn(lo, hi, *args[, scratch])``."""
        total = plan.block_count
        start = time.perf_counter_ns()
        if total:
            if self._pool is None or total == 1:
                if scratch:
                    fn(0, total, *args, self._arenas[0])
                else:
                    fn(0, total, *args)
            else:
                pieces = min(total, 4 * self._pool.size)
                edges = [total * k // pieces for k in range(pieces + 1)]
                tasks = [(edges[k], edges[k + 1]) for k in range(pieces) if edges[k] < edges[k + 1]]
                arenas = self._arenas

                if scratch:
                    def task(worker, lo, hi):
                        fn(lo, hi, *args, arenas[worker])
                else:
                    def task(worker, lo, hi):
                        fn(lo, hi, *args)

                self._pool.run(task, tasks)
        self.timings.add(plan.kernel, time.perf_counter_ns() - start)

    @contextmanager
    def timed(self, name):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.timings.add(name, time.perf_counter_ns() - start)

    # standalone operations ------------------------------------------------

    def transpose_all(self, matrices: TransitionMatrixSet) -> TransitionMatrixSet:
        """Transpose every padded matrix in one batched tile launch."""
        data = matrices.data
        b, r, s, _ = data.shape
        src = data.reshape(b * r, s, s)
        dst = np.zeros_like(src)
        plan = self.plan("matrixTranspose", states=s)
        self.run_plan(plan, self.kernels.transpose, plan.mbs, src, dst)
        out = dst.reshape(data.shape)
        out.flags.writeable = False
        return TransitionMatrixSet(out, matrices.state_count)

    def reduce_rows(self, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """``sum_c weights[c] * values[i, c]`` per row via fixed 128-wide trees."""
        values = np.ascontiguousarray(values, dtype=float)
        weights = np.ascontiguousarray(weights, dtype=float)
        rows, cols = values.shape
        plan = self.plan("nodeSiteReduction", patterns=cols, branches=rows)
        partial = np.zeros((rows, plan.grid[1]))
        self.run_plan(plan, self.kernels.reduce, kernels.REDUCTION_WIDTH, values, weights, partial)
        return pairwise_tree_sum(partial)

    def reduce_deterministic(self, values, block_size: int = kernels.REDUCTION_WIDTH) -> float:
        if block_size != kernels.REDUCTION_WIDTH:
            raise ConfigurationError(f"reduction blocks are fixed at {kernels.REDUCTION_WIDTH}")
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if values.size == 0:
            raise ValueError("need at least one value")
        return float(self.reduce_rows(values[None, :], np.ones(values.size))[0])


def pack_partials(values: np.ndarray, padded_count: int) -> np.ndarray:
    """Copy ``(..., C, S)`` partials into a contiguous, zero-padded ``(..., C, S_pad)`` slab."""
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape[:-1] + (padded_count,))
    out[..., : values.shape[-1]] = values
    return out


def unpack_partials(slab: np.ndarray, state_count: int) -> np.ndarray:
    return np.array(slab[..., :state_count])


def pairwise_tree_sum(partial: np.ndarray) -> np.ndarray:
    """Row sums by stride-halving over a zero-padded power-of-two width."""
    rows, width = partial.shape
    size = 1 << max(0, (width - 1).bit_length())
    buf = np.zeros((rows, size))
    buf[:, :width] = partial
    half = size // 2
    while half >= 1:
        buf[:, :half] = buf[:, :half] + buf[:, half : 2 * half]
        half //= 2
    return buf[:, 0].copy()


def default_workers() -> int:
    env = os.environ.get("PHYLOGRAD_WORKERS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigurationError(f"PHYLOGRAD_WORKERS must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigurationError("PHYLOGRAD_WORKERS must be >= 1")
        return value
    return os.cpu_count() or 1


def make_backend(kind="serial", workers=None, **overrides) -> Backend:
    workers = workers or (default_workers() if kind == "parallel" else 1)
    return Backend(BackendConfig(kind=kind, workers=workers, **overrides))
