"""``phylograd`` command line: loglik, gradient, bench, hmc, simulate.

Exit codes: 0 success, 2 invalid input or configuration, 3 zero likelihood
(impossible data), 4 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import bench, kernels
from .alignment import compress_patterns, parse_fasta, to_fasta
from .backend import Backend, BackendConfig, default_workers
from .config import load_model_config
from .core import (LikelihoodEngine, finite_difference_gradient, impossible_patterns,
                   gradient_scale, oracle_gradient_quadratic, relative_deviation)
from .errors import ImpossiblePatternError, PhylogradError, ValidationError
from .hmc import HmcConfig, hmc_sample
from .simulate import make_fixture
from .tree import parse_newick

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("phylograd")


class Degenerate(Exception):
    """Numerical degeneracy (zero likelihood); maps to exit code 3."""


def _read(path):
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None


def _emit(text, path):
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _backend_config(args) -> BackendConfig:
    workers = args.workers
    if workers is None:
        workers = default_workers() if args.backend == "parallel" else 1
    kw = {}
    if args.pbs is not None:
        kw["pbs"] = args.pbs
    return BackendConfig(kind=args.backend, workers=workers, cbs=args.cbs,
                         kernels=args.kernels, **kw)


def _load_inputs(args):
    if not args.tree or not args.alignment:
        raise ValidationError("--tree and --alignment are required")
    tree_text = _read(args.tree)
    aln_text = _read(args.alignment)
    cfg_text = _read(args.model_config) if args.model_config else ""
    spec = load_model_config(args.model_config)
    alphabet = args.alphabet or ("codon" if spec.alphabet == "codon" else "nuc")
    tree = parse_newick(tree_text)
    raw = parse_fasta(aln_text, alphabet=alphabet, code=spec.genetic_code)
    if raw.state_count != spec.model.state_count:
        raise ValidationError(
            f"alignment alphabet has {raw.state_count} states but the model has "
            f"{spec.model.state_count}; check --alphabet and the model configuration"
        )
    digest = hashlib.sha256()
    for part in (tree_text, aln_text, cfg_text, alphabet):
        digest.update(part.encode("utf-8"))
        digest.update(b"\0")
    return tree, spec.model, compress_patterns(raw), digest.hexdigest()


def _report(command, digest, config, start_ns, **fields):
    out = {"schemaVersion": SCHEMA_VERSION, "command": command, "inputsDigest": digest}
    out.update(fields)
    out["backend"] = config.to_dict()
    out["wallTimeNs"] = time.perf_counter_ns() - start_ns
    return out


def _degenerate(engine):
    bad = impossible_patterns(engine.buffers)
    return Degenerate(f"zero likelihood for site pattern(s) {bad[:10]} (0-based pattern indices)")


def cmd_loglik(args):
    start = time.perf_counter_ns()
    tree, model, data, digest = _load_inputs(args)
    config = _backend_config(args)
    with Backend(config) as backend:
        engine = LikelihoodEngine(tree, model, data, backend, rescale=not args.no_rescale)
        loglik = engine.log_likelihood()
        if not np.isfinite(loglik):
            raise _degenerate(engine)
        report = _report("loglik", digest, config, start, logLikelihood=loglik,
                         tipCount=tree.tip_count, patternCount=data.pattern_count,
                         kernelTimings=backend.timings.rows())
    _emit(json.dumps(report, indent=2), args.out)
    return EXIT_OK


def _parse_branch_set(text, tree):
    names = {n: k for k, n in enumerate(tree.names)}
    branches = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        for token in line.replace(",", " ").split():
            if token in names:
                branches.append(names[token])
                continue
            try:
                k = int(token)
            except ValueError:
                raise ValidationError(f"branch set: {token!r} is neither a branch number nor a tip") from None
            if not 1 <= k <= tree.branch_count:
                raise ValidationError(f"branch set: branch {k} outside 1..{tree.branch_count}")
            branches.append(k - 1)
    if not branches:
        raise ValidationError("branch set is empty")
    return branches


def cmd_gradient(args):
    start = time.perf_counter_ns()
    tree, model, data, digest = _load_inputs(args)
    config = _backend_config(args)
    with Backend(config) as backend:
        engine = LikelihoodEngine(tree, model, data, backend, rescale=not args.no_rescale)
        try:
            grad = engine.gradient()
        except ImpossiblePatternError:
            raise _degenerate(engine) from None
        fields = grad.to_dict()
        fields["tipCount"] = tree.tip_count
        fields["patternCount"] = data.pattern_count
        if args.check:
            checks = {}
            scale = gradient_scale(model, data.weights)
            if args.check in ("fd", "both"):
                fd = finite_difference_gradient(tree, model, data, h=args.fd_step)
                checks["fd"] = {"step": args.fd_step,
                                "maxRelativeDeviation": relative_deviation(grad.per_branch, fd, scale)}
            if args.check in ("quadratic", "both"):
                quad = oracle_gradient_quadratic(tree, model, data)
                checks["quadratic"] = {
                    "maxRelativeDeviation": relative_deviation(grad.per_branch, quad, scale)}
            fields["checks"] = checks
        if args.branch_set:
            branches = _parse_branch_set(_read(args.branch_set), tree)
            fields["branchSet"] = {"branches": [b + 1 for b in branches],
                                   "gradient": grad.branch_set(branches)}
        if args.timings_json:
            _emit(backend.timings.to_json(), args.timings_json)
    _emit(json.dumps(_report("gradient", digest, config, start, **fields), indent=2), args.out)
    return EXIT_OK


def cmd_bench(args):
    which = args.sweep
    measurements = []
    summary = {"schemaVersion": SCHEMA_VERSION, "command": "bench", "sweep": which}
    config = _backend_config(args)
    if which in ("tips", "all"):
        res = bench.tips_sweep(tips=args.tips, patterns=args.patterns or 1000, states=args.states,
                               seed=args.seed, config=config, oracle=not args.no_oracle,
                               iterations=args.iterations)
        measurements += res["measurements"]
        summary["tips"] = {
            "N": list(args.tips),
            "gradientSeconds": [m.seconds for m in res["measurements"]],
            "gradientExponent": res["gradientExponent"],
        }
        if "oracleExponent" in res:
            summary["tips"]["oracleSeconds"] = res["oracleSeconds"]
            summary["tips"]["oracleExponent"] = res["oracleExponent"]
    if which in ("columns", "all"):
        cfg = config if args.backend == "parallel" else BackendConfig(
            kind="parallel", workers=default_workers(), cbs=args.cbs, kernels=args.kernels)
        res = bench.columns_sweep(patterns=args.columns, states=args.states_columns,
                                  tips=args.column_tips, seed=args.seed, config=cfg,
                                  iterations=args.iterations)
        measurements += res["measurements"]
        summary["columns"] = {"C": list(args.columns), "perColumnThroughput": res["throughput"]}
    if which in ("workers", "all"):
        res = bench.workers_sweep(workers=args.worker_counts, states=args.states_columns,
                                  tips=args.column_tips, patterns=args.patterns or 1024,
                                  seed=args.seed, iterations=args.iterations)
        measurements += [res["serial"]] + res["measurements"]
        summary["workers"] = {"workers": list(args.worker_counts), "speedup": res["speedup"],
                              "cpuCount": os.cpu_count()}
    if which in ("implementations", "all"):
        res = bench.implementation_sweep(seed=args.seed, iterations=args.iterations)
        measurements += res["measurements"]
        summary["implementations"] = {m.implementation: m.seconds for m in res["measurements"]}
    if which == "single":
        model = bench.bench_model(args.states)
        tree, raw = bench.fixture_with_patterns(args.tips[0], args.patterns or 1000, model, args.seed)
        measurements.append(bench.measure_gradient(tree, model, raw, config, args.iterations))
    _emit(bench.to_csv(measurements), args.out)
    if args.summary:
        _emit(json.dumps(summary, indent=2), args.summary)
    if args.timings_json:
        merged = bench.KernelTimings()
        for m in measurements:
            merged.merge(m.timings)
        _emit(merged.to_json(), args.timings_json)
    return EXIT_OK


def cmd_hmc(args):
    tree, model, data, digest = _load_inputs(args)
    config = HmcConfig(step_size=args.step_size, leapfrog_steps=args.leapfrog_steps,
                       iterations=args.iterations, warmup=args.warmup, seed=args.seed,
                       parameterization=args.parameterization,
                       target_accept=args.target_accept)
    with Backend(_backend_config(args)) as backend:
        result = hmc_sample(tree, model, data, config, backend)
    _emit(result.chain_tsv(), args.out)
    diag = result.diagnostics()
    diag["schemaVersion"] = SCHEMA_VERSION
    diag["inputsDigest"] = digest
    if args.diagnostics:
        _emit(json.dumps(diag, indent=2), args.diagnostics)
    else:
        sys.stderr.write(json.dumps(diag, indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args):
    spec = load_model_config(args.model_config)
    if spec.alphabet not in ("nuc", "codon"):
        raise ValidationError("simulation needs a nucleotide or codon model")
    tree, raw = make_fixture(args.tips, args.sites, spec.model, args.seed, args.mean_length,
                             alphabet=spec.alphabet)
    if spec.alphabet == "codon":
        raw = type(raw)(raw.names, raw.codes, raw.masks, raw.state_count, "codon",
                        spec.genetic_code)
    _emit(tree.to_newick() + "\n", args.tree_out)
    _emit(to_fasta(raw), args.out)
    return EXIT_OK


def _ints(text):
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tree", help="Newick file ('-' for stdin)")
    common.add_argument("--alignment", help="aligned FASTA file ('-' for stdin)")
    common.add_argument("--alphabet", choices=("nuc", "codon"),
                        help="default: codon for codon models, else nuc")
    common.add_argument("--model-config", help="model JSON (default: Jukes-Cantor)")
    common.add_argument("--backend", choices=("serial", "parallel"), default="serial")
    common.add_argument("--workers", type=_positive_int,
                        help="parallel worker count (default: $PHYLOGRAD_WORKERS or CPU count)")
    common.add_argument("--cbs", type=_positive_int, help="column block size override")
    common.add_argument("--pbs", type=_positive_int, help="peeling block size override")
    common.add_argument("--kernels", choices=sorted(kernels.IMPLEMENTATIONS),
                        help=f"kernel implementation (default: {kernels.DEFAULT})")
    common.add_argument("--no-rescale", action="store_true", help="disable partial rescaling")
    common.add_argument("--seed", type=_seed, default=1)
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--timings-json", help="write the per-kernel timing table as JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="phylograd",
                                     description="Phylogenetic likelihoods and branch-length gradients")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loglik", parents=[common], help="log likelihood")
    p.set_defaults(func=cmd_loglik)

    p = sub.add_parser("gradient", parents=[common], help="gradient wrt all branch lengths")
    p.add_argument("--check", choices=("fd", "quadratic", "both"),
                   help="compare against finite differences and/or the quadratic oracle")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--branch-set", help="file listing branch numbers or tip names to aggregate")
    p.set_defaults(func=cmd_gradient)

    p = sub.add_parser("bench", parents=[common], help="benchmark sweeps (CSV)")
    p.add_argument("--sweep", choices=("tips", "columns", "workers", "implementations", "all",
                                       "single"), default="tips")
    p.add_argument("--tips", type=_ints, default=[16, 32, 64, 128])
    p.add_argument("--patterns", type=_positive_int)
    p.add_argument("--states", type=int, choices=(4, 61), default=4)
    p.add_argument("--columns", type=_ints, default=[1, 64, 256, 1024, 2048])
    p.add_argument("--states-columns", type=int, choices=(4, 61), default=61)
    p.add_argument("--column-tips", type=_positive_int, default=62)
    p.add_argument("--worker-counts", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--iterations", type=_positive_int, default=bench.ITERATIONS)
    p.add_argument("--no-oracle", action="store_true", help="skip the quadratic oracle timings")
    p.add_argument("--summary", help="write fitted exponents and throughputs as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("hmc", parents=[common], help="HMC over branch parameters (TSV chain)")
    p.add_argument("--iterations", type=_positive_int, default=1000)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--leapfrog-steps", type=_positive_int, default=10)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--parameterization", choices=("branch_lengths", "rate_scalars"),
                   default="branch_lengths")
    p.add_argument("--diagnostics", help="diagnostics JSON file (default: stderr)", default=None)
    p.set_defaults(func=cmd_hmc)

    p = sub.add_parser("simulate", parents=[common], help="seeded random tree and alignment")
    p.add_argument("--tips", type=_positive_int, default=8)
    p.add_argument("--sites", type=_positive_int, default=500)
    p.add_argument("--mean-length", type=float, default=0.1)
    p.add_argument("--tree-out", required=True, help="Newick output file")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Degenerate as exc:
        print(f"phylograd: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ImpossiblePatternError as exc:
        print(f"phylograd: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (PhylogradError, ValueError) as exc:
        print(f"phylograd: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"phylograd: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
