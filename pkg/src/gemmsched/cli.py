"""Command-line driver.

Subcommands:
  validate  parse an accelerator (and optionally a workload) and report
            diagnostics
  schedule  solve one tuning point and emit the best mapping file
  explore   sweep the tuning space, rank candidates, emit a report
  run       lower a mapping, execute it, and check bit-exactness against
            the reference interpreter

Exit codes: 0 success, 1 domain failure (validation error, infeasible
point, output mismatch), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
import time
from fractions import Fraction

import numpy as np
import yaml

from .archspec import ArchError, load_arch
from .costmodel import estimate_latency, rank_candidates
from .lowering import (InterpreterError, LoweringError, emit_trace, interpret,
                       lower_mapping, tensorize)
from .mapspace import (MemoryShares, dump_mapping, even_shares, feasible,
                       load_mapping, mapping_to_dict)
from .solver import solve
from .spacegen import generate_space
from .workload import (WorkloadError, constant_fold_preprocessing,
                       graph_to_workload, legalize_fuse, load_workload,
                       reference_execute)

DEFAULT_SEED = 2024


class _CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_arch(path):
    try:
        return load_arch(path)
    except OSError as exc:
        raise _CliError(f"cannot read architecture file: {exc}", 2)
    except ArchError as exc:
        lines = "\n".join(str(d) for d in exc.diagnostics)
        raise _CliError(f"invalid architecture:\n{lines}", 1)


def _load_workload(path):
    """Parse, fold constant preprocessing, fuse, and unify to a GEMM."""
    try:
        graph = load_workload(path)
    except OSError as exc:
        raise _CliError(f"cannot read workload file: {exc}", 2)
    except (WorkloadError, KeyError, TypeError) as exc:
        raise _CliError(f"invalid workload: {exc}", 1)
    try:
        graph = constant_fold_preprocessing(graph)
        graph, diags = legalize_fuse(graph)
        for d in diags:
            print(d, file=sys.stderr)
        w, in_name, desc = graph_to_workload(graph)
    except WorkloadError as exc:
        raise _CliError(f"cannot unify workload to a GEMM: {exc}", 1)
    return graph, w, in_name, desc


def _parse_shares(items, arch):
    if not items:
        return even_shares(arch)
    d = even_shares(arch).as_dict()
    for item in items:
        try:
            key, frac = item.split("=", 1)
            level, operand = key.split(".", 1)
            d.setdefault(level, {})[operand] = Fraction(frac)
        except (ValueError, ZeroDivisionError):
            raise _CliError(
                f"bad --shares entry {item!r} (want LEVEL.OPERAND=FRACTION)", 2)
        if level not in {lv.name for lv in arch.levels}:
            raise _CliError(f"--shares references unknown level {level!r}", 2)
    return MemoryShares.from_dict(d)


def _make_input(spec, shape, seed):
    if spec.startswith("seed:"):
        rng = np.random.default_rng(int(spec.split(":", 1)[1]))
        return rng.integers(-128, 128, size=shape, dtype=np.int8)
    if spec == "seed":
        rng = np.random.default_rng(seed)
        return rng.integers(-128, 128, size=shape, dtype=np.int8)
    try:
        if spec.endswith(".npy"):
            return np.load(spec).astype(np.int8).reshape(shape)
        with open(spec, "r", encoding="utf-8") as fh:
            return np.asarray(yaml.safe_load(fh.read()),
                              dtype=np.int8).reshape(shape)
    except OSError as exc:
        raise _CliError(f"cannot read input: {exc}", 2)
    except ValueError as exc:
        raise _CliError(f"bad input data: {exc}", 1)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args):
    arch = _load_arch(args.arch)
    print(f"architecture {arch.name!r}: OK "
          f"({len(arch.levels)} levels, {len(arch.dataflows)} dataflows)")
    if args.workload:
        _, w, _, desc = _load_workload(args.workload)
        kind = "conv (im2col)" if desc is not None else "dense"
        print(f"workload: OK ({kind}, N={w.N} C={w.C} K={w.K})")
    return 0


def _solve_point(args, arch, w):
    df_name = args.dataflow or arch.dataflows[0].name
    try:
        df = arch.dataflow(df_name)
    except KeyError:
        raise _CliError(f"unknown dataflow {df_name!r} "
                        f"(have {[d.name for d in arch.dataflows]})", 2)
    shares = _parse_shares(args.shares, arch)
    db = bool(args.double_buffer) and arch.supports_double_buffering
    result = solve(w, arch, df, shares, db, k=args.top)
    if not result.mappings:
        raise _CliError(f"no feasible mapping: {result.infeasible_reason}", 1)
    return result, shares


def _cmd_schedule(args):
    arch = _load_arch(args.arch)
    _, w, _, _ = _load_workload(args.workload)
    result, _ = _solve_point(args, arch, w)
    best, cost = result.mappings[0], result.costs[0]
    report = estimate_latency(best, w, arch)
    text = dump_mapping(best)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"proxy traffic: {cost} bytes; modeled latency: "
          f"{float(report.total_cycles):.1f} cycles; "
          f"pe utilization: {float(report.pe_utilization):.3f}",
          file=sys.stderr)
    return 0


def _cmd_explore(args):
    arch = _load_arch(args.arch)
    _, w, _, _ = _load_workload(args.workload)
    t0 = time.perf_counter()
    space = generate_space(w, arch, granularity=args.granularity,
                           k_per_point=args.k_per_point)
    ranked = rank_candidates(space.candidates, w, arch)
    elapsed = time.perf_counter() - t0
    top = ranked[:args.top]
    doc = {
        "arch": arch.name,
        "workload": {"N": w.N, "C": w.C, "K": w.K},
        "space": {
            "tuning_points": space.tuning_points,
            "feasible_points": space.feasible_points,
            "candidates": len(space.candidates),
            "axes": space.axis_sizes,
        },
        "ranking": [
            {
                "rank": i + 1,
                "dataflow": c.tuning.dataflow,
                "double_buffered": c.tuning.double_buffered,
                "shares": {level: {op: str(frac) for op, frac in row}
                           for level, row in c.tuning.shares.entries},
                "proxy_traffic_bytes": c.proxy_cost,
                "modeled_cycles": float(estimate_latency(c, w, arch)
                                        .total_cycles),
                "mapping": mapping_to_dict(c.mapping),
            }
            for i, c in enumerate(top)
        ],
    }
    text = yaml.safe_dump(doc, sort_keys=False)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"explored {space.tuning_points} tuning points "
          f"({space.feasible_points} feasible, {len(space.candidates)} "
          f"candidates) in {elapsed:.2f}s", file=sys.stderr)
    if not top:
        raise _CliError("no feasible schedule in the tuning space", 1)
    return 0


def _cmd_run(args):
    arch = _load_arch(args.arch)
    graph, w, in_name, desc = _load_workload(args.workload)
    if args.mapping:
        try:
            m = load_mapping(args.mapping, arch)
        except OSError as exc:
            raise _CliError(f"cannot read mapping: {exc}", 2)
        if m.dataflow not in {d.name for d in arch.dataflows}:
            raise _CliError(f"mapping names unknown dataflow {m.dataflow!r}", 1)
        if not feasible(m, arch, w):
            raise _CliError("mapping is infeasible for this architecture "
                            "and workload", 1)
    else:
        result, _ = _solve_point(args, arch, w)
        m = result.mappings[0]
    try:
        program = tensorize(lower_mapping(m, w, arch), arch)
    except LoweringError as exc:
        raise _CliError(f"lowering failed: {exc}", 1)

    shape = next(s for n, s, _ in graph.inputs if n == in_name)
    raw = _make_input(args.input, tuple(shape), args.seed)
    gemm_input = desc.materialize(raw) if desc is not None else raw

    if args.emit_trace:
        with open(args.emit_trace, "w", encoding="utf-8") as fh:
            fh.write(emit_trace(program))
    try:
        got = interpret(program, gemm_input)
    except InterpreterError as exc:
        raise _CliError(f"execution failed: {exc}", 1)
    want = reference_execute(w, gemm_input)
    if np.array_equal(got, want):
        print(f"PASS ({w.N}x{w.K} outputs bit-identical to the reference)")
        return 0
    bad = np.argwhere(got != want)
    print(f"FAIL ({bad.shape[0]}/{got.size} outputs differ; first mismatch "
          f"at {tuple(int(i) for i in bad[0])})")
    return 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="gemmsched",
        description="mapping compiler for GEMM-based accelerators")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workload_required=True):
        sp.add_argument("--arch", required=True, help="architecture YAML")
        sp.add_argument("--workload", required=workload_required,
                        help="workload YAML")

    sp = sub.add_parser("validate", help="check an architecture / workload")
    common(sp, workload_required=False)
    sp.set_defaults(func=_cmd_validate)

    def tuning(sp):
        sp.add_argument("--dataflow", help="dataflow name (default: first)")
        sp.add_argument("--shares", action="append", default=[],
                        metavar="LEVEL.OPERAND=FRACTION",
                        help="memory share override (repeatable)")
        sp.add_argument("--double-buffer", action="store_true",
                        help="enable double buffering")

    sp = sub.add_parser("schedule", help="solve one tuning point")
    common(sp)
    tuning(sp)
    sp.add_argument("--top", type=int, default=1, help="mappings to keep")
    sp.add_argument("-o", "--output", help="mapping file (default stdout)")
    sp.set_defaults(func=_cmd_schedule)

    sp = sub.add_parser("explore", help="sweep the tuning space")
    common(sp)
    sp.add_argument("--granularity", type=int, default=4,
                    help="share grid granularity (fractions of 1/g)")
    sp.add_argument("--k-per-point", type=int, default=3,
                    help="mappings kept per tuning point")
    sp.add_argument("--top", type=int, default=10,
                    help="candidates in the report")
    sp.add_argument("-o", "--output", help="report file (default stdout)")
    sp.set_defaults(func=_cmd_explore)

    sp = sub.add_parser("run", help="lower, execute, and verify a schedule")
    common(sp)
    tuning(sp)
    sp.add_argument("--top", type=int, default=1, help=argparse.SUPPRESS)
    sp.add_argument("--mapping", help="use this mapping file instead of "
                                      "solving")
    sp.add_argument("--input", default="seed",
                    help="'seed', 'seed:N', a .npy file, or a YAML array")
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED,
                    help="RNG seed for generated inputs")
    sp.add_argument("--emit-trace", metavar="PATH",
                    help="write the intrinsic trace to PATH")
    sp.set_defaults(func=_cmd_run)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
