"""Schedule-space generation: tuning points and candidate collection.

A tuning point is (dataflow, per-level memory shares, double-buffering
flag).  The generator iterates the full cartesian space of tuning points,
runs the exact solver on each, and collects the deduplicated candidate set.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

from .archspec import ArchSpec, OPERANDS
from .mapspace import Mapping, MemoryShares, mapping_sort_key
from .solver import solve


@dataclass(frozen=True)
class TuningPoint:
    dataflow: str
    shares: MemoryShares
    double_buffered: bool


@dataclass
class ScheduleCandidate:
    tuning: TuningPoint
    mapping: Mapping
    proxy_cost: int
    latency: object = None  # CostReport, filled by costmodel


@dataclass
class SpaceReport:
    candidates: list
    tuning_points: int
    feasible_points: int
    infeasible: list  # (TuningPoint, reason)
    axis_sizes: dict  # |dataflows|, per-level share rows, |db settings|


def share_grid(level, granularity: int):
    """Per-operand capacity fractions for one level on a 1/g grid.

    Every held operand gets a positive multiple of 1/g and the fractions sum
    to at most 1.  Rows are returned in deterministic lexicographic order.
    """
    held = [op for op in OPERANDS if op in level.operands_held]
    if not held:
        return [{}]
    g = granularity
    rows = []
    for combo in itertools.product(range(1, g + 1), repeat=len(held)):
        if sum(combo) <= g:
            rows.append({op: Fraction(n, g) for op, n in zip(held, combo)})
    return rows


def tuning_points(arch: ArchSpec, granularity: int):
    """All (dataflow, shares, db) combinations plus the axis sizes."""
    share_levels = [(idx, lv) for idx, lv in arch.on_chip_levels()
                    if not lv.is_pe_level]
    per_level_rows = [share_grid(lv, granularity) for _, lv in share_levels]
    db_settings = ([False, True] if arch.supports_double_buffering
                   else [False])
    points = []
    for df in arch.dataflows:
        for rows in itertools.product(*per_level_rows):
            shares = MemoryShares.from_dict(
                {lv.name: row for (_, lv), row in zip(share_levels, rows)})
            for db in db_settings:
                points.append(TuningPoint(df.name, shares, db))
    axis = {
        "dataflows": len(arch.dataflows),
        "share_rows": {lv.name: len(rows)
                       for (_, lv), rows in zip(share_levels, per_level_rows)},
        "db_settings": len(db_settings),
    }
    return points, axis


def generate_space(w, arch: ArchSpec, granularity: int = 4,
                   k_per_point: int = 3) -> SpaceReport:
    """Run the solver across every tuning point and collect candidates."""
    points, axis = tuning_points(arch, granularity)
    candidates = []
    infeasible = []
    feasible_points = 0
    seen = set()
    for point in points:
        df = arch.dataflow(point.dataflow)
        result = solve(w, arch, df, point.shares, point.double_buffered,
                       k=k_per_point)
        if not result.mappings:
            infeasible.append((point, result.infeasible_reason))
            continue
        feasible_points += 1
        for m, cost in zip(result.mappings, result.costs):
            key = (point, m.levels)
            if key in seen:
                continue
            seen.add(key)
            candidates.append(ScheduleCandidate(tuning=point, mapping=m,
                                                proxy_cost=cost))
    candidates.sort(key=lambda c: (c.proxy_cost, mapping_sort_key(c.mapping),
                                   c.tuning.dataflow, c.tuning.double_buffered,
                                   c.tuning.shares.entries))
    return SpaceReport(candidates=candidates, tuning_points=len(points),
                       feasible_points=feasible_points, infeasible=infeasible,
                       axis_sizes=axis)
