"""Analytical latency estimation and candidate ranking.

The estimator is the desk-scale stand-in for profiling schedules on real
hardware: transfer time per level from the traffic model and the level's
DMA parameters, compute time from the compute intrinsic's cost parameters,
composed bottom-up with a steady-state max() overlap when double buffering
is on (one pipeline-fill term, no drain term).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .archspec import ArchSpec, DIMS
from .mapspace import Mapping
from .solver import traffic_breakdown


@dataclass
class CostReport:
    total_cycles: Fraction
    compute_cycles: Fraction
    pe_utilization: Fraction
    traffic_bytes: dict  # level name -> total bytes moved at that boundary
    transfer_cycles: dict  # source level name -> per-trip transfer cycles
    trip_counts: dict  # level name -> temporal trips at that level

    def as_dict(self):
        return {
            "total_cycles": float(self.total_cycles),
            "compute_cycles": float(self.compute_cycles),
            "pe_utilization": float(self.pe_utilization),
            "traffic_bytes": dict(self.traffic_bytes),
            "transfer_cycles": {k: float(v)
                                for k, v in self.transfer_cycles.items()},
            "trip_counts": dict(self.trip_counts),
        }


def _compute_call_cycles(m: Mapping, w, arch: ArchSpec) -> Fraction:
    """Latency of one tensorized compute call over the PE-level tile."""
    pe = m.levels[arch.pe_level_index]
    tile_macs = 1
    parallelism = 1
    for d in DIMS:
        tile_macs *= pe.product_of(d)
        parallelism *= pe.spatial_of(d)
    intr = _pick_compute_intrinsic(arch)
    steps = -(-tile_macs // parallelism)  # ceil
    fixed = intr.fixed_cycles if intr is not None else 0
    per = intr.per_element_cycles if intr is not None else Fraction(1)
    return Fraction(fixed) + per * steps


def _pick_compute_intrinsic(arch: ArchSpec):
    computes = arch.compute_intrinsics()
    return computes[0] if computes else None


def _transfer_sources(m: Mapping, w, arch: ArchSpec):
    """Bytes attributed to each outer (source) level of the hierarchy."""
    breakdown = traffic_breakdown(m, w, arch)
    sourced = {lv.name: 0 for lv in arch.levels}
    for level_name, entry in breakdown.items():
        dst = arch.level_index(level_name)
        for operand, rec in entry.items():
            outer = _next_outer_holding(arch, operand, dst)
            sourced[arch.levels[outer].name] += sum(rec.values())
    return sourced, breakdown


def _next_outer_holding(arch: ArchSpec, operand: str, level_index: int) -> int:
    for li in range(level_index + 1, len(arch.levels)):
        if arch.holds(li, operand):
            return li
    return len(arch.levels) - 1


def estimate_latency(candidate, w, arch: ArchSpec) -> CostReport:
    """Fill a CostReport for a feasible ScheduleCandidate (or bare Mapping)."""
    m = candidate.mapping if hasattr(candidate, "mapping") else candidate
    sourced, breakdown = _transfer_sources(m, w, arch)

    n_levels = len(arch.levels)
    trips = {}
    for li in range(n_levels):
        lf = m.levels[li]
        t = 1
        for d in DIMS:
            t *= lf.temporal_of(d)
        trips[li] = t

    # trips crossing the boundary sourced at level li
    crossing = {}
    acc = 1
    for li in range(n_levels - 1, -1, -1):
        acc *= trips[li]
        crossing[li] = acc  # iterations of loops at levels >= li

    # PE-level temporal loops run inside the compute intrinsic; calls are
    # counted over the loops of the outer levels only.
    t_call = _compute_call_cycles(m, w, arch)
    total_calls = crossing[1] if n_levels > 1 else 1
    compute_cycles = t_call * total_calls

    transfer_cycles = {}
    level_latency = t_call
    for li in range(1, n_levels):
        lv = arch.levels[li]
        bytes_src = sourced[lv.name]
        if bytes_src:
            avg_bytes = Fraction(bytes_src, crossing[li])
            t_xfer = (Fraction(lv.dma_startup_cycles)
                      + avg_bytes / lv.bandwidth_bytes_per_cycle)
        else:
            t_xfer = Fraction(0)
        transfer_cycles[lv.name] = t_xfer
        if m.double_buffered:
            # pipelined: fill with the first transfer, drain with the last
            # inner phase, steady state bounded by the slower of the two
            level_latency = (t_xfer
                             + (trips[li] - 1) * max(t_xfer, level_latency)
                             + level_latency)
        else:
            level_latency = trips[li] * (t_xfer + level_latency)

    macs = w.macs
    lower_bound = Fraction(macs, arch.pe_dim ** 2)
    utilization = (lower_bound / compute_cycles if compute_cycles
                   else Fraction(1))
    traffic_totals = {
        level: sum(sum(rec.values()) for rec in entry.values())
        for level, entry in breakdown.items() if entry
    }
    return CostReport(total_cycles=level_latency,
                      compute_cycles=compute_cycles,
                      pe_utilization=utilization,
                      traffic_bytes=traffic_totals,
                      transfer_cycles=transfer_cycles,
                      trip_counts={arch.levels[li].name: trips[li]
                                   for li in range(n_levels)})


def rank_candidates(candidates, w, arch: ArchSpec):
    """Stable ascending sort by modeled cycles, then proxy cost, then key."""
    from .mapspace import mapping_sort_key

    def key(c):
        report = c.latency if getattr(c, "latency", None) is not None \
            else estimate_latency(c, w, arch)
        return (report.total_cycles, c.proxy_cost, mapping_sort_key(c.mapping))

    return sorted(candidates, key=key)
