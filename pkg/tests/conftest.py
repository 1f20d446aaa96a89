"""Shared fixtures: small architectures, workload builders, and an
independent loop-nest traffic simulator used as the oracle for the
analytical traffic model."""

from __future__ import annotations

import itertools
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from gemmsched import GemmWorkload, load_arch, parse_arch
from gemmsched.archspec import DIMS, OPERAND_DIMS
from gemmsched.mapspace import ELEM_BYTES

REPO = Path(__file__).resolve().parent.parent
GEMMINI_YAML = REPO / "configs" / "gemmini16.yaml"


@pytest.fixture(scope="session")
def gemmini():
    return load_arch(GEMMINI_YAML)


def make_arch2(pe_dim=4, cap=2048, dataflows=None, db=True):
    """Two levels: a PE level that stages all operands, plus off-chip."""
    doc = {
        "name": "tiny2",
        "pe_dim": pe_dim,
        "double_buffering": db,
        "levels": [
            {"name": "pe", "pe_level": True, "capacity_bytes": cap,
             "bandwidth_bytes_per_cycle": 8, "dma_startup_cycles": 2,
             "operands": ["input", "weight", "output"]},
            {"name": "dram", "capacity_bytes": 0,
             "bandwidth_bytes_per_cycle": 4, "dma_startup_cycles": 20,
             "operands": ["input", "weight", "output"]},
        ],
        "dataflows": dataflows or [
            {"name": "flex", "stationary": "weight",
             "spatial": {"N": "free", "C": "free", "K": "free"}},
            {"name": "ws", "stationary": "weight",
             "spatial": {"N": "forbidden", "C": "forced", "K": "forced"}},
        ],
        "intrinsics": [
            {"id": "mm", "kind": "compute",
             "bounds": {"N": pe_dim, "C": pe_dim, "K": pe_dim},
             "accumulate": True,
             "cost": {"fixed_cycles": 4, "per_element_cycles": 1}},
            {"id": "ld_in", "kind": "memory", "direction": "load",
             "operand": "input", "src": "dram", "dst": "pe"},
            {"id": "ld_w", "kind": "memory", "direction": "load",
             "operand": "weight", "src": "dram", "dst": "pe"},
            {"id": "ld_out", "kind": "memory", "direction": "load",
             "operand": "output", "src": "dram", "dst": "pe"},
            {"id": "st_out", "kind": "memory", "direction": "store",
             "operand": "output", "src": "pe", "dst": "dram"},
        ],
    }
    return parse_arch(doc)


def arch3_doc(pe_dim=4, cap=4096, db=True, dataflows=None):
    """Raw YAML-shaped document for the three-level test architecture."""
    return {
        "name": "tiny3",
        "pe_dim": pe_dim,
        "double_buffering": db,
        "levels": [
            {"name": "pe", "pe_level": True, "capacity_bytes": 64,
             "bandwidth_bytes_per_cycle": 16, "dma_startup_cycles": 0,
             "operands": []},
            {"name": "buf", "capacity_bytes": cap,
             "bandwidth_bytes_per_cycle": 8, "dma_startup_cycles": 5,
             "operands": ["input", "weight", "output"]},
            {"name": "dram", "capacity_bytes": 0,
             "bandwidth_bytes_per_cycle": 4, "dma_startup_cycles": 50,
             "operands": ["input", "weight", "output"]},
        ],
        "dataflows": dataflows or [
            {"name": "flex", "stationary": "weight",
             "spatial": {"N": "free", "C": "free", "K": "free"}},
            {"name": "os", "stationary": "output",
             "spatial": {"N": "forced", "C": "forbidden", "K": "forced"}},
        ],
        "intrinsics": [
            {"id": "mm", "kind": "compute",
             "bounds": {"N": pe_dim, "C": pe_dim, "K": pe_dim},
             "accumulate": True,
             "cost": {"fixed_cycles": 2, "per_element_cycles": 1}},
            {"id": "ld_in", "kind": "memory", "direction": "load",
             "operand": "input", "src": "dram", "dst": "buf"},
            {"id": "ld_w", "kind": "memory", "direction": "load",
             "operand": "weight", "src": "dram", "dst": "buf"},
            {"id": "ld_out", "kind": "memory", "direction": "load",
             "operand": "output", "src": "dram", "dst": "buf"},
            {"id": "st_out", "kind": "memory", "direction": "store",
             "operand": "output", "src": "buf", "dst": "dram"},
        ],
    }


def make_arch3(pe_dim=4, cap=4096, db=True, dataflows=None):
    """Three levels: bare PE array, one shared buffer, off-chip."""
    return parse_arch(arch3_doc(pe_dim, cap, db, dataflows))


def make_workload(n, c, k, seed=0, scale=Fraction(1, 4)):
    rng = np.random.default_rng(seed)
    return GemmWorkload(
        N=n, C=c, K=k,
        weight=rng.integers(-128, 128, size=(c, k), dtype=np.int8),
        bias=rng.integers(-200, 201, size=(k,)).astype(np.int32),
        output_scale=scale)


def random_input(w, seed=1):
    rng = np.random.default_rng(seed)
    return rng.integers(-128, 128, size=(w.N, w.C), dtype=np.int8)


# ---------------------------------------------------------------------------
# loop-nest traffic simulator (independent oracle for the reuse model)


def simulate_traffic(m, w, arch):
    """Simulate the single-resident-tile reuse model by brute force.

    Walks the full temporal iteration space above the PE level in nest
    order and counts a tile (re)fetch whenever the relevant loop coordinate
    of a held operand changes.  Returns the same nesting as
    traffic_breakdown: {level: {operand: {loads|stores: bytes}}}.
    """
    loops = []  # (dim, extent, level_index), outermost first
    for li in range(len(arch.levels) - 1, 0, -1):
        lf = m.levels[li]
        for dim in lf.order:
            e = lf.temporal_of(dim)
            if e > 1:
                loops.append((dim, e, li))

    bounds = m.total_bounds()
    out = {}
    inner_out = arch.holding_levels("output")[0]
    for idx, lv in arch.on_chip_levels():
        entry = {}
        tile = m.cumulative_tile(idx)
        for operand in lv.operands_held:
            d0, d1 = OPERAND_DIMS[operand]
            tile_bytes = tile[d0] * tile[d1] * ELEM_BYTES[operand]
            tile_elems = tile[d0] * tile[d1]
            relevant = set(OPERAND_DIMS[operand])
            positions = [i for i, (dim, _, li) in enumerate(loops)
                         if li > idx and dim in relevant]
            fetches = 0
            seen = set()
            resident = object()
            for combo in itertools.product(
                    *[range(e) for _, e, _ in loops]):
                coord = tuple(combo[i] for i in positions)
                if coord != resident:
                    fetches += 1
                    resident = coord
                seen.add(coord)
            if not loops:
                fetches, seen = 1, {()}
            if operand != "output":
                entry[operand] = {"loads": tile_bytes * fetches}
            elif idx != inner_out:
                entry[operand] = {"stores": bounds["N"] * bounds["K"]}
            else:
                distinct = len(seen)
                partials = fetches - distinct
                entry[operand] = {
                    "stores": distinct * tile_elems * 1
                    + partials * tile_elems * ELEM_BYTES["output"],
                    "loads": partials * tile_elems * ELEM_BYTES["output"],
                }
        out[lv.name] = entry
    return out
