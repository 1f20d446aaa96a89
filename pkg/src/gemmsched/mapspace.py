"""Mapping representation and feasibility predicates.

A mapping assigns every prime factor of the GEMM loop bounds (N, C, K) to a
(memory level, spatial|temporal) slot and fixes a temporal loop order per
level.  Feasibility is three independent predicates: the PE-array bound
(product form, exact integer arithmetic), per-operand capacity with memory
shares and the double-buffering halving rule, and the dataflow / constraint
checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import yaml

from .archspec import (DIMS, OPERANDS, OPERAND_DIMS, ArchSpec, DataflowSpec,
                       MemoryLevel)

ELEM_BYTES = {"input": 1, "weight": 1, "output": 4}


def factorize(bound: int):
    """Sorted prime multiset of ``bound``; factorize(1) == []."""
    if bound < 1:
        raise ValueError("bound must be >= 1")
    factors = []
    n = bound
    p = 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1 if p == 2 else 2
    if n > 1:
        factors.append(n)
    return factors


@dataclass(frozen=True)
class MemoryShares:
    """Per-level, per-operand capacity fractions (uneven mapping)."""

    entries: tuple = ()  # ((level_name, ((operand, Fraction), ...)), ...)

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryShares":
        entries = []
        for level in sorted(d):
            row = tuple((op, Fraction(d[level][op])) for op in OPERANDS
                        if op in d[level])
            entries.append((level, row))
        return cls(tuple(entries))

    def as_dict(self):
        return {level: dict(row) for level, row in self.entries}

    def get(self, level: str, operand: str) -> Fraction:
        for lv, row in self.entries:
            if lv == level:
                for op, frac in row:
                    if op == operand:
                        return frac
        return Fraction(1)


def even_shares(arch: ArchSpec) -> MemoryShares:
    """Equal split over the operands held at each non-PE on-chip level."""
    d = {}
    for idx, lv in arch.on_chip_levels():
        if lv.is_pe_level or not lv.operands_held:
            continue
        frac = Fraction(1, len(lv.operands_held))
        d[lv.name] = {op: frac for op in lv.operands_held}
    return MemoryShares.from_dict(d)


@dataclass(frozen=True)
class LevelFactors:
    level: str
    spatial: tuple  # (N, C, K) factors
    temporal: tuple
    order: tuple = DIMS  # temporal loop order, outermost first

    def spatial_of(self, dim):
        return self.spatial[DIMS.index(dim)]

    def temporal_of(self, dim):
        return self.temporal[DIMS.index(dim)]

    def product_of(self, dim):
        i = DIMS.index(dim)
        return self.spatial[i] * self.temporal[i]


@dataclass(frozen=True)
class Mapping:
    levels: tuple  # LevelFactors, innermost first, aligned with arch.levels
    dataflow: str
    double_buffered: bool
    shares: MemoryShares

    def cumulative_tile(self, level_index: int):
        """Tile dims covered at and below a level (rectangular model)."""
        tile = {d: 1 for d in DIMS}
        for lf in self.levels[:level_index + 1]:
            for d in DIMS:
                tile[d] *= lf.product_of(d)
        return tile

    def total_bounds(self):
        return self.cumulative_tile(len(self.levels) - 1)


def canonical_order(order, temporal) -> tuple:
    """Levels with <= 1 non-unit temporal loop collapse to the default order."""
    non_unit = sum(1 for t in temporal if t > 1)
    if non_unit <= 1:
        return DIMS
    return tuple(order)


def canonicalize(m: Mapping) -> Mapping:
    levels = tuple(
        LevelFactors(lf.level, lf.spatial, lf.temporal,
                     canonical_order(lf.order, lf.temporal))
        for lf in m.levels)
    return Mapping(levels=levels, dataflow=m.dataflow,
                   double_buffered=m.double_buffered, shares=m.shares)


def mapping_sort_key(m: Mapping):
    """Deterministic tie-break key: per level (temporal, spatial, order)."""
    key = []
    for i, lf in enumerate(m.levels):
        for d in DIMS:
            key.append(lf.temporal_of(d))
            key.append(lf.spatial_of(d))
        key.extend(DIMS.index(d) for d in lf.order)
    return tuple(key)


# ---------------------------------------------------------------------------
# the binary 4D assignment matrix


@dataclass(frozen=True)
class MappingMatrix:
    """X: each (dimension, prime-factor index) -> (level index, spatial|temporal).

    Permutations are carried alongside as per-level loop orders;
    decode() copies them into the Mapping.
    """

    primes: tuple  # ((dim, (p0, p1, ...)), ...) for all of DIMS
    assignments: tuple  # ((dim, factor_index, level_index, kind), ...)
    permutations: tuple | None = None  # per level, outermost-first dim order

    @property
    def primes_map(self):
        return {d: list(ps) for d, ps in self.primes}


class IncompleteAssignment(ValueError):
    pass


def decode(x: MappingMatrix, arch: ArchSpec, dataflow: str = "",
           shares: MemoryShares | None = None,
           double_buffered: bool = False) -> Mapping:
    """Turn the binary matrix into per-level factor products."""
    primes = x.primes_map
    seen = set()
    prod = {}  # (level, kind, dim) -> factor
    for dim, idx, level, kind in x.assignments:
        if (dim, idx) in seen:
            raise IncompleteAssignment(f"({dim},{idx}) assigned twice")
        if dim not in primes or idx >= len(primes[dim]):
            raise IncompleteAssignment(f"unknown factor ({dim},{idx})")
        if kind not in ("spatial", "temporal"):
            raise IncompleteAssignment(f"bad kind {kind!r}")
        seen.add((dim, idx))
        key = (level, kind, dim)
        prod[key] = prod.get(key, 1) * primes[dim][idx]
    expected = {(d, i) for d, ps in x.primes for i in range(len(ps))}
    if seen != expected:
        missing = sorted(expected - seen)
        raise IncompleteAssignment(f"unassigned factors: {missing}")

    levels = []
    for li, lv in enumerate(arch.levels):
        spatial = tuple(prod.get((li, "spatial", d), 1) for d in DIMS)
        temporal = tuple(prod.get((li, "temporal", d), 1) for d in DIMS)
        order = DIMS
        if x.permutations is not None and li < len(x.permutations):
            order = tuple(x.permutations[li])
        levels.append(LevelFactors(lv.name, spatial, temporal,
                                   canonical_order(order, temporal)))
    return Mapping(levels=tuple(levels), dataflow=dataflow,
                   double_buffered=double_buffered,
                   shares=shares if shares is not None else MemoryShares())


# ---------------------------------------------------------------------------
# feasibility predicates


def check_pe_bound(m: Mapping, arch: ArchSpec) -> bool:
    """Multiplicative form of the PE constraint: per-dimension product of
    spatial and temporal factors at the PE level must not exceed DIM."""
    pe = m.levels[arch.pe_level_index]
    return all(pe.product_of(d) <= arch.pe_dim for d in DIMS)


def footprint(m: Mapping, arch: ArchSpec, level: MemoryLevel,
              w) -> dict:
    """Per-operand bytes resident at an on-chip level."""
    li = arch.level_index(level.name)
    tile = m.cumulative_tile(li)
    out = {}
    for operand in OPERANDS:
        if not level.is_pe_level and operand not in level.operands_held:
            out[operand] = 0
            continue
        if level.is_pe_level and operand not in level.operands_held:
            out[operand] = 0
            continue
        d0, d1 = OPERAND_DIMS[operand]
        out[operand] = tile[d0] * tile[d1] * ELEM_BYTES[operand]
    return out


def check_capacity(m: Mapping, arch: ArchSpec, w) -> bool:
    """Every held operand fits in share * capacity (halved when double
    buffering is on)."""
    halve = Fraction(1, 2) if m.double_buffered else Fraction(1)
    for idx, lv in arch.on_chip_levels():
        fps = footprint(m, arch, lv, w)
        for operand, bytes_needed in fps.items():
            if bytes_needed == 0:
                continue
            share = m.shares.get(lv.name, operand)
            budget = Fraction(lv.capacity_bytes) * share * halve
            if bytes_needed > budget:
                return False
    return True


def _split_ok(level_product, spatial, temporal, max_spatial, max_temporal):
    if spatial * temporal != level_product:
        return False
    if max_spatial is not None and spatial > max_spatial:
        return False
    if max_temporal is not None and temporal > max_temporal:
        return False
    return True


def check_dataflow(m: Mapping, arch: ArchSpec, df: DataflowSpec, w) -> bool:
    """Dataflow spatial requirements at the PE level plus ConstraintSet caps."""
    pe_idx = arch.pe_level_index
    pe = m.levels[pe_idx]
    bounds = w.bounds
    for dim, mode in df.spatial:
        s = pe.spatial_of(dim)
        if mode == "forced":
            if not (s > 1 or s == bounds[dim]):
                return False
        elif mode == "forbidden":
            if s != 1:
                return False
    for li, lv in enumerate(arch.levels):
        lf = m.levels[li]
        for dim in DIMS:
            s, t = lf.spatial_of(dim), lf.temporal_of(dim)
            ms = arch.constraints.max_spatial(arch, lv, dim)
            mt = arch.constraints.max_temporal(lv, dim)
            if ms is not None and s > ms:
                return False
            if mt is not None and t > mt:
                return False
            fixed = arch.constraints.fixed(lv, dim)
            if fixed is not None and s * t != fixed:
                return False
    return True


def feasible(m: Mapping, arch: ArchSpec, w, df: DataflowSpec | None = None) -> bool:
    if df is None:
        df = arch.dataflow(m.dataflow)
    return (check_pe_bound(m, arch) and check_capacity(m, arch, w)
            and check_dataflow(m, arch, df, w))


# ---------------------------------------------------------------------------
# mapping file (the scheduler's output format)


def mapping_to_dict(m: Mapping) -> dict:
    return {
        "dataflow": m.dataflow,
        "double_buffered": m.double_buffered,
        "shares": {level: {op: str(frac) for op, frac in row}
                   for level, row in m.shares.entries},
        "levels": [
            {"level": lf.level,
             "temporal": {d: lf.temporal_of(d) for d in DIMS},
             "spatial": {d: lf.spatial_of(d) for d in DIMS},
             "order": list(lf.order)}
            for lf in m.levels
        ],
    }


def mapping_from_dict(doc: dict, arch: ArchSpec) -> Mapping:
    shares = MemoryShares.from_dict(
        {level: {op: Fraction(frac) for op, frac in row.items()}
         for level, row in (doc.get("shares") or {}).items()})
    by_name = {rec["level"]: rec for rec in doc.get("levels", [])}
    levels = []
    for lv in arch.levels:
        rec = by_name.get(lv.name)
        if rec is None:
            levels.append(LevelFactors(lv.name, (1, 1, 1), (1, 1, 1)))
            continue
        spatial = tuple(int(rec.get("spatial", {}).get(d, 1)) for d in DIMS)
        temporal = tuple(int(rec.get("temporal", {}).get(d, 1)) for d in DIMS)
        order = tuple(rec.get("order", DIMS))
        levels.append(LevelFactors(lv.name, spatial, temporal,
                                   canonical_order(order, temporal)))
    return Mapping(levels=tuple(levels), dataflow=doc.get("dataflow", ""),
                   double_buffered=bool(doc.get("double_buffered", False)),
                   shares=shares)


def dump_mapping(m: Mapping) -> str:
    return yaml.safe_dump(mapping_to_dict(m), sort_keys=False)


def load_mapping(path, arch: ArchSpec) -> Mapping:
    with open(path, "r", encoding="utf-8") as fh:
        return mapping_from_dict(yaml.safe_load(fh.read()), arch)
