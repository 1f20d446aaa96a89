"""Accelerator description model: parsing and validation.

The accelerator is described declaratively in YAML: a memory hierarchy
(innermost PE array first, unbounded off-chip level last), the dataflows the
hardware can execute, per-(level, dimension) mapping constraints, and the
intrinsics (compute / memory / config) the lowering stage may emit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import yaml

DIMS = ("N", "C", "K")
OPERANDS = ("input", "weight", "output")

# which GEMM dimensions index each operand
OPERAND_DIMS = {
    "input": ("N", "C"),
    "weight": ("C", "K"),
    "output": ("N", "K"),
}

SPATIAL_MODES = ("forced", "forbidden", "free")


class ArchError(ValueError):
    """Raised when an architecture document cannot be turned into an ArchSpec."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    path: str
    message: str

    def __str__(self):
        return f"{self.severity} at {self.path}: {self.message}"


@dataclass(frozen=True)
class MemoryLevel:
    name: str
    capacity_bytes: int
    bandwidth_bytes_per_cycle: Fraction
    dma_startup_cycles: int
    operands_held: tuple
    is_pe_level: bool = False


@dataclass(frozen=True)
class DataflowSpec:
    name: str
    stationary: str
    spatial: tuple  # ((dim, mode), ...) over all of DIMS

    @property
    def spatial_map(self):
        return dict(self.spatial)


@dataclass(frozen=True)
class Constraint:
    level: str
    dim: str
    max_spatial: int | None = None  # None = unlimited / default
    max_temporal: int | None = None
    fixed: int | None = None


@dataclass(frozen=True)
class ConstraintSet:
    entries: tuple = ()

    def lookup(self, level: str, dim: str):
        for e in self.entries:
            if e.level == level and e.dim == dim:
                return e
        return None

    def max_spatial(self, arch: "ArchSpec", level: "MemoryLevel", dim: str) -> int:
        """Effective spatial cap; non-PE levels default to 1 (single array)."""
        e = self.lookup(level.name, dim)
        if e is not None and e.max_spatial is not None:
            return e.max_spatial
        return arch.pe_dim if level.is_pe_level else 1

    def max_temporal(self, level: "MemoryLevel", dim: str):
        e = self.lookup(level.name, dim)
        if e is not None and e.max_temporal is not None:
            return e.max_temporal
        return None  # unlimited

    def fixed(self, level: "MemoryLevel", dim: str):
        e = self.lookup(level.name, dim)
        return e.fixed if e is not None else None


@dataclass(frozen=True)
class IntrinsicSpec:
    id: str
    kind: str  # "compute" | "memory" | "config"
    direction: str | None = None  # memory: "load" | "store"
    operand: str | None = None
    src: str | None = None
    dst: str | None = None
    bounds: tuple = ()  # compute: ((dim, bound), ...)
    accumulate: bool = False
    fixed_cycles: int = 0
    per_element_cycles: Fraction = Fraction(1)

    @property
    def bounds_map(self):
        return dict(self.bounds)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    pe_dim: int
    levels: tuple  # innermost (PE) -> outermost (off-chip)
    dataflows: tuple
    constraints: ConstraintSet
    intrinsics: tuple
    supports_double_buffering: bool = False

    @property
    def pe_level_index(self) -> int:
        for i, lv in enumerate(self.levels):
            if lv.is_pe_level:
                return i
        raise ValueError("no PE level")

    def level_index(self, name: str) -> int:
        for i, lv in enumerate(self.levels):
            if lv.name == name:
                return i
        raise KeyError(name)

    def dataflow(self, name: str) -> DataflowSpec:
        for df in self.dataflows:
            if df.name == name:
                return df
        raise KeyError(name)

    def on_chip_levels(self):
        """(index, level) pairs for every bounded level."""
        return [(i, lv) for i, lv in enumerate(self.levels) if lv.capacity_bytes > 0]

    def holds(self, level_index: int, operand: str) -> bool:
        lv = self.levels[level_index]
        if lv.capacity_bytes == 0:
            return True  # off-chip backs every operand
        return operand in lv.operands_held

    def holding_levels(self, operand: str):
        """Indices of levels holding the operand, innermost first."""
        return [i for i in range(len(self.levels)) if self.holds(i, operand)]

    def compute_intrinsics(self):
        return [it for it in self.intrinsics if it.kind == "compute"]

    def memory_intrinsic(self, direction: str, operand: str, src: str, dst: str):
        for it in self.intrinsics:
            if (it.kind == "memory" and it.direction == direction
                    and it.operand == operand and it.src == src and it.dst == dst):
                return it
        return None

    def config_intrinsics(self):
        return [it for it in self.intrinsics if it.kind == "config"]


# ---------------------------------------------------------------------------
# parsing


def _as_fraction(value, path, diags):
    if isinstance(value, bool):
        diags.append(Diagnostic("error", path, "expected a number"))
        return Fraction(1)
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, str):
        try:
            return Fraction(value)
        except ValueError:
            pass
    diags.append(Diagnostic("error", path, f"expected a number, got {value!r}"))
    return Fraction(1)


def _require(record, key, path, diags, types=None):
    if key not in record:
        diags.append(Diagnostic("error", f"{path}.{key}", "missing required field"))
        return None
    v = record[key]
    if types is not None and not isinstance(v, types):
        diags.append(Diagnostic("error", f"{path}.{key}",
                                f"wrong type {type(v).__name__}"))
        return None
    return v


def _check_unknown(record, allowed, path, diags):
    for key in record:
        if key not in allowed:
            diags.append(Diagnostic("error", f"{path}.{key}", "unknown key"))


def _parse_level(rec, path, diags) -> MemoryLevel:
    _check_unknown(rec, {"name", "capacity_bytes", "bandwidth_bytes_per_cycle",
                         "dma_startup_cycles", "operands", "pe_level"}, path, diags)
    name = _require(rec, "name", path, diags, str) or "?"
    cap = _require(rec, "capacity_bytes", path, diags, int)
    bw = rec.get("bandwidth_bytes_per_cycle", 1)
    operands = rec.get("operands", [])
    if not isinstance(operands, list):
        diags.append(Diagnostic("error", f"{path}.operands", "expected a list"))
        operands = []
    for j, op in enumerate(operands):
        if op not in OPERANDS:
            diags.append(Diagnostic("error", f"{path}.operands[{j}]",
                                    f"unknown operand {op!r}"))
    cap = cap if isinstance(cap, int) else 0
    if cap < 0:
        diags.append(Diagnostic("error", f"{path}.capacity_bytes", "must be >= 0"))
    startup = rec.get("dma_startup_cycles", 0)
    if not isinstance(startup, int) or startup < 0:
        diags.append(Diagnostic("error", f"{path}.dma_startup_cycles",
                                "must be a non-negative integer"))
        startup = 0
    bwf = _as_fraction(bw, f"{path}.bandwidth_bytes_per_cycle", diags)
    if bwf <= 0:
        diags.append(Diagnostic("error", f"{path}.bandwidth_bytes_per_cycle",
                                "must be positive"))
        bwf = Fraction(1)
    return MemoryLevel(name=name, capacity_bytes=cap, bandwidth_bytes_per_cycle=bwf,
                       dma_startup_cycles=startup,
                       operands_held=tuple(op for op in operands if op in OPERANDS),
                       is_pe_level=bool(rec.get("pe_level", False)))


def _parse_dataflow(rec, path, diags) -> DataflowSpec:
    _check_unknown(rec, {"name", "stationary", "spatial"}, path, diags)
    name = _require(rec, "name", path, diags, str) or "?"
    stationary = _require(rec, "stationary", path, diags, str)
    if stationary not in OPERANDS:
        diags.append(Diagnostic("error", f"{path}.stationary",
                                f"must be one of {OPERANDS}"))
        stationary = "weight"
    spatial = rec.get("spatial", {})
    if not isinstance(spatial, dict):
        diags.append(Diagnostic("error", f"{path}.spatial", "expected a map"))
        spatial = {}
    modes = []
    for dim in DIMS:
        mode = spatial.get(dim, "free")
        if mode not in SPATIAL_MODES:
            diags.append(Diagnostic("error", f"{path}.spatial.{dim}",
                                    f"must be one of {SPATIAL_MODES}"))
            mode = "free"
        modes.append((dim, mode))
    for dim in spatial:
        if dim not in DIMS:
            diags.append(Diagnostic("error", f"{path}.spatial.{dim}",
                                    f"unknown dimension (expected one of {DIMS})"))
    return DataflowSpec(name=name, stationary=stationary, spatial=tuple(modes))


def _parse_constraint(rec, path, diags) -> Constraint:
    _check_unknown(rec, {"level", "dim", "max_spatial", "max_temporal", "fixed"},
                   path, diags)
    level = _require(rec, "level", path, diags, str) or "?"
    dim = _require(rec, "dim", path, diags, str) or "?"
    if dim not in DIMS and dim != "?":
        diags.append(Diagnostic("error", f"{path}.dim", f"unknown dimension {dim!r}"))
    out = {}
    for key in ("max_spatial", "max_temporal", "fixed"):
        v = rec.get(key)
        if v is not None and (not isinstance(v, int) or v < 1):
            diags.append(Diagnostic("error", f"{path}.{key}",
                                    "must be a positive integer"))
            v = None
        out[key] = v
    return Constraint(level=level, dim=dim, **out)


def _parse_intrinsic(rec, path, diags) -> IntrinsicSpec:
    _check_unknown(rec, {"id", "kind", "direction", "operand", "src", "dst",
                         "bounds", "accumulate", "cost"}, path, diags)
    iid = _require(rec, "id", path, diags, str) or "?"
    kind = _require(rec, "kind", path, diags, str)
    if kind not in ("compute", "memory", "config"):
        diags.append(Diagnostic("error", f"{path}.kind",
                                "must be compute, memory or config"))
        kind = "config"
    direction = operand = src = dst = None
    bounds = ()
    if kind == "memory":
        direction = _require(rec, "direction", path, diags, str)
        if direction not in ("load", "store"):
            diags.append(Diagnostic("error", f"{path}.direction",
                                    "must be load or store"))
        operand = _require(rec, "operand", path, diags, str)
        if operand not in OPERANDS:
            diags.append(Diagnostic("error", f"{path}.operand",
                                    f"must be one of {OPERANDS}"))
        src = _require(rec, "src", path, diags, str)
        dst = _require(rec, "dst", path, diags, str)
    elif kind == "compute":
        braw = _require(rec, "bounds", path, diags, dict) or {}
        for dim in braw:
            if dim not in DIMS:
                diags.append(Diagnostic("error", f"{path}.bounds.{dim}",
                                        "unknown dimension"))
        bounds = tuple((dim, braw.get(dim, 1)) for dim in DIMS)
        for dim, b in bounds:
            if not isinstance(b, int) or b < 1:
                diags.append(Diagnostic("error", f"{path}.bounds.{dim}",
                                        "must be a positive integer"))
    cost = rec.get("cost", {})
    if not isinstance(cost, dict):
        diags.append(Diagnostic("error", f"{path}.cost", "expected a map"))
        cost = {}
    _check_unknown(cost, {"fixed_cycles", "per_element_cycles"}, f"{path}.cost", diags)
    fixed_cycles = cost.get("fixed_cycles", 0)
    if not isinstance(fixed_cycles, int) or fixed_cycles < 0:
        diags.append(Diagnostic("error", f"{path}.cost.fixed_cycles",
                                "must be a non-negative integer"))
        fixed_cycles = 0
    per_elem = _as_fraction(cost.get("per_element_cycles", 1),
                            f"{path}.cost.per_element_cycles", diags)
    return IntrinsicSpec(id=iid, kind=kind, direction=direction, operand=operand,
                         src=src, dst=dst, bounds=bounds,
                         accumulate=bool(rec.get("accumulate", False)),
                         fixed_cycles=fixed_cycles, per_element_cycles=per_elem)


def parse_arch(document) -> ArchSpec:
    """Parse a YAML architecture description into a validated ArchSpec.

    ``document`` may be YAML text or an already-loaded mapping.  Raises
    :class:`ArchError` carrying field-path diagnostics on any schema or
    semantic violation.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ArchError([Diagnostic("error", "<document>", f"bad YAML: {exc}")])
    if not isinstance(document, dict):
        raise ArchError([Diagnostic("error", "<document>", "expected a mapping")])

    diags: list[Diagnostic] = []
    _check_unknown(document, {"name", "pe_dim", "levels", "dataflows",
                              "constraints", "intrinsics", "double_buffering"},
                   "<root>", diags)
    name = _require(document, "name", "<root>", diags, str) or "?"
    pe_dim = _require(document, "pe_dim", "<root>", diags, int) or 1
    levels_raw = _require(document, "levels", "<root>", diags, list) or []
    dataflows_raw = _require(document, "dataflows", "<root>", diags, list) or []

    levels = tuple(_parse_level(rec, f"levels[{i}]", diags)
                   for i, rec in enumerate(levels_raw) if isinstance(rec, dict))
    dataflows = tuple(_parse_dataflow(rec, f"dataflows[{i}]", diags)
                      for i, rec in enumerate(dataflows_raw) if isinstance(rec, dict))
    constraints = ConstraintSet(tuple(
        _parse_constraint(rec, f"constraints[{i}]", diags)
        for i, rec in enumerate(document.get("constraints") or [])
        if isinstance(rec, dict)))
    intrinsics = tuple(_parse_intrinsic(rec, f"intrinsics[{i}]", diags)
                       for i, rec in enumerate(document.get("intrinsics") or [])
                       if isinstance(rec, dict))

    spec = ArchSpec(name=name, pe_dim=pe_dim, levels=levels, dataflows=dataflows,
                    constraints=constraints, intrinsics=intrinsics,
                    supports_double_buffering=bool(document.get("double_buffering",
                                                                False)))
    diags.extend(validate_arch(spec))
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise ArchError(errors)
    return spec


def validate_arch(spec: ArchSpec):
    """Semantic checks beyond the schema; returns a list of diagnostics."""
    diags = []

    def err(path, msg):
        diags.append(Diagnostic("error", path, msg))

    if spec.pe_dim < 1:
        err("pe_dim", "must be >= 1")
    if len(spec.levels) < 2:
        err("levels", "need at least a PE level and an off-chip level")
        return diags

    names = [lv.name for lv in spec.levels]
    for i, n in enumerate(names):
        if names.index(n) != i:
            err(f"levels[{i}].name", f"duplicate level name {n!r}")

    pe_levels = [i for i, lv in enumerate(spec.levels) if lv.is_pe_level]
    if len(pe_levels) != 1:
        err("levels", "exactly one level must be flagged pe_level")
    elif pe_levels[0] != 0:
        err(f"levels[{pe_levels[0]}]", "the PE level must be innermost")

    unbounded = [i for i, lv in enumerate(spec.levels) if lv.capacity_bytes == 0]
    if len(unbounded) != 1:
        err("levels", "exactly one level must have capacity 0")
    elif unbounded[0] != len(spec.levels) - 1:
        err(f"levels[{unbounded[0]}]", "the capacity-0 level must be outermost")

    if not spec.dataflows:
        err("dataflows", "at least one dataflow is required")
    for i, df in enumerate(spec.dataflows):
        forced = [d for d, m in df.spatial if m == "forced"]
        if len(forced) > 2:
            err(f"dataflows[{i}].spatial",
                f"{len(forced)} dimensions forced spatial; a 2-D array allows 2")

    for i, e in enumerate(spec.constraints.entries):
        if e.level not in names:
            err(f"constraints[{i}].level", f"unknown level {e.level!r}")
            continue
        lv = spec.levels[names.index(e.level)]
        if lv.is_pe_level and e.max_spatial is not None and e.max_spatial > spec.pe_dim:
            err(f"constraints[{i}].max_spatial",
                f"exceeds pe_dim {spec.pe_dim} at the PE level")

    for i, it in enumerate(spec.intrinsics):
        path = f"intrinsics[{i}]"
        if it.kind == "compute":
            for dim, b in it.bounds:
                if b > spec.pe_dim:
                    err(f"{path}.bounds.{dim}",
                        f"compute bound {b} exceeds pe_dim {spec.pe_dim}")
        elif it.kind == "memory":
            for attr in ("src", "dst"):
                lvname = getattr(it, attr)
                if lvname not in names:
                    err(f"{path}.{attr}", f"unknown level {lvname!r}")
            if it.src in names and it.dst in names and it.operand in OPERANDS:
                si, di = names.index(it.src), names.index(it.dst)
                inner, outer = (di, si) if it.direction == "load" else (si, di)
                if outer <= inner:
                    err(path, "memory intrinsic must move between an outer and "
                              "an inner level")
                else:
                    between = [j for j in range(inner + 1, outer)
                               if spec.holds(j, it.operand)]
                    if between:
                        err(path, f"levels {between} hold {it.operand} between "
                                  f"{it.src!r} and {it.dst!r}; intrinsics connect "
                                  "adjacent holding levels only")
    return diags


# ---------------------------------------------------------------------------
# serialization


def arch_to_dict(spec: ArchSpec) -> dict:
    """Inverse of parse_arch, up to formatting."""
    def frac(x):
        return int(x) if x.denominator == 1 else float(x)

    doc = {
        "name": spec.name,
        "pe_dim": spec.pe_dim,
        "levels": [
            {"name": lv.name, "capacity_bytes": lv.capacity_bytes,
             "bandwidth_bytes_per_cycle": frac(lv.bandwidth_bytes_per_cycle),
             "dma_startup_cycles": lv.dma_startup_cycles,
             "operands": list(lv.operands_held), "pe_level": lv.is_pe_level}
            for lv in spec.levels
        ],
        "dataflows": [
            {"name": df.name, "stationary": df.stationary,
             "spatial": dict(df.spatial)}
            for df in spec.dataflows
        ],
        "double_buffering": spec.supports_double_buffering,
    }
    if spec.constraints.entries:
        doc["constraints"] = []
        for e in spec.constraints.entries:
            rec = {"level": e.level, "dim": e.dim}
            if e.max_spatial is not None:
                rec["max_spatial"] = e.max_spatial
            if e.max_temporal is not None:
                rec["max_temporal"] = e.max_temporal
            if e.fixed is not None:
                rec["fixed"] = e.fixed
            doc["constraints"].append(rec)
    if spec.intrinsics:
        doc["intrinsics"] = []
        for it in spec.intrinsics:
            rec = {"id": it.id, "kind": it.kind}
            if it.kind == "memory":
                rec.update(direction=it.direction, operand=it.operand,
                           src=it.src, dst=it.dst)
            elif it.kind == "compute":
                rec["bounds"] = dict(it.bounds)
                rec["accumulate"] = it.accumulate
            if it.fixed_cycles or it.per_element_cycles != 1:
                rec["cost"] = {"fixed_cycles": it.fixed_cycles,
                               "per_element_cycles": frac(it.per_element_cycles)}
            doc["intrinsics"].append(rec)
    return doc


def load_arch(path) -> ArchSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_arch(fh.read())
