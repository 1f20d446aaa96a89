"""Mapping lowering: tiled loop-nest IR, tensorization, interpretation.

lower_mapping() turns a feasible Mapping into a loop nest whose temporal
loops realize the per-level tile factors and orders, with memory intrinsics
hoisted to the outermost loop at which each operand's tile is invariant.
tensorize() replaces the innermost tile body with a single compute
intrinsic call.  interpret() executes the program against simulated
scratchpad state, bit-exactly reproducing the workload oracle, and the same
walk emits the deterministic intrinsic trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .archspec import DIMS, OPERAND_DIMS, ArchSpec
from .mapspace import ELEM_BYTES, Mapping
from .workload import GemmWorkload, requantize_clip


class LoweringError(ValueError):
    pass


class InterpreterError(RuntimeError):
    pass


class UninitializedRead(InterpreterError):
    pass


class BudgetOverflow(InterpreterError):
    pass


# ---------------------------------------------------------------------------
# IR


@dataclass
class LoadTile:
    operand: str
    dst_level: str
    src_level: str
    level_index: int
    intrinsic_id: str


@dataclass
class StoreTile:
    src_level: str
    dst_level: str
    level_index: int
    intrinsic_id: str
    operand: str = "output"


@dataclass
class GenericTile:
    """Innermost tile body before tensorization (scalar GEMM semantics)."""


@dataclass
class ComputeTile:
    intrinsic_id: str


@dataclass
class ConfigCall:
    intrinsic_id: str


@dataclass
class Loop:
    dim: str
    extent: int
    level: str
    level_index: int
    kind: str  # temporal
    body: "Block"


@dataclass
class Block:
    stmts: list = field(default_factory=list)


@dataclass
class Program:
    arch: ArchSpec
    workload: GemmWorkload
    mapping: Mapping
    config: list
    root: Block
    tensorized: bool = False


# ---------------------------------------------------------------------------
# lowering


def _cumulative_tiles(m: Mapping):
    tiles = []
    acc = {d: 1 for d in DIMS}
    for lf in m.levels:
        for d in DIMS:
            acc[d] *= lf.product_of(d)
        tiles.append(dict(acc))
    return tiles


def lower_mapping(m: Mapping, w: GemmWorkload, arch: ArchSpec) -> Program:
    """Build the tiled loop nest for a mapping (innermost body untensorized)."""
    if len(m.levels) != len(arch.levels):
        raise LoweringError(
            f"mapping has {len(m.levels)} levels, arch has {len(arch.levels)}")
    for lf, lv in zip(m.levels, arch.levels):
        if lf.level != lv.name:
            raise LoweringError(f"mapping level {lf.level!r} does not match "
                                f"arch level {lv.name!r}")

    out_holding = [li for li in arch.holding_levels("output")
                   if arch.levels[li].capacity_bytes > 0]
    if len(out_holding) != 1:
        raise LoweringError("lowering requires exactly one on-chip level "
                            f"holding output, found {len(out_holding)}")

    # temporal loop chain, outermost first (PE loops fold into the tile body)
    chain = []
    for li in range(len(arch.levels) - 1, 0, -1):
        lf = m.levels[li]
        for dim in lf.order:
            e = lf.temporal_of(dim)
            if e > 1:
                chain.append((dim, e, li))

    def anchor_depth(level_index, relevant):
        depth = 0
        for pos, (dim, _, li) in enumerate(chain):
            if li > level_index and dim in relevant:
                depth = pos + 1
        return depth

    pre = {d: [] for d in range(len(chain) + 1)}
    post = {d: [] for d in range(len(chain) + 1)}

    for operand in ("input", "weight"):
        for li in arch.holding_levels(operand):
            lv = arch.levels[li]
            if lv.capacity_bytes == 0:
                continue
            src_li = _next_outer_holding(arch, operand, li)
            src = arch.levels[src_li].name
            intr = arch.memory_intrinsic("load", operand, src, lv.name)
            depth = anchor_depth(li, set(OPERAND_DIMS[operand]))
            pre[depth].append(LoadTile(operand, lv.name, src, li,
                                       intr.id if intr else "mvin"))

    oli = out_holding[0]
    olv = arch.levels[oli]
    dst_li = _next_outer_holding(arch, "output", oli)
    dst = arch.levels[dst_li].name
    depth = anchor_depth(oli, {"N", "K"})
    load_intr = arch.memory_intrinsic("load", "output", dst, olv.name)
    store_intr = arch.memory_intrinsic("store", "output", olv.name, dst)
    pre[depth].append(LoadTile("output", olv.name, dst, oli,
                               load_intr.id if load_intr else "mvin"))
    post[depth].append(StoreTile(olv.name, dst, oli,
                                 store_intr.id if store_intr else "mvout"))

    # deterministic statement order: loads into outer levels first, operands
    # in (input, weight, output) order; stores inner levels first
    rank = {"input": 0, "weight": 1, "output": 2}
    for d in pre:
        pre[d].sort(key=lambda s: (-s.level_index, rank[s.operand]))
    for d in post:
        post[d].sort(key=lambda s: (s.level_index, rank[s.operand]))

    def build(depth):
        blk = Block()
        blk.stmts.extend(pre[depth])
        if depth < len(chain):
            dim, extent, li = chain[depth]
            blk.stmts.append(Loop(dim, extent, arch.levels[li].name, li,
                                  "temporal", build(depth + 1)))
        else:
            blk.stmts.append(GenericTile())
        blk.stmts.extend(post[depth])
        return blk

    return Program(arch=arch, workload=w, mapping=m, config=[],
                   root=build(0), tensorized=False)


def _next_outer_holding(arch: ArchSpec, operand: str, level_index: int) -> int:
    for li in range(level_index + 1, len(arch.levels)):
        if arch.holds(li, operand):
            return li
    return len(arch.levels) - 1


def tensorize(p: Program, arch: ArchSpec) -> Program:
    """Replace the generic tile body with a single compute intrinsic call."""
    pe = p.mapping.levels[arch.pe_level_index]
    shape = {d: pe.product_of(d) for d in DIMS}
    chosen = None
    for intr in arch.compute_intrinsics():
        bounds = intr.bounds_map
        if all(shape[d] <= bounds.get(d, 1) for d in DIMS):
            chosen = intr
            break
    if chosen is None:
        for d in DIMS:
            if all(shape[d] > intr.bounds_map.get(d, 1)
                   for intr in arch.compute_intrinsics()) \
                    or not arch.compute_intrinsics():
                raise LoweringError(
                    f"no compute intrinsic admits tile dim {d}="
                    f"{shape[d]} (tile {shape})")
        raise LoweringError(f"no compute intrinsic admits tile {shape}")

    def rewrite(block):
        out = Block()
        for s in block.stmts:
            if isinstance(s, GenericTile):
                out.stmts.append(ComputeTile(chosen.id))
            elif isinstance(s, Loop):
                out.stmts.append(Loop(s.dim, s.extent, s.level, s.level_index,
                                      s.kind, rewrite(s.body)))
            else:
                out.stmts.append(s)
        return out

    return Program(arch=p.arch, workload=p.workload, mapping=p.mapping,
                   config=[ConfigCall(it.id) for it in arch.config_intrinsics()],
                   root=rewrite(p.root), tensorized=True)


# ---------------------------------------------------------------------------
# interpretation and tracing (one walker, to keep trace and data in lockstep)


class _Buffer:
    __slots__ = ("valid", "base", "shape", "data", "fetches", "budget")

    def __init__(self, budget):
        self.valid = False
        self.base = (0, 0)
        self.shape = (0, 0)
        self.data = None
        self.fetches = 0
        self.budget = budget


class _Walker:
    def __init__(self, program: Program, input_data=None, trace=None):
        if not program.tensorized:
            raise InterpreterError("program must be tensorized before "
                                   "interpretation")
        self.p = program
        self.arch = program.arch
        self.w = program.workload
        self.m = program.mapping
        self.trace = trace
        self.execute = input_data is not None
        self.tiles = _cumulative_tiles(self.m)
        self.bounds = self.w.bounds
        self.active = []  # (level_index, dim, index, extent, stride, base_off)
        self.offsets = {d: 0 for d in DIMS}
        halve = Fraction(1, 2) if self.m.double_buffered else Fraction(1)
        self.buffers = {}
        self.region_base = {}
        for idx, lv in self.arch.on_chip_levels():
            base = 0
            for op in lv.operands_held:
                share = self.m.shares.get(lv.name, op)
                budget = int(Fraction(lv.capacity_bytes) * share * halve)
                self.buffers[(lv.name, op)] = _Buffer(budget)
                self.region_base[(lv.name, op)] = base
                base += int(Fraction(lv.capacity_bytes) * share)
        if self.execute:
            a = np.asarray(input_data)
            if a.shape != (self.w.N, self.w.C):
                raise InterpreterError(
                    f"input shape {a.shape} != {(self.w.N, self.w.C)}")
            self.dram = {
                "input": a.astype(np.int8),
                "weight": self.w.weight,
            }
            self.output = np.zeros((self.w.N, self.w.K), dtype=np.int8)
            self.partials = np.zeros((self.w.N, self.w.K), dtype=np.int32)
        self.out_level = [li for li in self.arch.holding_levels("output")
                          if self.arch.levels[li].capacity_bytes > 0][0]

    # -- helpers -----------------------------------------------------------

    def _emit(self, line):
        if self.trace is not None:
            self.trace.append(line)

    def _region(self, operand, level_index):
        d0, d1 = OPERAND_DIMS[operand]
        tile = self.tiles[level_index]
        o0, o1 = self.offsets[d0], self.offsets[d1]
        s0 = min(tile[d0], self.bounds[d0] - o0)
        s1 = min(tile[d1], self.bounds[d1] - o1)
        return (o0, o1), (s0, s1)

    def _c_reduction_pending(self, level_index):
        """Is any enclosing C loop above the level at a non-final index?"""
        for li, dim, i, extent, stride, base in self.active:
            if dim == "C" and li > level_index:
                if base + (i + 1) * stride < self.bounds["C"]:
                    return True
        return False

    def _c_already_started(self, level_index):
        for li, dim, i, _, _, _ in self.active:
            if dim == "C" and li > level_index and i > 0:
                return True
        return False

    def _byte_offset(self, operand, level_name, buf):
        off = self.region_base[(level_name, operand)]
        if self.m.double_buffered:
            off += (buf.fetches % 2) * buf.budget
        return off

    def _read_operand_tile(self, operand, coords, shape):
        """Fetch a compute-tile slice of input/weight from its innermost
        holding level (or straight from off-chip when never staged)."""
        holding = self.arch.holding_levels(operand)[0]
        if self.arch.levels[holding].capacity_bytes == 0:
            if not self.execute:
                return None
            arr = self.dram[operand]
            return arr[coords[0]:coords[0] + shape[0],
                       coords[1]:coords[1] + shape[1]]
        buf = self.buffers[(self.arch.levels[holding].name, operand)]
        if not buf.valid:
            raise UninitializedRead(
                f"{operand} tile read at {coords} before any load into "
                f"{self.arch.levels[holding].name}")
        b0, b1 = buf.base
        if not (b0 <= coords[0] and coords[0] + shape[0] <= b0 + buf.shape[0]
                and b1 <= coords[1] and coords[1] + shape[1] <= b1 + buf.shape[1]):
            raise UninitializedRead(
                f"{operand} tile {coords}+{shape} not resident in "
                f"{self.arch.levels[holding].name} (has {buf.base}+{buf.shape})")
        if not self.execute:
            return None
        return buf.data[coords[0] - b0:coords[0] - b0 + shape[0],
                        coords[1] - b1:coords[1] - b1 + shape[1]]

    # -- statements --------------------------------------------------------

    def run(self):
        for cfg in self.p.config:
            self._emit(f"CONFIG id={cfg.intrinsic_id} "
                       f"dataflow={self.m.dataflow} "
                       f"db={int(self.m.double_buffered)}")
        if not self.p.config:
            self._emit(f"CONFIG dataflow={self.m.dataflow} "
                       f"db={int(self.m.double_buffered)}")
        self._block(self.p.root)
        if self.execute:
            return self.output
        return None

    def _block(self, block):
        for s in block.stmts:
            if isinstance(s, Loop):
                self._loop(s)
            elif isinstance(s, LoadTile):
                self._load(s)
            elif isinstance(s, StoreTile):
                self._store(s)
            elif isinstance(s, ComputeTile):
                self._compute(s)
            else:
                raise InterpreterError(f"unexpected statement {s!r}")

    def _loop(self, loop):
        li = loop.level_index
        stride = self.tiles[li - 1][loop.dim]
        base = self.offsets[loop.dim]
        for i in range(loop.extent):
            off = base + i * stride
            if off >= self.bounds[loop.dim]:
                break  # clamped away (non-dividing factors)
            self.offsets[loop.dim] = off
            self.active.append((li, loop.dim, i, loop.extent, stride, base))
            self._block(loop.body)
            self.active.pop()
        self.offsets[loop.dim] = base

    def _load(self, s):
        lv = self.arch.levels[s.level_index]
        buf = self.buffers[(lv.name, s.operand)]
        coords, shape = self._region(s.operand, s.level_index)
        if s.operand == "output":
            reload_partial = self._c_already_started(s.level_index)
            if not reload_partial:
                # first activation: accumulator starts from zero, no traffic
                buf.valid = True
                buf.base, buf.shape = coords, shape
                if self.execute:
                    buf.data = np.zeros(shape, dtype=np.int32)
                return
            nbytes = shape[0] * shape[1] * ELEM_BYTES["output"]
            self._check_budget(buf, nbytes, lv.name, s.operand)
            buf.fetches += 1
            buf.valid = True
            buf.base, buf.shape = coords, shape
            if self.execute:
                buf.data = self.partials[coords[0]:coords[0] + shape[0],
                                         coords[1]:coords[1] + shape[1]].copy()
            self._emit(f"MVIN id={s.intrinsic_id} op=output dst={lv.name} "
                       f"off={self._byte_offset('output', lv.name, buf)} "
                       f"at={coords[0]},{coords[1]} "
                       f"shape={shape[0]}x{shape[1]} bytes={nbytes} partial=1")
            return
        nbytes = shape[0] * shape[1] * ELEM_BYTES[s.operand]
        self._check_budget(buf, nbytes, lv.name, s.operand)
        buf.fetches += 1
        buf.valid = True
        buf.base, buf.shape = coords, shape
        if self.execute:
            if s.src_level == self.arch.levels[-1].name:
                src = self.dram[s.operand]
            else:
                srcbuf = self.buffers[(s.src_level, s.operand)]
                if not srcbuf.valid:
                    raise UninitializedRead(
                        f"load of {s.operand} from {s.src_level} before it "
                        "was filled")
                b0, b1 = srcbuf.base
                src = np.zeros((self.bounds[OPERAND_DIMS[s.operand][0]],
                                self.bounds[OPERAND_DIMS[s.operand][1]]),
                               dtype=srcbuf.data.dtype)
                src[b0:b0 + srcbuf.shape[0],
                    b1:b1 + srcbuf.shape[1]] = srcbuf.data
            buf.data = src[coords[0]:coords[0] + shape[0],
                           coords[1]:coords[1] + shape[1]].copy()
        self._emit(f"MVIN id={s.intrinsic_id} op={s.operand} dst={lv.name} "
                   f"off={self._byte_offset(s.operand, lv.name, buf)} "
                   f"at={coords[0]},{coords[1]} shape={shape[0]}x{shape[1]} "
                   f"bytes={nbytes}")

    def _check_budget(self, buf, nbytes, level_name, operand):
        if nbytes > buf.budget:
            raise BudgetOverflow(
                f"{operand} tile of {nbytes} B exceeds the {buf.budget} B "
                f"budget at {level_name}")

    def _store(self, s):
        lv = self.arch.levels[s.level_index]
        buf = self.buffers[(lv.name, s.operand)]
        coords, shape = self._region("output", s.level_index)
        if not buf.valid:
            raise UninitializedRead("output tile stored before accumulation")
        final = not self._c_reduction_pending(s.level_index)
        if final:
            nbytes = shape[0] * shape[1] * 1
            if self.execute:
                bias = self.w.bias[coords[1]:coords[1] + shape[1]]
                self.output[coords[0]:coords[0] + shape[0],
                            coords[1]:coords[1] + shape[1]] = requantize_clip(
                    buf.data, bias, self.w.output_scale,
                    self.w.clip_min, self.w.clip_max)
            self._emit(f"MVOUT id={s.intrinsic_id} op=output src={lv.name} "
                       f"at={coords[0]},{coords[1]} "
                       f"shape={shape[0]}x{shape[1]} bytes={nbytes} final=1")
        else:
            nbytes = shape[0] * shape[1] * ELEM_BYTES["output"]
            if self.execute:
                self.partials[coords[0]:coords[0] + shape[0],
                              coords[1]:coords[1] + shape[1]] = buf.data
            self._emit(f"MVOUT id={s.intrinsic_id} op=output src={lv.name} "
                       f"at={coords[0]},{coords[1]} "
                       f"shape={shape[0]}x{shape[1]} bytes={nbytes} final=0")
        buf.valid = False

    def _compute(self, s):
        tile = self.tiles[self.arch.pe_level_index]
        on, oc, ok = (self.offsets[d] for d in DIMS)
        nt = min(tile["N"], self.bounds["N"] - on)
        ct = min(tile["C"], self.bounds["C"] - oc)
        kt = min(tile["K"], self.bounds["K"] - ok)
        if nt <= 0 or ct <= 0 or kt <= 0:
            return
        acc_flag = self._c_already_started(self.arch.pe_level_index)
        a = self._read_operand_tile("input", (on, oc), (nt, ct))
        b = self._read_operand_tile("weight", (oc, ok), (ct, kt))
        obuf = self.buffers[(self.arch.levels[self.out_level].name, "output")]
        if not obuf.valid:
            raise UninitializedRead("compute before the accumulator tile was "
                                    "initialized")
        b0, b1 = obuf.base
        if self.execute:
            prod = a.astype(np.int32) @ b.astype(np.int32)
            view = obuf.data[on - b0:on - b0 + nt, ok - b1:ok - b1 + kt]
            if acc_flag:
                view += prod
            else:
                view[...] = prod
        self._emit(f"COMPUTE id={s.intrinsic_id} at={on},{oc},{ok} "
                   f"shape={nt}x{ct}x{kt} acc={int(acc_flag)}")


def interpret(p: Program, input_data, trace=None) -> np.ndarray:
    """Execute the tensorized program; returns the int8 (N, K) output."""
    return _Walker(p, input_data=input_data, trace=trace).run()


def emit_trace(p: Program) -> str:
    """Deterministic line-per-intrinsic trace of the tensorized program."""
    lines = []
    _Walker(p, input_data=None, trace=lines).run()
    return "\n".join(lines) + "\n"


def trace_traffic(trace_text: str) -> dict:
    """Bytes moved per on-chip level, recovered from a trace (MVIN keyed by
    dst, MVOUT by src); the comparison target for the cost model."""
    totals = {}
    for line in trace_text.splitlines():
        fields = dict(f.split("=", 1) for f in line.split()[1:]
                      if "=" in f)
        if line.startswith("MVIN"):
            level = fields["dst"]
        elif line.startswith("MVOUT"):
            level = fields["src"]
        else:
            continue
        totals[level] = totals.get(level, 0) + int(fields["bytes"])
    return totals
