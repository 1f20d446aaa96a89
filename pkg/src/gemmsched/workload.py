"""Quantized workloads: operator graphs, legalization, and the bit-exact oracle.

A workload is either a small operator graph (dense/conv plus its quantized
epilogue and layout preprocessing) or, after legalization, a single unified
GEMM problem.  All quantized arithmetic is fixed here: int32 accumulation, a
single rational requantize scale, round-half-even, then saturation to the
clip bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import yaml

from .archspec import Diagnostic

PREPROCESSING_KINDS = ("transpose", "flatten", "im2col")
FUSABLE_HEADS = ("qnn_dense", "qnn_conv2d")


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class TensorValue:
    shape: tuple
    dtype: str  # "int8" | "int32"
    data: np.ndarray  # row-major, matches shape
    quant: tuple | None = None  # (scale: Fraction, zero_point: int)

    def __post_init__(self):
        arr = np.asarray(self.data).reshape(self.shape)
        object.__setattr__(self, "data", arr)
        if self.dtype == "int8" and arr.size:
            lo, hi = int(arr.min()), int(arr.max())
            if lo < -128 or hi > 127:
                raise WorkloadError(f"int8 tensor out of range [{lo}, {hi}]")


@dataclass
class GraphOp:
    id: str
    kind: str
    inputs: list
    output: str
    attrs: dict = field(default_factory=dict)


@dataclass
class Graph:
    ops: list  # topologically ordered GraphOps
    constants: dict  # name -> TensorValue
    inputs: list  # (name, shape, dtype)
    outputs: list  # names

    def op_producing(self, name):
        for op in self.ops:
            if op.output == name:
                return op
        return None

    def consumers(self, name):
        return [op for op in self.ops if name in op.inputs]

    def is_constant(self, name):
        return name in self.constants


@dataclass(frozen=True)
class GemmWorkload:
    """A unified quantized GEMM: O = clip(rnd(scale * (In @ W + bias)))."""

    N: int
    C: int
    K: int
    weight: np.ndarray  # (C, K) int8
    bias: np.ndarray  # (K,) int32
    output_scale: Fraction
    clip_min: int = -128
    clip_max: int = 127
    input_dtype: str = "int8"
    weight_dtype: str = "int8"
    accum_dtype: str = "int32"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.int8).reshape(self.C, self.K)
        b = np.asarray(self.bias, dtype=np.int32).reshape(self.K)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def bounds(self):
        return {"N": self.N, "C": self.C, "K": self.K}

    @property
    def macs(self):
        return self.N * self.C * self.K


@dataclass(frozen=True)
class Im2colDescriptor:
    """Gather pattern turning an NCHW activation into the im2col GEMM input."""

    batch: int
    in_channels: int
    height: int
    width: int
    kernel: tuple  # (R, S)
    strides: tuple  # (sh, sw)
    padding: tuple  # (ph, pw)

    @property
    def out_spatial(self):
        r, s = self.kernel
        sh, sw = self.strides
        ph, pw = self.padding
        p = (self.height + 2 * ph - r) // sh + 1
        q = (self.width + 2 * pw - s) // sw + 1
        return p, q

    def materialize(self, activation: np.ndarray) -> np.ndarray:
        """Build the (batch*P*Q, C*R*S) im2col matrix; zero padding."""
        a = np.asarray(activation).reshape(
            self.batch, self.in_channels, self.height, self.width)
        r, s = self.kernel
        sh, sw = self.strides
        ph, pw = self.padding
        p, q = self.out_spatial
        padded = np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        rows = np.empty((self.batch * p * q, self.in_channels * r * s),
                        dtype=a.dtype)
        idx = 0
        for n in range(self.batch):
            for i in range(p):
                for j in range(q):
                    patch = padded[n, :, i * sh:i * sh + r, j * sw:j * sw + s]
                    rows[idx] = patch.reshape(-1)
                    idx += 1
        return rows


# ---------------------------------------------------------------------------
# quantized arithmetic


def _rhe_int(v: int, num: int, den: int) -> int:
    q, rem = divmod(v * num, den)
    twice = 2 * rem
    if twice > den or (twice == den and q % 2 != 0):
        q += 1
    return q


def round_half_even_scaled(values: np.ndarray, scale: Fraction) -> np.ndarray:
    """Exact round-half-even of ``values * scale`` in integer arithmetic."""
    arr = np.asarray(values, dtype=np.int64)
    numr, den = int(scale.numerator), int(scale.denominator)
    maxabs = int(np.abs(arr).max()) if arr.size else 0
    if den >= (1 << 61) or abs(numr) >= (1 << 61) \
            or (numr and maxabs and maxabs > (1 << 61) // abs(numr)):
        # products would overflow int64; fall back to exact Python ints
        out = np.asarray([_rhe_int(int(v), numr, den) for v in arr.ravel()],
                         dtype=object)
        return out.reshape(arr.shape)
    num = arr * numr
    q = np.floor_divide(num, den)
    rem = num - q * den
    twice = 2 * rem
    round_up = (twice > den) | ((twice == den) & (q % 2 != 0))
    return q + round_up


def requantize_clip(acc: np.ndarray, bias: np.ndarray, scale: Fraction,
                    clip_min: int, clip_max: int) -> np.ndarray:
    scaled = round_half_even_scaled(np.asarray(acc, dtype=np.int64) + bias, scale)
    return np.clip(scaled, clip_min, clip_max).astype(np.int8)


def reference_execute(w: GemmWorkload, input_tensor) -> np.ndarray:
    """Naive bit-exact oracle for the unified GEMM (int32 accumulation)."""
    a = np.asarray(input_tensor.data if isinstance(input_tensor, TensorValue)
                   else input_tensor)
    if a.shape != (w.N, w.C):
        raise WorkloadError(f"input shape {a.shape} != {(w.N, w.C)}")
    acc = a.astype(np.int32) @ w.weight.astype(np.int32)
    return requantize_clip(acc, w.bias, w.output_scale, w.clip_min, w.clip_max)


# ---------------------------------------------------------------------------
# graph interpretation (host-side semantics; also used as the fusion oracle)


def _exec_op(op: GraphOp, values: dict) -> np.ndarray:
    ins = [values[n] for n in op.inputs]
    if op.kind == "qnn_dense":
        return ins[0].astype(np.int32) @ ins[1].astype(np.int32)
    if op.kind == "qnn_conv2d":
        desc = _conv_descriptor(op, ins[0].shape)
        cols = desc.materialize(ins[0])
        wmat = _conv_weight_matrix(ins[1])
        return cols.astype(np.int32) @ wmat.astype(np.int32)
    if op.kind == "bias_add":
        return ins[0].astype(np.int32) + ins[1].astype(np.int32)
    if op.kind == "requantize":
        return round_half_even_scaled(ins[0], _scale_of(op)).astype(np.int32)
    if op.kind == "clip":
        lo, hi = int(op.attrs.get("min", -128)), int(op.attrs.get("max", 127))
        return np.clip(ins[0], lo, hi).astype(np.int8)
    if op.kind == "transpose":
        axes = op.attrs.get("axes")
        return np.transpose(ins[0], axes)
    if op.kind == "flatten":
        return ins[0].reshape(ins[0].shape[0], -1)
    if op.kind == "im2col":
        desc = _conv_descriptor(op, ins[0].shape)
        return desc.materialize(ins[0])
    if op.kind == "generalized_dense":
        acc = ins[0].astype(np.int32) @ ins[1].astype(np.int32)
        return requantize_clip(acc, np.asarray(op.attrs["bias"], dtype=np.int32),
                               _scale_of(op), op.attrs["clip_min"],
                               op.attrs["clip_max"])
    if op.kind == "generalized_conv2d":
        desc = _conv_descriptor(op, ins[0].shape)
        cols = desc.materialize(ins[0])
        wmat = _conv_weight_matrix(ins[1])
        acc = cols.astype(np.int32) @ wmat.astype(np.int32)
        return requantize_clip(acc, np.asarray(op.attrs["bias"], dtype=np.int32),
                               _scale_of(op), op.attrs["clip_min"],
                               op.attrs["clip_max"])
    raise WorkloadError(f"unknown op kind {op.kind!r}")


def _scale_of(op: GraphOp) -> Fraction:
    scale = op.attrs["scale"]
    if isinstance(scale, Fraction):
        return scale
    if isinstance(scale, float):
        return Fraction(str(scale))
    return Fraction(scale)


def _conv_descriptor(op: GraphOp, input_shape) -> Im2colDescriptor:
    n, c, h, w = input_shape
    r, s = op.attrs.get("kernel", (1, 1))
    return Im2colDescriptor(batch=n, in_channels=c, height=h, width=w,
                            kernel=(r, s),
                            strides=tuple(op.attrs.get("strides", (1, 1))),
                            padding=tuple(op.attrs.get("padding", (0, 0))))


def _conv_weight_matrix(w4d: np.ndarray) -> np.ndarray:
    # OIHW -> (C*R*S, K) matching im2col column order
    k = w4d.shape[0]
    return w4d.reshape(k, -1).T


def interpret_graph(graph: Graph, inputs: dict) -> dict:
    """Execute every op in order; returns name -> ndarray for all outputs."""
    values = {name: tv.data for name, tv in graph.constants.items()}
    for name, shape, dtype in graph.inputs:
        if name not in inputs:
            raise WorkloadError(f"missing graph input {name!r}")
        values[name] = np.asarray(inputs[name]).reshape(shape)
    for op in graph.ops:
        values[op.output] = _exec_op(op, values)
    return {name: values[name] for name in graph.outputs}


# ---------------------------------------------------------------------------
# legalization


def legalize_fuse(graph: Graph, supported=("generalized_dense",
                                           "generalized_conv2d")):
    """Fuse qnn_dense/qnn_conv2d -> bias_add -> requantize -> clip chains.

    Returns (new_graph, diagnostics).  A chain is only fused when every
    intermediate value has a single consumer and is not a graph output;
    anything else is left untouched with a diagnostic.
    """
    diags = []
    ops = list(graph.ops)
    fused_ops = []
    consumed = set()
    by_output = {op.output: op for op in ops}

    def single_consumer(name):
        return (len(graph.consumers(name)) == 1 and name not in graph.outputs)

    for op in ops:
        if op.id in consumed:
            continue
        target = ("generalized_dense" if op.kind == "qnn_dense"
                  else "generalized_conv2d" if op.kind == "qnn_conv2d" else None)
        if target is None or target not in supported:
            fused_ops.append(op)
            continue
        chain = [op]
        ok = True
        for want in ("bias_add", "requantize", "clip"):
            cur = chain[-1].output
            if not single_consumer(cur):
                ok = False
                break
            nxt = graph.consumers(cur)[0]
            if nxt.kind != want:
                ok = False
                break
            chain.append(nxt)
        if not ok:
            diags.append(Diagnostic(
                "warning", f"ops.{op.id}",
                f"{op.kind} epilogue chain incomplete or ambiguous; left unfused"))
            fused_ops.append(op)
            continue
        dense, badd, requant, clip = chain
        bias_name = badd.inputs[1]
        if not graph.is_constant(bias_name):
            diags.append(Diagnostic("warning", f"ops.{badd.id}",
                                    "bias is not constant; chain left unfused"))
            fused_ops.append(op)
            continue
        attrs = dict(dense.attrs)
        attrs.update(bias=graph.constants[bias_name].data.astype(np.int32),
                     scale=_scale_of(requant),
                     clip_min=int(clip.attrs.get("min", -128)),
                     clip_max=int(clip.attrs.get("max", 127)))
        fused_ops.append(GraphOp(id=dense.id, kind=target,
                                 inputs=list(dense.inputs),
                                 output=clip.output, attrs=attrs))
        consumed.update(o.id for o in chain[1:])
    new = Graph(ops=[o for o in fused_ops if o.id not in consumed],
                constants=dict(graph.constants), inputs=list(graph.inputs),
                outputs=list(graph.outputs))
    already_fused = any(op.kind in supported for op in ops)
    if not already_fused and not any(op.kind in FUSABLE_HEADS for op in ops):
        diags.append(Diagnostic("warning", "ops",
                                "no fusable quantized chain found"))
    return new, diags


def constant_fold_preprocessing(graph: Graph) -> Graph:
    """Evaluate transpose/flatten/im2col over constants at compile time."""
    constants = dict(graph.constants)
    ops = list(graph.ops)
    changed = True
    while changed:
        changed = False
        for op in ops:
            if op.kind in PREPROCESSING_KINDS and all(
                    n in constants for n in op.inputs):
                values = {n: constants[n].data for n in op.inputs}
                result = _exec_op(op, values)
                src = constants[op.inputs[0]]
                constants[op.output] = TensorValue(
                    shape=tuple(result.shape), dtype=src.dtype, data=result)
                ops = [o for o in ops if o.id != op.id]
                changed = True
                break
    return Graph(ops=ops, constants=constants, inputs=list(graph.inputs),
                 outputs=list(graph.outputs))


def count_preprocessing_over_constants(graph: Graph) -> int:
    return sum(1 for op in graph.ops
               if op.kind in PREPROCESSING_KINDS
               and all(graph.is_constant(n) for n in op.inputs))


# ---------------------------------------------------------------------------
# conv -> GEMM


def lower_conv_to_gemm(op: GraphOp, input_shape, weight: np.ndarray):
    """Lower a generalized_conv2d to (GemmWorkload, Im2colDescriptor)."""
    desc = _conv_descriptor(op, input_shape)
    p, q = desc.out_spatial
    if p <= 0 or q <= 0:
        raise WorkloadError(f"non-positive conv output {p}x{q}")
    wmat = _conv_weight_matrix(np.asarray(weight))
    kout = wmat.shape[1]
    w = GemmWorkload(N=desc.batch * p * q, C=wmat.shape[0], K=kout,
                     weight=wmat,
                     bias=np.asarray(op.attrs["bias"], dtype=np.int32),
                     output_scale=_scale_of(op),
                     clip_min=op.attrs["clip_min"], clip_max=op.attrs["clip_max"])
    return w, desc


def graph_to_workload(graph: Graph):
    """Extract the single fused operator as a GemmWorkload.

    Returns (workload, input_name, descriptor) where descriptor is the
    im2col gather for convs and None for dense.
    """
    fused = [op for op in graph.ops
             if op.kind in ("generalized_dense", "generalized_conv2d")]
    if len(fused) != 1:
        raise WorkloadError(
            f"expected exactly one fused operator, found {len(fused)}")
    op = fused[0]
    wname = op.inputs[1]
    if not graph.is_constant(wname):
        raise WorkloadError(f"weight {wname!r} must be constant")
    weight = graph.constants[wname].data
    in_name = op.inputs[0]
    if op.kind == "generalized_dense":
        shape = _value_shape(graph, in_name)
        w = GemmWorkload(N=shape[0], C=shape[1], K=weight.shape[1],
                         weight=weight,
                         bias=np.asarray(op.attrs["bias"], dtype=np.int32),
                         output_scale=_scale_of(op),
                         clip_min=op.attrs["clip_min"],
                         clip_max=op.attrs["clip_max"])
        return w, in_name, None
    shape = _value_shape(graph, in_name)
    w, desc = lower_conv_to_gemm(op, shape, weight)
    return w, in_name, desc


def _value_shape(graph: Graph, name):
    for n, shape, _ in graph.inputs:
        if n == name:
            return tuple(shape)
    if name in graph.constants:
        return graph.constants[name].shape
    raise WorkloadError(f"cannot determine shape of {name!r}; "
                        "run constant folding / use a graph input")


# ---------------------------------------------------------------------------
# file format


def parse_workload(document) -> Graph:
    """Parse a workload file (full graph or single-layer gemm shorthand)."""
    if isinstance(document, (str, bytes)):
        document = yaml.safe_load(document)
    if not isinstance(document, dict):
        raise WorkloadError("workload document must be a mapping")
    if "gemm" in document:
        return _shorthand_graph(document["gemm"])
    constants = {}
    for name, rec in (document.get("constants") or {}).items():
        shape = tuple(rec["shape"])
        dtype = rec.get("dtype", "int8")
        data = np.asarray(rec["data"],
                          dtype=np.int8 if dtype == "int8" else np.int32)
        constants[name] = TensorValue(shape=shape, dtype=dtype, data=data)
    inputs = [(rec["name"], tuple(rec["shape"]), rec.get("dtype", "int8"))
              for rec in document.get("inputs", [])]
    ops = []
    for rec in document.get("ops", []):
        attrs = {k: v for k, v in rec.items()
                 if k not in ("id", "kind", "inputs", "output")}
        for key in ("kernel", "strides", "padding"):
            if key in attrs:
                attrs[key] = tuple(attrs[key])
        ops.append(GraphOp(id=rec["id"], kind=rec["kind"],
                           inputs=list(rec["inputs"]), output=rec["output"],
                           attrs=attrs))
    return Graph(ops=ops, constants=constants, inputs=inputs,
                 outputs=list(document.get("outputs", [])))


def _shorthand_graph(rec) -> Graph:
    n, c, k = int(rec["N"]), int(rec["C"]), int(rec["K"])
    seed = int(rec.get("seed", 0))
    rng = np.random.default_rng(seed)
    weight = rec.get("weight")
    weight = (np.asarray(weight, dtype=np.int8).reshape(c, k)
              if weight is not None
              else rng.integers(-128, 128, size=(c, k), dtype=np.int8))
    bias = rec.get("bias")
    bias = (np.asarray(bias, dtype=np.int32).reshape(k)
            if bias is not None else np.zeros(k, dtype=np.int32))
    scale = rec.get("scale", 1)
    scale = Fraction(str(scale)) if isinstance(scale, float) else Fraction(scale)
    clip = rec.get("clip", [-128, 127])
    op = GraphOp(id="gemm0", kind="generalized_dense", inputs=["x", "w"],
                 output="y",
                 attrs={"bias": bias, "scale": scale,
                        "clip_min": int(clip[0]), "clip_max": int(clip[1])})
    constants = {"w": TensorValue(shape=(c, k), dtype="int8", data=weight)}
    return Graph(ops=[op], constants=constants,
                 inputs=[("x", (n, c), "int8")], outputs=["y"])


def load_workload(path) -> Graph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_workload(fh.read())
