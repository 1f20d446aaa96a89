"""gemmsched: a mapping compiler for GEMM-based deep learning accelerators.

Pipeline: declarative architecture description -> quantized workload
legalization -> exact constrained mapping search -> tuning-space sweep and
analytical ranking -> loop-nest lowering, tensorization, and bit-exact
execution.
"""

from .archspec import (ArchError, ArchSpec, DataflowSpec, Diagnostic,
                       IntrinsicSpec, MemoryLevel, arch_to_dict, load_arch,
                       parse_arch, validate_arch)
from .costmodel import CostReport, estimate_latency, rank_candidates
from .lowering import (BudgetOverflow, InterpreterError, LoweringError,
                       Program, UninitializedRead, emit_trace, interpret,
                       lower_mapping, tensorize, trace_traffic)
from .mapspace import (LevelFactors, Mapping, MappingMatrix, MemoryShares,
                       canonicalize, check_capacity, check_dataflow,
                       check_pe_bound, decode, dump_mapping, even_shares,
                       factorize, feasible, footprint, load_mapping,
                       mapping_from_dict, mapping_to_dict)
from .solver import (SolveResult, enumerate_feasible, proxy_objective, solve,
                     traffic_breakdown)
from .spacegen import (ScheduleCandidate, SpaceReport, TuningPoint,
                       generate_space, share_grid, tuning_points)
from .workload import (GemmWorkload, Graph, GraphOp, Im2colDescriptor,
                       TensorValue, WorkloadError, constant_fold_preprocessing,
                       graph_to_workload, interpret_graph, legalize_fuse,
                       load_workload, lower_conv_to_gemm, parse_workload,
                       reference_execute, requantize_clip)

__version__ = "0.1.0"
