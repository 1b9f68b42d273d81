"""minispmd: a miniature SPMD auto-partitioning compiler for tensor dataflow graphs.

Annotate a few tensors with device-mesh shardings, complete the shardings over
the whole graph, rewrite it into a single per-device program with collective
communication, and verify the rewrite against a single-device reference on a
simulated device mesh.
"""

from .ir import (
    ConvDims,
    DType,
    Graph,
    GraphBuilder,
    Instruction,
    Op,
    ReduceKind,
    CompareDirection,
    Shape,
    WindowDim,
    infer_shape,
    validate_graph,
)
from .sharding import (
    DeviceMesh,
    Sharding,
    ShardingKind,
    assemble_data,
    merge_shardings,
    mesh_split,
    shard_data,
    shard_offset,
    shard_shape,
)

from .propagation import PropagationReport, propagate
from .partitioner import (
    HaloTooLarge,
    SpmdProgram,
    UnsupportedSharding,
    collective_stats,
    partition,
)
from .simulator import (
    EquivalenceReport,
    evaluate_single,
    evaluate_spmd,
    verify_equivalence,
)
from .pipeline import (
    BubbleStats,
    PipelineConfig,
    ShapeMismatch,
    bubble_stats,
    build_pipeline,
)
from .textir import ParseError, parse_graph, print_graph

__all__ = [
    "BubbleStats",
    "EquivalenceReport",
    "HaloTooLarge",
    "ParseError",
    "PipelineConfig",
    "PropagationReport",
    "ShapeMismatch",
    "SpmdProgram",
    "UnsupportedSharding",
    "bubble_stats",
    "build_pipeline",
    "collective_stats",
    "evaluate_single",
    "evaluate_spmd",
    "parse_graph",
    "partition",
    "print_graph",
    "propagate",
    "verify_equivalence",
    "ConvDims",
    "DType",
    "DeviceMesh",
    "Graph",
    "GraphBuilder",
    "Instruction",
    "Op",
    "ReduceKind",
    "CompareDirection",
    "Shape",
    "Sharding",
    "ShardingKind",
    "WindowDim",
    "assemble_data",
    "infer_shape",
    "merge_shardings",
    "mesh_split",
    "shard_data",
    "shard_offset",
    "shard_shape",
    "validate_graph",
]

__version__ = "0.1.0"
