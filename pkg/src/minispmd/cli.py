"""Command-line front end.

Subcommands:

* ``propagate``  — complete shardings over a textual IR graph
* ``partition``  — emit the per-device SPMD program and collective stats
* ``run``        — execute a graph (single device or simulated SPMD)
* ``verify``     — check SPMD execution against single-device evaluation
* ``stats``      — print collective counts and byte metrics
* ``pipeline``   — build an unrolled pipeline graph and its bubble stats

Exit codes: 0 success/pass, 1 verification mismatch, 2 parse or validation
error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .ir import DType, Graph, IncompatibleShapes, Op, Shape, validate_graph
from .partitioner import (
    HaloTooLarge,
    SpmdProgram,
    UnsupportedConv,
    UnsupportedSharding,
    collective_stats,
    partition,
)
from .pipeline import PipelineConfig, build_pipeline, bubble_stats
from .propagation import ConflictingUserAnnotations, propagate
from .sharding import Sharding, assemble_data, np_dtype, shard_data
from .simulator import EvalError, evaluate_single, evaluate_spmd, verify_equivalence
from .textir import ParseError, parse_graph, print_graph

_COLLECTIVES = {
    Op.ALL_REDUCE,
    Op.ALL_GATHER,
    Op.REDUCE_SCATTER,
    Op.ALL_TO_ALL,
    Op.COLLECTIVE_PERMUTE,
}

_STATS_HELP = """\
Byte metrics reported per collective:

  exchanged_bytes   elements x dtype size x participating devices
  sent_bytes        per-device sent bytes under a bandwidth cost model:
                    AllReduce counts twice the data bytes, ReduceScatter and
                    AllGather count once each (half the AllReduce volume),
                    AllToAll and CollectivePermute count the data bytes once.
"""


class _CliError(Exception):
    """User-facing error with a chosen exit code."""

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_input(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        return Path(path).read_text()
    except OSError as e:
        raise _CliError(f"cannot read {path}: {e}", 2)


def _load_graph(path: str) -> Graph:
    text = _read_input(path)
    try:
        graph = parse_graph(text)
    except ParseError as e:
        raise _CliError(f"{path}:{e.line}:{e.column}: {e}", 2)
    diags = validate_graph(graph)
    if diags:
        raise _CliError(f"{path}: invalid graph: " + "; ".join(diags), 2)
    return graph


def _stem(args) -> Path:
    if getattr(args, "output", None):
        out = str(args.output)
        for suffix in (".spmd.txt", ".txt"):
            if out.endswith(suffix):
                out = out[: -len(suffix)]
                break
        return Path(out)
    if getattr(args, "input", "-") != "-":
        p = Path(args.input)
        return p.with_suffix("") if p.suffix else p
    return Path("graph")


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}", file=sys.stderr)


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def emit_dot(graph: Graph) -> str:
    """Render the graph in DOT format.

    Nodes are labelled with opcode, shape, and sharding; collective
    operations are highlighted.
    """
    lines = [f'digraph "{graph.name}" {{', "  node [shape=box, fontsize=10];"]
    for ins in graph.instructions:
        label = f"{ins.id}\\n{ins.opcode.value} {ins.shape}"
        if ins.sharding is not None:
            label += f"\\n{ins.sharding}"
        style = ""
        if ins.opcode in _COLLECTIVES:
            style = ', style=filled, fillcolor="orange"'
        lines.append(f'  "{ins.id}" [label="{label}"{style}];')
        for op in ins.operands:
            lines.append(f'  "{op}" -> "{ins.id}";')
    for out in graph.outputs:
        lines.append(f'  "{out}" [peripheries=2];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _maybe_dot(args, graph: Graph) -> None:
    if getattr(args, "dot", False):
        _write(_stem(args).with_suffix(".dot"), emit_dot(graph))


def _sent_bytes(program: SpmdProgram) -> dict[str, int]:
    """Per-device sent bytes per collective kind (see _STATS_HELP)."""
    weights = {
        Op.ALL_REDUCE: 2,
        Op.ALL_GATHER: 1,
        Op.REDUCE_SCATTER: 1,
        Op.ALL_TO_ALL: 1,
        Op.COLLECTIVE_PERMUTE: 1,
    }
    out: dict[str, int] = {}
    for ins in program.graph.instructions:
        if ins.opcode not in _COLLECTIVES:
            continue
        operand = program.graph.instr(ins.operands[0])
        size = operand.shape.num_elements * np.dtype(np_dtype(operand.shape.dtype)).itemsize
        out[ins.opcode.value] = (
            out.get(ins.opcode.value, 0) + weights[ins.opcode] * size
        )
    return out


def _stats_json(program: SpmdProgram) -> dict:
    stats = collective_stats(program)
    return {
        "collective_counts": stats["counts"],
        "exchanged_bytes": stats["bytes"],
        "total_exchanged_bytes": stats["total_bytes"],
        "sent_bytes": _sent_bytes(program),
    }


def _load_inputs(args, graph: Graph) -> list[np.ndarray]:
    params = graph.parameters
    if getattr(args, "inputs", None):
        try:
            literals = json.loads(_read_input(args.inputs))
        except json.JSONDecodeError as e:
            raise _CliError(f"{args.inputs}: invalid JSON: {e}", 2)
        if not isinstance(literals, list) or len(literals) != len(params):
            raise _CliError(
                f"{args.inputs}: expected a JSON list with "
                f"{len(params)} tensor literals", 2)
        out = []
        for p, lit in zip(params, literals):
            arr = np.asarray(lit, dtype=np_dtype(p.shape.dtype))
            if arr.shape != p.shape.dims:
                raise _CliError(
                    f"input for {p.id}: shape {arr.shape} does not match "
                    f"{p.shape.dims}", 2)
            out.append(arr)
        return out
    rng = np.random.default_rng(getattr(args, "seed", 0))
    out = []
    for p in params:
        if p.shape.dtype == DType.F32:
            out.append(rng.standard_normal(p.shape.dims).astype(np.float32))
        elif p.shape.dtype == DType.PRED:
            out.append(rng.integers(0, 2, p.shape.dims).astype(bool))
        else:
            out.append(
                rng.integers(1, 10, p.shape.dims).astype(np_dtype(p.shape.dtype)))
    return out


def _format_outputs(graph: Graph, values) -> str:
    lines = []
    for out_id, val in zip(graph.outputs, values):
        lines.append(f"%{out_id} = {np.array2string(np.asarray(val), threshold=64)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_propagate(args) -> int:
    graph = _load_graph(args.input)
    annotated, report = propagate(graph, use_priorities=not args.no_priorities)
    sys.stdout.write(print_graph(annotated))
    if args.trace:
        _write(_stem(args).with_suffix(".trace.json"),
               _json_dumps(report.to_json()))
    _maybe_dot(args, annotated)
    return 0


def _partition_input(args) -> tuple[Graph, SpmdProgram]:
    graph = _load_graph(args.input)
    annotated, _ = propagate(graph)
    return annotated, partition(annotated, args.devices)


def _cmd_partition(args) -> int:
    _, program = _partition_input(args)
    text = print_graph(program.graph)
    sys.stdout.write(text)
    stem = _stem(args)
    _write(Path(str(stem) + ".spmd.txt"), text)
    _write(stem.with_suffix(".stats.json"), _json_dumps(_stats_json(program)))
    _maybe_dot(args, program.graph)
    return 0


def _cmd_run(args) -> int:
    graph = _load_graph(args.input)
    inputs = _load_inputs(args, graph)
    if args.devices is None:
        values = evaluate_single(graph, inputs)
        sys.stdout.write(_format_outputs(graph, values))
        return 0
    annotated, _ = propagate(graph)
    program = partition(annotated, args.devices)
    devices = list(range(args.devices))
    per_dev = {d: [] for d in devices}
    for p, val in zip(annotated.parameters, inputs):
        shards = shard_data(val, p.sharding, devices=devices)
        for d in devices:
            per_dev[d].append(shards[d])
    results = evaluate_spmd(program, per_dev)
    values = []
    for i, out_id in enumerate(graph.outputs):
        shape = graph.instr(out_id).shape
        shards = {d: results[d][i] for d in devices}
        values.append(
            assemble_data(shards, program.output_shardings[i], shape))
    sys.stdout.write(_format_outputs(graph, values))
    return 0


def _cmd_verify(args) -> int:
    graph = _load_graph(args.input)
    inputs = _load_inputs(args, graph)
    annotated, _ = propagate(graph)
    report = verify_equivalence(graph, annotated, args.devices, inputs,
                                tolerance=args.tol)
    print(f"devices={args.devices} max_abs_error={report.max_abs_error:.3e} "
          f"max_rel_error={report.max_rel_error:.3e} "
          f"collectives={report.collective_counts}")
    if report.passed:
        print("verify: PASS")
        return 0
    print("verify: FAIL")
    for d in report.details:
        print(f"  {d}")
    return 1


def _cmd_stats(args) -> int:
    _, program = _partition_input(args)
    sys.stdout.write(_json_dumps(_stats_json(program)))
    _maybe_dot(args, program.graph)
    return 0


def _cmd_pipeline(args) -> int:
    schedule, _, rest = args.schedule.partition(":")
    if schedule not in ("gpipe", "circular"):
        raise _CliError(f"unknown schedule {args.schedule!r}", 2)
    layers = 1
    if schedule == "circular":
        try:
            layers = int(rest or "1")
        except ValueError:
            raise _CliError(f"bad layers-per-device in {args.schedule!r}", 2)
    try:
        cfg = PipelineConfig(args.stages, args.microbatches, schedule, layers)
    except ValueError as e:
        raise _CliError(str(e), 2)

    def body(b, inp, weights):
        return b.add(Op.ADD, [inp, weights[0]])

    dims = tuple(args.state_dims)
    graph = build_pipeline(cfg, None, dims, body, [Shape(dims)])
    sys.stdout.write(print_graph(graph))
    stats = bubble_stats(cfg)
    sys.stdout.write(_json_dumps(stats.to_json()))
    if getattr(args, "output", None):
        stem = _stem(args)
        _write(Path(str(stem) + ".txt"), print_graph(graph))
        _write(stem.with_suffix(".stats.json"), _json_dumps(stats.to_json()))
    _maybe_dot(args, graph)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minispmd",
        description="SPMD auto-partitioner for tensor dataflow graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_input=True):
        if needs_input:
            p.add_argument("input", help="IR file path, or - for stdin")
        p.add_argument("-o", "--output", help="output stem for artifacts")
        p.add_argument("--dot", action="store_true",
                       help="also emit a DOT graph (<stem>.dot)")

    p = sub.add_parser("propagate", help="complete sharding annotations")
    add_common(p)
    p.add_argument("--trace", action="store_true",
                   help="write the per-iteration change log (<stem>.trace.json)")
    p.add_argument("--no-priorities", action="store_true",
                   help="run plain topological propagation without op priorities")
    p.set_defaults(func=_cmd_propagate)

    p = sub.add_parser("partition", help="emit the per-device SPMD program")
    add_common(p)
    p.add_argument("--devices", type=int, required=True)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("run", help="execute a graph on simulated devices")
    add_common(p)
    p.add_argument("--devices", type=int, default=None,
                   help="simulate SPMD execution on N devices "
                        "(default: single-device evaluation)")
    p.add_argument("--inputs", help="JSON file with one literal per parameter")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for generated inputs when --inputs is absent")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify",
                       help="compare SPMD execution against a single device")
    add_common(p)
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-4,
                   help="relative tolerance for f32 outputs")
    p.add_argument("--inputs", help="JSON file with one literal per parameter")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser(
        "stats", help="print collective counts and byte metrics",
        epilog=_STATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    add_common(p)
    p.add_argument("--devices", type=int, required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("pipeline",
                       help="build an unrolled pipeline graph and bubble stats")
    add_common(p, needs_input=False)
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--microbatches", type=int, required=True)
    p.add_argument("--schedule", default="gpipe",
                   help="gpipe or circular:R (R layers per device)")
    p.add_argument("--state-dims", type=int, nargs="*", default=[4],
                   help="trailing state dimensions of the demo stage body")
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ParseError, IncompatibleShapes, ConflictingUserAnnotations,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UnsupportedSharding, UnsupportedConv, HaloTooLarge, EvalError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
