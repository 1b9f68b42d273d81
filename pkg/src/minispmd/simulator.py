"""Reference evaluator and lockstep multi-device SPMD executor.

``evaluate_single`` is the single-device oracle. ``evaluate_spmd`` runs a
partitioned program on N simulated devices in lockstep: every device executes
the same instruction before any device moves on, which makes collectives
trivially deadlock-free and bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Optional, Sequence

import numpy as np

from .ir import (
    COLLECTIVES,
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    CompareDirection,
    ConvDims,
    DType,
    Graph,
    Instruction,
    Op,
    ReduceKind,
    Shape,
    WindowDim,
)
from .sharding import np_dtype


class EvalError(Exception):
    pass


class DivideByZero(EvalError):
    pass


class SubgroupMismatch(EvalError):
    pass


def _cast(value, shape: Shape) -> np.ndarray:
    arr = np.asarray(value, dtype=np_dtype(shape.dtype))
    if arr.shape != shape.dims:
        arr = arr.reshape(shape.dims)
    return arr


def _compare(direction: CompareDirection, a, b):
    return {
        CompareDirection.EQ: np.equal,
        CompareDirection.NE: np.not_equal,
        CompareDirection.LT: np.less,
        CompareDirection.LE: np.less_equal,
        CompareDirection.GT: np.greater,
        CompareDirection.GE: np.greater_equal,
    }[direction](a, b)


def _int_divide(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.any(b == 0):
        raise DivideByZero("integer division by zero")
    # C-style truncation toward zero.
    q = np.abs(a.astype(np.int64)) // np.abs(b.astype(np.int64))
    sign = np.sign(a.astype(np.int64)) * np.sign(b.astype(np.int64))
    return (q * sign).astype(a.dtype)


_REDUCE_FN = {
    ReduceKind.SUM: np.add.reduce,
    ReduceKind.MAX: np.maximum.reduce,
    ReduceKind.MIN: np.minimum.reduce,
    ReduceKind.PROD: np.multiply.reduce,
}


def reduce_identity(kind: ReduceKind, dtype: DType):
    """Identity value of a reduction for masking padded data."""
    np_t = np_dtype(dtype)
    if kind == ReduceKind.SUM:
        return np_t(0)
    if kind == ReduceKind.PROD:
        return np_t(1)
    if dtype == DType.F32:
        return np_t(-np.inf) if kind == ReduceKind.MAX else np_t(np.inf)
    info = np.iinfo(np_t)
    return np_t(info.min) if kind == ReduceKind.MAX else np_t(info.max)


def _pad(operand: np.ndarray, value, low, high, interior) -> np.ndarray:
    out_dims = []
    for n, l, h, it in zip(operand.shape, low, high, interior):
        dilated = n + max(0, n - 1) * it
        out_dims.append(dilated + l + h)
    out = np.full(out_dims, value, dtype=operand.dtype)
    sel = tuple(
        slice(l, l + n + max(0, n - 1) * it, it + 1)
        for n, l, it in zip(operand.shape, low, interior)
    )
    if operand.size:
        out[sel] = operand
    return out


def _dilate(arr: np.ndarray, axis: int, factor: int) -> np.ndarray:
    if factor == 1 or arr.shape[axis] == 0:
        return arr
    n = arr.shape[axis]
    shape = list(arr.shape)
    shape[axis] = (n - 1) * factor + 1
    out = np.zeros(shape, dtype=arr.dtype)
    sel = [slice(None)] * arr.ndim
    sel[axis] = slice(0, shape[axis], factor)
    out[tuple(sel)] = arr
    return out


def _conv(lhs: np.ndarray, rhs: np.ndarray, cd: ConvDims,
          window: Sequence[WindowDim]) -> np.ndarray:
    nsp = len(cd.lhs_spatial)
    # Canonicalize: lhs -> [B, C, *spatial], rhs -> [O, I, *spatial].
    l = np.transpose(lhs, (cd.lhs_batch, cd.lhs_feature) + tuple(cd.lhs_spatial))
    r = np.transpose(rhs, (cd.rhs_out_feature, cd.rhs_in_feature) + tuple(cd.rhs_spatial))
    for i, w in enumerate(window):
        l = _dilate(l, 2 + i, w.base_dilation)
        pads = [(0, 0)] * l.ndim
        pads[2 + i] = (w.padding_low, w.padding_high)
        l = np.pad(l, pads)
    out_spatial = [w.output_size(n) for w, n in
                   zip(window, [lhs.shape[d] for d in cd.lhs_spatial])]
    b, o = l.shape[0], r.shape[0]
    acc_t = np.int64 if lhs.dtype.kind in "iu" else np.float64
    out = np.zeros([b, o] + out_spatial, dtype=acc_t)
    for pos in np.ndindex(*out_spatial):
        sel = [slice(None), slice(None)]
        for i, w in enumerate(window):
            start = pos[i] * w.stride
            sel.append(slice(start, start + w.effective_window, w.window_dilation))
        patch = l[tuple(sel)]  # [B, C, *k]
        out[(slice(None), slice(None)) + pos] = np.tensordot(
            patch.astype(acc_t), r.astype(acc_t),
            axes=(list(range(1, 2 + nsp)), list(range(1, 2 + nsp))),
        )
    # Scatter canonical [B, O, *spatial] into labeled output dims:
    # result axis out_batch takes canonical axis 0, and so on.
    perm = [0] * out.ndim
    perm[cd.out_batch] = 0
    perm[cd.out_feature] = 1
    for i, d in enumerate(cd.out_spatial):
        perm[d] = 2 + i
    return np.transpose(out, perm).astype(lhs.dtype)


def evaluate_instruction(ins: Instruction, args: list[np.ndarray],
                         partition_id: Optional[int] = None) -> np.ndarray:
    """Evaluate one non-collective instruction on concrete arrays."""
    op = ins.opcode
    if op == Op.CONSTANT:
        return _cast(ins.attrs["literal"], ins.shape)
    if op == Op.IOTA:
        d = ins.attrs["iota_dimension"]
        vals = np.arange(ins.shape.dims[d], dtype=np_dtype(ins.shape.dtype))
        shape = [1] * ins.shape.rank
        shape[d] = ins.shape.dims[d]
        return np.broadcast_to(vals.reshape(shape), ins.shape.dims).copy()
    if op == Op.PARTITION_ID:
        if partition_id is None:
            raise EvalError("partition-id outside SPMD execution")
        return np.asarray(partition_id, dtype=np.int32)
    if op in ELEMENTWISE_UNARY:
        (a,) = args
        if op == Op.NEGATE:
            return -a if a.dtype.kind != "u" else (-a.astype(np.int64)).astype(a.dtype)
        if op == Op.EXP:
            return np.exp(a)
        return np.maximum(a, np.zeros((), dtype=a.dtype))
    if op in ELEMENTWISE_BINARY:
        a, b = args
        if op == Op.ADD:
            return a + b
        if op == Op.MULTIPLY:
            return a * b
        if op == Op.MAXIMUM:
            return np.maximum(a, b)
        if op == Op.SUBTRACT:
            return a - b
        if op == Op.DIVIDE:
            if a.dtype.kind in "iu":
                return _int_divide(a, b)
            with np.errstate(divide="ignore", invalid="ignore"):
                return a / b
        return _compare(ins.attrs["direction"], a, b)
    if op == Op.SELECT:
        pred, on_true, on_false = args
        return np.where(pred, on_true, on_false)
    if op == Op.BROADCAST:
        (a,) = args
        bdims = ins.attrs["broadcast_dims"]
        shape = [1] * ins.shape.rank
        for i, d in enumerate(bdims):
            shape[d] = a.shape[i]
        return np.broadcast_to(a.reshape(shape), ins.shape.dims).copy()
    if op == Op.RESHAPE:
        return args[0].reshape(ins.shape.dims)
    if op == Op.TRANSPOSE:
        return np.transpose(args[0], ins.attrs["permutation"])
    if op == Op.REVERSE:
        return np.flip(args[0], axis=tuple(ins.attrs["dims"])).copy()
    if op == Op.PAD:
        a, val = args
        return _pad(a, val, ins.attrs["low"], ins.attrs["high"], ins.attrs["interior"])
    if op == Op.SLICE:
        sel = tuple(
            slice(b, e, st)
            for b, e, st in zip(ins.attrs["starts"], ins.attrs["limits"],
                                ins.attrs["strides"])
        )
        return args[0][sel].copy()
    if op == Op.DYNAMIC_SLICE:
        a = args[0]
        sizes = ins.attrs["sizes"]
        starts = [int(np.asarray(s)) for s in args[1:]]
        sel = tuple(
            slice(max(0, min(st, n - sz)), max(0, min(st, n - sz)) + sz)
            for st, n, sz in zip(starts, a.shape, sizes)
        )
        return a[sel].copy()
    if op == Op.DYNAMIC_UPDATE_SLICE:
        a, upd = args[0].copy(), args[1]
        starts = [int(np.asarray(s)) for s in args[2:]]
        sel = tuple(
            slice(max(0, min(st, n - u)), max(0, min(st, n - u)) + u)
            for st, n, u in zip(starts, a.shape, upd.shape)
        )
        a[sel] = upd
        return a
    if op == Op.CONCAT:
        return np.concatenate(args, axis=ins.attrs["dim"])
    if op == Op.REDUCE:
        a, init = args
        kind = ins.attrs["kind"]
        rdims = sorted(ins.attrs["dims"])
        out = a
        for d in reversed(rdims):
            out = _REDUCE_FN[kind](out, axis=d)
        if kind == ReduceKind.SUM:
            out = out + init
        elif kind == ReduceKind.PROD:
            out = out * init
        elif kind == ReduceKind.MAX:
            out = np.maximum(out, init)
        else:
            out = np.minimum(out, init)
        return np.asarray(out, dtype=a.dtype)
    if op == Op.DOT:
        lhs, rhs = args
        lb, rb = list(ins.attrs["lhs_batch"]), list(ins.attrs["rhs_batch"])
        lc, rc = list(ins.attrs["lhs_contracting"]), list(ins.attrs["rhs_contracting"])
        acc_t = np.int64 if lhs.dtype.kind in "iu" else np.float64
        lfree = [i for i in range(lhs.ndim) if i not in lb and i not in lc]
        rfree = [i for i in range(rhs.ndim) if i not in rb and i not in rc]
        l = np.transpose(lhs, lb + lfree + lc).astype(acc_t)
        r = np.transpose(rhs, rb + rfree + rc).astype(acc_t)
        bshape = [lhs.shape[i] for i in lb]
        out = np.einsum(
            "...ik,...jk->...ij",
            l.reshape(bshape + [int(np.prod([lhs.shape[i] for i in lfree], dtype=int)),
                                int(np.prod([lhs.shape[i] for i in lc], dtype=int))]),
            r.reshape(bshape + [int(np.prod([rhs.shape[i] for i in rfree], dtype=int)),
                                int(np.prod([rhs.shape[i] for i in rc], dtype=int))]),
        )
        return out.reshape(ins.shape.dims).astype(lhs.dtype)
    if op == Op.CONVOLUTION:
        return _conv(args[0], args[1], ins.attrs["conv_dims"], ins.attrs["window"])
    if op == Op.ROTATE:
        return np.roll(args[0], -ins.attrs["amount"], axis=ins.attrs["dim"])
    if op == Op.SHIFT:
        a, fill = args
        d, amount = ins.attrs["dim"], ins.attrs["amount"]
        n = a.shape[d]
        out = np.full_like(a, fill)
        if amount >= 0:
            if amount < n:
                dst = [slice(None)] * a.ndim
                src = [slice(None)] * a.ndim
                dst[d] = slice(amount, n)
                src[d] = slice(0, n - amount)
                out[tuple(dst)] = a[tuple(src)]
        else:
            k = -amount
            if k < n:
                dst = [slice(None)] * a.ndim
                src = [slice(None)] * a.ndim
                dst[d] = slice(0, n - k)
                src[d] = slice(k, n)
                out[tuple(dst)] = a[tuple(src)]
        return out
    raise EvalError(f"cannot evaluate opcode {op.value}")


def evaluate_single(graph: Graph, inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Single-device reference evaluation; rejects SPMD-only opcodes."""
    env: dict[str, np.ndarray] = {}
    params = graph.parameters
    if len(inputs) != len(params):
        raise EvalError(f"expected {len(params)} inputs, got {len(inputs)}")
    for p, val in zip(params, inputs):
        env[p.id] = _cast(val, p.shape)
    for ins in graph.instructions:
        if ins.opcode in COLLECTIVES or ins.opcode == Op.PARTITION_ID:
            raise EvalError(f"{ins.id}: {ins.opcode.value} is SPMD-only")
        if ins.opcode == Op.PARAMETER:
            continue
        args = [env[o] for o in ins.operands]
        env[ins.id] = _cast(evaluate_instruction(ins, args), ins.shape)
    return [env[o] for o in graph.outputs]


def _check_subgroups(subgroups, devices) -> None:
    flat = [d for g in subgroups for d in g]
    if sorted(flat) != sorted(devices):
        raise SubgroupMismatch(
            f"subgroups {subgroups} do not partition devices {sorted(devices)}"
        )
    sizes = {len(g) for g in subgroups}
    if len(sizes) != 1:
        raise SubgroupMismatch(f"subgroups {subgroups} have unequal sizes")


def _collective(ins: Instruction, per_device: dict[int, np.ndarray],
                devices: Sequence[int]) -> dict[int, np.ndarray]:
    op = ins.opcode
    attrs = ins.attrs
    out: dict[int, np.ndarray] = {}
    if op == Op.COLLECTIVE_PERMUTE:
        pairs = attrs["pairs"]
        sources = [s for s, _ in pairs]
        targets = [t for _, t in pairs]
        if len(set(sources)) != len(sources) or len(set(targets)) != len(targets):
            raise SubgroupMismatch("collective-permute pairs must have distinct "
                                   "sources and distinct targets")
        by_target = {t: s for s, t in pairs}
        for d in devices:
            if d in by_target:
                out[d] = per_device[by_target[d]].copy()
            else:
                out[d] = np.zeros_like(per_device[d])
        return out
    subgroups = attrs["subgroups"]
    _check_subgroups(subgroups, devices)
    for group in subgroups:
        vals = [per_device[d] for d in group]
        if op == Op.ALL_REDUCE or op == Op.REDUCE_SCATTER:
            kind = attrs["kind"]
            acc = vals[0]
            for v in vals[1:]:
                if kind == ReduceKind.SUM:
                    acc = acc + v
                elif kind == ReduceKind.MAX:
                    acc = np.maximum(acc, v)
                elif kind == ReduceKind.MIN:
                    acc = np.minimum(acc, v)
                else:
                    acc = acc * v
            if op == Op.ALL_REDUCE:
                for d in group:
                    out[d] = acc.copy()
            else:
                d_ax = attrs["dim"]
                per = acc.shape[d_ax] // len(group)
                for i, d in enumerate(group):
                    sel = [slice(None)] * acc.ndim
                    sel[d_ax] = slice(i * per, (i + 1) * per)
                    out[d] = acc[tuple(sel)].copy()
        elif op == Op.ALL_GATHER:
            gathered = np.concatenate(vals, axis=attrs["dim"])
            for d in group:
                out[d] = gathered.copy()
        elif op == Op.ALL_TO_ALL:
            split, concat = attrs["split_dim"], attrs["concat_dim"]
            pieces = [np.array_split(v, len(group), axis=split) for v in vals]
            for i, d in enumerate(group):
                out[d] = np.concatenate([pieces[q][i] for q in range(len(group))],
                                        axis=concat)
        else:
            raise EvalError(f"unknown collective {op.value}")
    return out


def evaluate_spmd(
    program,
    per_device_inputs: Mapping[int, Sequence[np.ndarray]],
) -> dict[int, list[np.ndarray]]:
    """Lockstep evaluation of an SPMD program on all devices.

    ``program`` is an SpmdProgram (or any object with ``graph`` and
    ``num_partitions``). Inputs are shard-shaped per device.
    """
    graph: Graph = program.graph
    devices = list(range(program.num_partitions))
    envs: dict[int, dict[str, np.ndarray]] = {d: {} for d in devices}
    params = graph.parameters
    for d in devices:
        ins = per_device_inputs[d]
        if len(ins) != len(params):
            raise EvalError(f"device {d}: expected {len(params)} inputs")
        for p, val in zip(params, ins):
            envs[d][p.id] = _cast(val, p.shape)
    for ins in graph.instructions:
        if ins.opcode == Op.PARAMETER:
            continue
        if ins.opcode in COLLECTIVES:
            operand = {d: envs[d][ins.operands[0]] for d in devices}
            results = _collective(ins, operand, devices)
            for d in devices:
                envs[d][ins.id] = _cast(results[d], ins.shape)
        else:
            for d in devices:
                args = [envs[d][o] for o in ins.operands]
                envs[d][ins.id] = _cast(
                    evaluate_instruction(ins, args, partition_id=d), ins.shape
                )
    return {d: [envs[d][o] for o in graph.outputs] for d in devices}


@dataclasses.dataclass
class EquivalenceReport:
    passed: bool
    max_abs_error: float
    max_rel_error: float
    collective_counts: dict[str, int]
    details: list[str] = dataclasses.field(default_factory=list)


def verify_equivalence(
    graph: Graph,
    annotated_graph: Graph,
    num_devices: int,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    pad_value=0,
) -> EquivalenceReport:
    """Partition, execute on simulated devices, reassemble, compare to oracle."""
    from .partitioner import partition
    from .sharding import assemble_data, shard_data

    expected = evaluate_single(graph, inputs)
    program = partition(annotated_graph, num_devices)
    devices = list(range(num_devices))
    per_dev: dict[int, list[np.ndarray]] = {d: [] for d in devices}
    for p, val in zip(annotated_graph.parameters, inputs):
        s = p.sharding
        shards = shard_data(_cast(val, p.shape), s, pad_value=pad_value,
                            devices=devices)
        for d in devices:
            per_dev[d].append(shards[d])
    results = evaluate_spmd(program, per_dev)
    max_abs = 0.0
    max_rel = 0.0
    passed = True
    details = []
    for i, out_id in enumerate(graph.outputs):
        shape = graph.instr(out_id).shape
        out_sharding = program.output_shardings[i]
        shards = {d: results[d][i] for d in devices}
        actual = assemble_data(shards, out_sharding, shape, rtol=max(tolerance, 1e-6))
        exp = expected[i]
        if shape.dtype == DType.F32:
            abs_err = float(np.max(np.abs(actual - exp))) if exp.size else 0.0
            scale = float(np.max(np.abs(exp))) if exp.size else 0.0
            rel = abs_err / max(scale, 1.0)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                passed = False
                details.append(f"output {out_id}: rel error {rel} > {tolerance}")
        else:
            if not np.array_equal(actual, exp):
                passed = False
                diff = np.max(np.abs(actual.astype(np.int64) - exp.astype(np.int64)))
                max_abs = max(max_abs, float(diff))
                details.append(f"output {out_id}: integer mismatch")
    counts: dict[str, int] = {}
    for ins in program.graph.instructions:
        if ins.opcode in COLLECTIVES:
            counts[ins.opcode.value] = counts.get(ins.opcode.value, 0) + 1
    return EquivalenceReport(passed, max_abs, max_rel, counts, details)
