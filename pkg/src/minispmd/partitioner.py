"""Rewrites a fully annotated graph into a single per-device SPMD program.

Every value is materialized shard-shaped under its annotated sharding. Shard
sizes use the ceiling of size/shards, so the last shards along an unevenly
split dim carry padding whose contents are unspecified; handlers mask that
padding wherever it could leak into valid results (reductions, contractions,
windowed ops). All partition-dependent behavior flows through PartitionId:
per-device offsets are constant tables indexed by PartitionId, so the emitted
program text is identical for every device.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np

from .ir import (
    COLLECTIVES,
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    CompareDirection,
    ConvDims,
    DType,
    Graph,
    GraphBuilder,
    Instruction,
    Op,
    ReduceKind,
    Shape,
    WindowDim,
)
from .sharding import (
    Sharding,
    build_sharding_from_coords,
    np_dtype,
    shard_shape,
)
from .simulator import reduce_identity


class UnsupportedSharding(Exception):
    pass


class HaloTooLarge(Exception):
    pass


class UnsupportedConv(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class HaloSpec:
    """Halo sizes per boundary as a linear function a*i + b of partition i."""

    left_a: int
    left_b: int
    right_a: int
    right_b: int
    max_left: int
    max_right: int
    needs_mask: bool

    def left(self, i: int) -> int:
        return max(0, self.left_a * i + self.left_b)

    def right(self, i: int) -> int:
        return max(0, self.right_a * i + self.right_b)


def fit_linear(values: Sequence[int]) -> Optional[tuple[int, int]]:
    """Return (a, b) with values[i] == a*i + b for all i, else None."""
    if len(values) == 1:
        return (0, int(values[0]))
    a = int(values[1]) - int(values[0])
    b = int(values[0])
    if all(int(v) == a * i + b for i, v in enumerate(values)):
        return (a, b)
    return None


@dataclasses.dataclass(frozen=True)
class SpmdProgram:
    graph: Graph
    num_partitions: int
    mapping: dict
    param_shardings: tuple[Sharding, ...]
    output_shardings: tuple[Sharding, ...]


class PartitionContext:
    """Names the device group a subcomputation runs in.

    Logical partition IDs 0..n-1 map to physical device subgroups; composing
    contexts rewrites logical subgroups into per-parent-group physical lists.
    """

    def __init__(self, device_groups: Sequence[Sequence[int]],
                 parent: Optional["PartitionContext"] = None):
        self.device_groups = [list(g) for g in device_groups]
        self.parent = parent

    @staticmethod
    def root(num_devices: int) -> "PartitionContext":
        return PartitionContext([[d] for d in range(num_devices)])

    @property
    def num_logical(self) -> int:
        return len(self.device_groups)

    def physical_subgroups(self, logical_groups: Sequence[Sequence[int]]
                           ) -> list[list[int]]:
        """Rewrite subgroups of logical IDs to subgroups of physical devices.

        Each logical partition stands for a set of devices; corresponding
        positions across those sets form independent physical subgroups.
        """
        out = []
        for group in logical_groups:
            width = len(self.device_groups[group[0]])
            for k in range(width):
                out.append([self.device_groups[lg][k] for lg in group])
        return out

    def child(self, logical_groups: Sequence[Sequence[int]]
              ) -> "PartitionContext":
        """Context where each logical group becomes one new logical partition."""
        merged = []
        for group in logical_groups:
            devs = []
            for lg in group:
                devs.extend(self.device_groups[lg])
            merged.append(devs)
        return PartitionContext(merged, parent=self)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class _Partitioner:
    def __init__(self, graph: Graph, num_partitions: int):
        self.src = graph
        self.N = num_partitions
        self.b = GraphBuilder(graph.name + ".spmd", mesh=graph.mesh)
        self.values: dict[str, tuple[str, Sharding]] = {}
        self.mapping: dict[str, list[str]] = {}
        self._current: Optional[str] = None
        self._pid: Optional[str] = None
        self._tables: dict[tuple, str] = {}
        self._consts: dict[tuple, str] = {}

    # -- emission helpers ---------------------------------------------------

    def emit(self, opcode: Op, operands=(), attrs=None) -> str:
        new_id = self.b.add(opcode, operands, attrs)
        if self._current is not None:
            self.mapping.setdefault(self._current, []).append(new_id)
        return new_id

    def shape_of(self, new_id: str) -> Shape:
        return self.b._instrs[-1].shape if self.b._instrs[-1].id == new_id \
            else next(i.shape for i in self.b._instrs if i.id == new_id)

    def pid(self) -> str:
        if self._pid is None:
            self._pid = self.emit(Op.PARTITION_ID, (), {})
        return self._pid

    def const(self, value, dtype: DType) -> str:
        arr = np.asarray(value, dtype=np_dtype(dtype))
        key = (dtype, arr.shape, arr.tobytes())
        if key not in self._consts:
            self._consts[key] = self.emit(
                Op.CONSTANT, (), {"literal": arr, "shape": Shape(arr.shape, dtype)})
        return self._consts[key]

    def table_scalar(self, per_device: Sequence[int],
                     dtype: DType = DType.S32) -> str:
        """Scalar whose value on device d is per_device[d]."""
        vals = tuple(int(v) for v in per_device)
        key = (vals, dtype)
        if key not in self._tables:
            if len(set(vals)) == 1:
                self._tables[key] = self.const(vals[0], dtype)
            else:
                table = self.const(np.asarray(vals, dtype=np_dtype(dtype)),
                                   dtype)
                sl = self.emit(Op.DYNAMIC_SLICE, (table, self.pid()),
                               {"sizes": (1,)})
                self._tables[key] = self.emit(Op.RESHAPE, (sl,),
                                              {"out_dims": ()})
        return self._tables[key]

    def bcast(self, scalar_id: str, dims: tuple[int, ...]) -> str:
        if not dims:
            return scalar_id
        return self.emit(Op.BROADCAST, (scalar_id,),
                         {"out_dims": tuple(dims), "broadcast_dims": ()})

    def global_index(self, dims: tuple[int, ...], axis: int,
                     per_device_offsets: Sequence[int]) -> str:
        iota = self.emit(Op.IOTA, (), {"shape": Shape(dims, DType.S32),
                                       "iota_dimension": axis})
        off = self.bcast(self.table_scalar(per_device_offsets), dims)
        return self.emit(Op.ADD, (iota, off), {})

    def select_range(self, val_id: str, dims: tuple[int, ...], axis: int,
                     per_device_offsets: Sequence[int], low: int, high: int,
                     fill_scalar: str, dtype: DType) -> str:
        """Replace elements whose global index along axis falls outside
        [low, high) with the fill value."""
        gidx = self.global_index(dims, axis, per_device_offsets)
        fill = self.bcast(fill_scalar, dims)
        below = self.emit(Op.COMPARE, (gidx, self.bcast(
            self.const(high, DType.S32), dims)),
            {"direction": CompareDirection.LT})
        out = self.emit(Op.SELECT, (below, val_id, fill), {})
        if low > 0 or any(o < 0 for o in per_device_offsets):
            above = self.emit(Op.COMPARE, (gidx, self.bcast(
                self.const(low, DType.S32), dims)),
                {"direction": CompareDirection.GE})
            out = self.emit(Op.SELECT, (above, out, fill), {})
        return out

    # -- sharding bookkeeping ----------------------------------------------

    def offsets(self, full: tuple[int, ...], s: Sharding, dim: int) -> list[int]:
        c = _ceil_div(full[dim], s.tiles(dim))
        return [s.coord(d, dim) * c for d in range(self.N)]

    def mask_uneven(self, val_id: str, full: tuple[int, ...], s: Sharding,
                    fill_scalar: str, dtype: DType,
                    dims: Optional[Sequence[int]] = None) -> str:
        """Overwrite ceil-padding elements with the given identity value."""
        local = shard_shape(Shape(full, dtype), s).dims
        for d in (dims if dims is not None else range(len(full))):
            t = s.tiles(d)
            if t * _ceil_div(full[d], t) == full[d]:
                continue
            val_id = self.select_range(val_id, local, d, self.offsets(full, s, d),
                                       0, full[d], fill_scalar, dtype)
        return val_id

    @staticmethod
    def coords_equal(a: Sharding, b: Sharding, devices) -> bool:
        if a.is_replicated and b.is_replicated:
            return True
        ra = 0 if a.is_replicated else a.data_rank
        rb = 0 if b.is_replicated else b.data_rank
        if ra and rb and ra != rb:
            return False
        rank = max(ra, rb)
        for d in range(rank):
            if a.tiles(d) != b.tiles(d):
                return False
            if a.tiles(d) > 1:
                for dev in devices:
                    if a.coord(dev, d) != b.coord(dev, d):
                        return False
        return True

    # -- resharding ---------------------------------------------------------

    def reshard(self, val_id: str, full_shape: Shape, from_s: Sharding,
                to_s: Sharding) -> str:
        devices = range(self.N)
        if self.coords_equal(from_s, to_s, devices):
            return val_id
        out = self._try_all_to_all(val_id, full_shape, from_s, to_s)
        if out is not None:
            return out
        out = self._try_collective_permute(val_id, full_shape, from_s, to_s)
        if out is not None:
            return out
        full = self.gather_full(val_id, full_shape, from_s)
        return self.localize(full, full_shape, to_s)

    def _try_all_to_all(self, val_id, full_shape, from_s, to_s):
        rank = full_shape.rank
        for i in range(rank):
            t = from_s.tiles(i)
            if t <= 1 or to_s.tiles(i) != 1:
                continue
            for j in range(rank):
                if j == i or to_s.tiles(j) != t or from_s.tiles(j) != 1:
                    continue
                if full_shape.dims[i] % t or full_shape.dims[j] % t:
                    continue
                if any(from_s.tiles(d) != to_s.tiles(d)
                       for d in range(rank) if d not in (i, j)):
                    continue
                ok = True
                for dev in range(self.N):
                    if to_s.coord(dev, j) != from_s.coord(dev, i):
                        ok = False
                        break
                    for d in range(rank):
                        if d in (i, j) or from_s.tiles(d) == 1:
                            continue
                        if from_s.coord(dev, d) != to_s.coord(dev, d):
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    continue
                if from_s.replication_factor != to_s.replication_factor:
                    continue
                groups = tuple(tuple(g) for g in from_s.dim_groups(i))
                return self.emit(Op.ALL_TO_ALL, (val_id,),
                                 {"split_dim": j, "concat_dim": i,
                                  "subgroups": groups})
        return None

    def _try_collective_permute(self, val_id, full_shape, from_s, to_s):
        rank = full_shape.rank
        for d in range(rank):
            if from_s.tiles(d) != to_s.tiles(d):
                return None
        # Match every target device to a distinct source holding its shard.
        buckets: dict[tuple, list[int]] = {}
        for dev in range(self.N):
            key = tuple(from_s.coord(dev, d) for d in range(rank))
            buckets.setdefault(key, []).append(dev)
        wants: dict[tuple, list[int]] = {}
        for dev in range(self.N):
            key = tuple(to_s.coord(dev, d) for d in range(rank))
            wants.setdefault(key, []).append(dev)
        if set(buckets) != set(wants):
            return None
        pairs = []
        for key, targets in sorted(wants.items()):
            sources = buckets[key]
            if len(sources) != len(targets):
                return None
            fixed = [d for d in targets if d in sources]
            rem_src = [d for d in sources if d not in fixed]
            rem_tgt = [d for d in targets if d not in fixed]
            pairs.extend((d, d) for d in fixed)
            pairs.extend(zip(rem_src, rem_tgt))
        pairs.sort()
        if all(s == t for s, t in pairs):
            return val_id
        return self.emit(Op.COLLECTIVE_PERMUTE, (val_id,),
                         {"pairs": tuple(pairs)})

    def gather_full(self, val_id: str, full_shape: Shape,
                    from_s: Sharding) -> str:
        """AllGather every sharded dim, slicing off ceil padding."""
        cur = from_s
        cur_local = shard_shape(full_shape, from_s).dims
        while cur.sharded_dims:
            d = cur.sharded_dims[0]
            t = cur.tiles(d)
            groups = tuple(tuple(g) for g in cur.dim_groups(d))
            val_id = self.emit(Op.ALL_GATHER, (val_id,),
                               {"dim": d, "subgroups": groups})
            gathered = list(cur_local)
            gathered[d] *= t
            if gathered[d] != full_shape.dims[d]:
                starts = [0] * full_shape.rank
                limits = list(gathered)
                limits[d] = full_shape.dims[d]
                val_id = self.emit(Op.SLICE, (val_id,),
                                   {"starts": tuple(starts),
                                    "limits": tuple(limits),
                                    "strides": (1,) * full_shape.rank})
            gathered[d] = full_shape.dims[d]
            cur_local = tuple(gathered)
            cur = cur.project({x: x for x in cur.sharded_dims if x != d},
                              full_shape.rank)
        return val_id

    def localize(self, val_id: str, full_shape: Shape, to_s: Sharding) -> str:
        """From a replicated full value to its local shard under to_s."""
        if not to_s.sharded_dims:
            return val_id
        dims = list(full_shape.dims)
        pad_high = [0] * full_shape.rank
        for d in to_s.sharded_dims:
            t = to_s.tiles(d)
            c = _ceil_div(dims[d], t)
            pad_high[d] = t * c - dims[d]
        if any(pad_high):
            zero = self.const(0, full_shape.dtype)
            val_id = self.emit(Op.PAD, (val_id, zero),
                               {"low": (0,) * full_shape.rank,
                                "high": tuple(pad_high),
                                "interior": (0,) * full_shape.rank})
            dims = [n + p for n, p in zip(dims, pad_high)]
        starts = []
        sizes = []
        for d in range(full_shape.rank):
            t = to_s.tiles(d)
            c = _ceil_div(full_shape.dims[d], t)
            sizes.append(c if t > 1 else full_shape.dims[d])
            if t > 1:
                starts.append(self.table_scalar(
                    self.offsets(full_shape.dims, to_s, d)))
            else:
                starts.append(self.const(0, DType.S32))
        return self.emit(Op.DYNAMIC_SLICE, tuple([val_id] + starts),
                         {"sizes": tuple(sizes)})

    # -- per-instruction handlers -------------------------------------------

    def run(self) -> SpmdProgram:
        param_shardings = []
        for ins in self.src.instructions:
            self._current = ins.id
            if ins.sharding is None:
                raise UnsupportedSharding(f"{ins.id} is not annotated")
            if ins.opcode in COLLECTIVES:
                raise UnsupportedSharding(
                    f"{ins.id}: input graph must not contain collectives")
            handler = self._handlers().get(ins.opcode)
            if handler is None:
                raise UnsupportedSharding(
                    f"{ins.id}: cannot partition opcode {ins.opcode.value}")
            handler(ins)
            if ins.opcode == Op.PARAMETER:
                param_shardings.append(ins.sharding)
        self._current = None
        outputs = [self.values[o][0] for o in self.src.outputs]
        output_shardings = tuple(self.values[o][1] for o in self.src.outputs)
        graph = self.b.build(outputs)
        graph = _cleanup(graph)
        return SpmdProgram(graph, self.N, dict(self.mapping),
                          tuple(param_shardings), output_shardings)

    def _handlers(self):
        h = {
            Op.PARAMETER: self.h_parameter,
            Op.CONSTANT: self.h_constant,
            Op.IOTA: self.h_iota,
            Op.SELECT: self.h_elementwise,
            Op.BROADCAST: self.h_broadcast,
            Op.TRANSPOSE: self.h_transpose,
            Op.RESHAPE: self.h_reshape,
            Op.REVERSE: self.h_reverse,
            Op.PAD: self.h_pad,
            Op.SLICE: self.h_slice,
            Op.CONCAT: self.h_concat,
            Op.DYNAMIC_SLICE: self.h_dynamic_slice,
            Op.DYNAMIC_UPDATE_SLICE: self.h_dynamic_update_slice,
            Op.REDUCE: self.h_reduce,
            Op.DOT: self.h_dot,
            Op.CONVOLUTION: self.h_convolution,
            Op.ROTATE: self.h_rotate,
            Op.SHIFT: self.h_shift,
        }
        for op in ELEMENTWISE_UNARY | ELEMENTWISE_BINARY:
            h[op] = self.h_elementwise
        return h

    def operand(self, ins: Instruction, k: int,
                target: Optional[Sharding] = None) -> str:
        op_id = ins.operands[k]
        val, s = self.values[op_id]
        if target is None:
            return val
        src = self.src.instr(op_id)
        return self.reshard(val, src.shape, s, target)

    def set_result(self, ins: Instruction, new_id: str,
                   sharding: Optional[Sharding] = None):
        self.values[ins.id] = (new_id, sharding or ins.sharding)

    def finish(self, ins: Instruction, new_id: str, cur_s: Sharding):
        """Reshard an intermediate result to the annotated sharding."""
        new_id = self.reshard(new_id, ins.shape, cur_s, ins.sharding)
        self.set_result(ins, new_id)

    # .. sources ............................................................

    def h_parameter(self, ins: Instruction):
        local = shard_shape(ins.shape, ins.sharding)
        new_id = self.b.add(Op.PARAMETER,
                            attrs={"index": ins.attrs["index"], "shape": local})
        self.mapping.setdefault(ins.id, []).append(new_id)
        self.set_result(ins, new_id)

    def h_constant(self, ins: Instruction):
        lit = np.asarray(ins.attrs["literal"], dtype=np_dtype(ins.shape.dtype))
        full = self.emit(Op.CONSTANT, (),
                         {"literal": lit, "shape": ins.shape})
        self.set_result(ins, self.localize(full, ins.shape, ins.sharding))

    def h_iota(self, ins: Instruction):
        s = ins.sharding
        local = shard_shape(ins.shape, s).dims
        axis = ins.attrs["iota_dimension"]
        iota = self.emit(Op.IOTA, (), {
            "shape": Shape(local, ins.shape.dtype), "iota_dimension": axis})
        if s.tiles(axis) > 1:
            offs = self.offsets(ins.shape.dims, s, axis)
            off = self.bcast(self.table_scalar(offs, ins.shape.dtype), local)
            iota = self.emit(Op.ADD, (iota, off), {})
        self.set_result(ins, iota)

    # .. elementwise ........................................................

    def h_elementwise(self, ins: Instruction):
        so = ins.sharding
        args = [self.operand(ins, k, so) for k in range(len(ins.operands))]
        if ins.opcode == Op.DIVIDE and ins.shape.dtype.is_integer:
            # Padded divisor elements may be zero; force them to 1.
            one = self.const(1, ins.shape.dtype)
            args[1] = self.mask_uneven(args[1], ins.shape.dims, so, one,
                                       ins.shape.dtype)
        attrs = dict(ins.attrs)
        attrs.pop("shape", None)
        self.set_result(ins, self.emit(ins.opcode, tuple(args), attrs))

    # .. structural .........................................................

    def h_broadcast(self, ins: Instruction):
        so = ins.sharding
        bdims = tuple(ins.attrs["broadcast_dims"])
        op_rank = self.src.instr(ins.operands[0]).shape.rank
        target = so.project({bdims[i]: i for i in range(len(bdims))}, op_rank)
        val = self.operand(ins, 0, target)
        local_out = shard_shape(ins.shape, so).dims
        out = self.emit(Op.BROADCAST, (val,),
                        {"out_dims": local_out, "broadcast_dims": bdims})
        self.set_result(ins, out)

    def h_transpose(self, ins: Instruction):
        so = ins.sharding
        perm = tuple(ins.attrs["permutation"])
        target = so.project({j: perm[j] for j in range(len(perm))}, len(perm))
        val = self.operand(ins, 0, target)
        out = self.emit(Op.TRANSPOSE, (val,), {"permutation": perm})
        self.set_result(ins, out)

    def h_dynamic_slice(self, ins: Instruction):
        rank = ins.shape.rank
        src_shape = self.src.instr(ins.operands[0]).shape
        sizes = tuple(ins.attrs["sizes"])
        full_dims = [d for d in range(rank) if sizes[d] == src_shape.dims[d]]
        inter = ins.sharding.project({d: d for d in full_dims}, rank)
        val = self.operand(ins, 0, inter)
        starts = [self.operand(ins, 1 + d, Sharding.replicated())
                  for d in range(rank)]
        local = shard_shape(src_shape, inter).dims
        local_sizes = tuple(local[d] if d in full_dims else sizes[d]
                            for d in range(rank))
        out = self.emit(Op.DYNAMIC_SLICE, tuple([val] + starts),
                        {"sizes": local_sizes})
        self.finish(ins, out, inter)

    def h_dynamic_update_slice(self, ins: Instruction):
        rank = ins.shape.rank
        upd_shape = self.src.instr(ins.operands[1]).shape
        full_dims = [d for d in range(rank)
                     if upd_shape.dims[d] == ins.shape.dims[d]]
        inter = ins.sharding.project({d: d for d in full_dims}, rank)
        val = self.operand(ins, 0, inter)
        upd = self.operand(ins, 1, inter.project(
            {d: d for d in full_dims}, rank))
        starts = [self.operand(ins, 2 + d, Sharding.replicated())
                  for d in range(rank)]
        out = self.emit(Op.DYNAMIC_UPDATE_SLICE, tuple([val, upd] + starts), {})
        self.finish(ins, out, inter)

    def h_reduce(self, ins: Instruction):
        so = ins.sharding
        rdims = sorted(ins.attrs["dims"])
        kind: ReduceKind = ins.attrs["kind"]
        op0 = self.src.instr(ins.operands[0])
        op_rank = op0.shape.rank
        kept = [d for d in range(op_rank) if d not in rdims]
        s_op = self.values[ins.operands[0]][1]
        # Keep the operand's sharding on reduced dims; take kept dims from the
        # result annotation.
        counts = {}
        coord_maps = {}
        for pos, d in enumerate(kept):
            counts[d] = so.tiles(pos)
        for d in rdims:
            counts[d] = s_op.tiles(d)
        for dev in range(self.N):
            cm = {}
            for pos, d in enumerate(kept):
                cm[d] = so.coord(dev, pos)
            for d in rdims:
                cm[d] = s_op.coord(dev, d)
            coord_maps[dev] = cm
        target = self._build_target(op_rank, counts, coord_maps)
        if target is None:
            for d in rdims:
                counts[d] = 1
                for dev in range(self.N):
                    coord_maps[dev][d] = 0
            target = self._build_target(op_rank, counts, coord_maps)
        if target is None:
            target = Sharding.replicated()
        val = self.operand(ins, 0, target)
        init = self.operand(ins, 1, Sharding.replicated())
        dtype = op0.shape.dtype
        uneven_rdims = [d for d in rdims if target.tiles(d) > 1 and
                        target.tiles(d) * _ceil_div(op0.shape.dims[d],
                                                    target.tiles(d))
                        != op0.shape.dims[d]]
        if uneven_rdims:
            ident = self.const(reduce_identity(kind, dtype), dtype)
            val = self.mask_uneven(val, op0.shape.dims, target, ident, dtype,
                                   uneven_rdims)
        out = self.emit(Op.REDUCE, (val, init),
                        {"kind": kind, "dims": tuple(rdims)})
        t_r = math.prod(target.tiles(d) for d in rdims)
        result_s = target.project({d: pos for pos, d in enumerate(kept)},
                                  ins.shape.rank)
        if t_r > 1:
            groups = self._reduction_groups(
                target, key_dims=kept, vary_dims=rdims)
            out = self.emit(Op.ALL_REDUCE, (out,),
                            {"kind": kind, "subgroups": groups})
        self.finish(ins, out, result_s)

    def _build_target(self, rank, counts, coord_maps) -> Optional[Sharding]:
        """counts: {dim: tiles}; coord_maps: {device: {dim: coord}}."""
        eff = {d: c for d, c in counts.items() if c > 1}
        if not eff:
            return Sharding.replicated()
        dim_major = {d: {dev: coord_maps[dev].get(d, 0)
                         for dev in range(self.N)} for d in eff}
        return build_sharding_from_coords(rank, eff, dim_major,
                                          list(range(self.N)))

    def _reduction_groups(self, s: Sharding, key_dims, vary_dims):
        """Groups covering each combination of vary-dim coords exactly once,
        holding key-dim coords fixed."""
        buckets: dict[tuple, list[int]] = {}
        for dev in range(self.N):
            key = tuple(s.coord(dev, d) for d in key_dims)
            buckets.setdefault(key, []).append(dev)
        groups = []
        for key in sorted(buckets):
            members = sorted(
                buckets[key],
                key=lambda dev: (tuple(s.coord(dev, d) for d in vary_dims), dev))
            t = math.prod(s.tiles(d) for d in vary_dims)
            width = len(members) // t
            for k in range(width):
                groups.append(tuple(members[k::width]))
        return tuple(sorted(groups))

    # .. dot ...............................................................

    def h_dot(self, ins: Instruction):
        so = ins.sharding
        lhs_ins = self.src.instr(ins.operands[0])
        rhs_ins = self.src.instr(ins.operands[1])
        lb = list(ins.attrs["lhs_batch"])
        rb = list(ins.attrs["rhs_batch"])
        lc = list(ins.attrs["lhs_contracting"])
        rc = list(ins.attrs["rhs_contracting"])
        lrank, rrank = lhs_ins.shape.rank, rhs_ins.shape.rank
        lfree = [i for i in range(lrank) if i not in lb and i not in lc]
        rfree = [i for i in range(rrank) if i not in rb and i not in rc]
        # out dims: [batch..., lfree..., rfree...]
        out_of_l = {d: pos for pos, d in enumerate(lb)}
        out_of_l.update({d: len(lb) + pos for pos, d in enumerate(lfree)})
        out_of_r = {d: pos for pos, d in enumerate(rb)}
        out_of_r.update({d: len(lb) + len(lfree) + pos
                         for pos, d in enumerate(rfree)})

        sl = self.values[ins.operands[0]][1]
        sr = self.values[ins.operands[1]][1]
        # Agreed contracting tiling between the operands as currently stored.
        c_tiles = []
        agreed = True
        for dl, dr in zip(lc, rc):
            t = sl.tiles(dl)
            if t != sr.tiles(dr):
                agreed = False
                break
            if t > 1 and any(sl.coord(dev, dl) != sr.coord(dev, dr)
                             for dev in range(self.N)):
                agreed = False
                break
            c_tiles.append(t)
        t_c = math.prod(c_tiles) if agreed else 1
        if not agreed:
            c_tiles = [1] * len(lc)
        # Per-device contracting coords as currently stored on the operands;
        # ReduceScatter is only worthwhile when an output dim matches these
        # coords exactly (no resharding of the partial sums' layout).
        existing_cc = {dev: tuple(sl.coord(dev, dl) for dl in lc)
                       for dev in range(self.N)} if t_c > 1 else None

        plan = self._plan_dot(ins, so, t_c, c_tiles, out_of_l, out_of_r,
                              lb, rb, lc, rc, lrank, rrank, lfree, rfree,
                              existing_cc)
        if plan is None and t_c > 1:
            t_c, c_tiles = 1, [1] * len(lc)
            plan = self._plan_dot(ins, so, t_c, c_tiles, out_of_l, out_of_r,
                                  lb, rb, lc, rc, lrank, rrank, lfree, rfree,
                                  None)
        if plan is None:
            # Fully replicated fallback.
            lhs = self.gather_full(self.values[ins.operands[0]][0],
                                   lhs_ins.shape, sl)
            rhs = self.gather_full(self.values[ins.operands[1]][0],
                                   rhs_ins.shape, sr)
            out = self.emit(Op.DOT, (lhs, rhs), dict(ins.attrs))
            self.set_result(ins, self.localize(out, ins.shape, so))
            return

        target_l, target_r, scatter_dim, red_groups, result_s = plan
        lhs = self.operand(ins, 0, target_l)
        rhs = self.operand(ins, 1, target_r)
        uneven_c = [d for d, t in zip(lc, c_tiles) if t > 1 and
                    t * _ceil_div(lhs_ins.shape.dims[d], t)
                    != lhs_ins.shape.dims[d]]
        if uneven_c:
            zero = self.const(0, lhs_ins.shape.dtype)
            lhs = self.mask_uneven(lhs, lhs_ins.shape.dims, target_l, zero,
                                   lhs_ins.shape.dtype, uneven_c)
        out = self.emit(Op.DOT, (lhs, rhs), dict(ins.attrs))
        kind = ReduceKind.SUM
        if t_c > 1:
            if scatter_dim is not None:
                out = self.emit(Op.REDUCE_SCATTER, (out,),
                                {"kind": kind, "dim": scatter_dim,
                                 "subgroups": red_groups})
            else:
                out = self.emit(Op.ALL_REDUCE, (out,),
                                {"kind": kind, "subgroups": red_groups})
        self.finish(ins, out, result_s)

    def _plan_dot(self, ins, so, t_c, c_tiles, out_of_l, out_of_r,
                  lb, rb, lc, rc, lrank, rrank, lfree, rfree,
                  existing_cc=None):
        """Build operand targets + reduction plan; None if coords don't form
        valid shardings."""
        out_rank = ins.shape.rank
        scatter_dim = None
        contract_coord = None  # dev -> per-contracting-dim coords
        if t_c > 1:
            # Prefer ReduceScatter into a result dim sharded exactly t_c ways,
            # but only when its per-device coords line up with the operands'
            # contracting coords; otherwise the partial sums live on the wrong
            # devices and a plain AllReduce is the right reduction.
            for j in range(out_rank):
                if so.tiles(j) != t_c or ins.shape.dims[j] % t_c != 0:
                    continue
                if existing_cc is not None and any(
                        self._unravel(so.coord(dev, j), c_tiles)
                        != existing_cc[dev] for dev in range(self.N)):
                    continue
                scatter_dim = j
                break
            if scatter_dim is not None:
                def coord_fn(dev):
                    return self._unravel(so.coord(dev, scatter_dim), c_tiles)
            else:
                r_so = self.N // math.prod(
                    so.tiles(d) for d in range(ins.shape.rank))
                if r_so % t_c != 0:
                    return None
                repl_slot = self._replication_slots(so)

                def coord_fn(dev):
                    return self._unravel(repl_slot[dev] % t_c, c_tiles)
            contract_coord = {dev: coord_fn(dev) for dev in range(self.N)}

        def build_operand(rank, batch, contracting, out_map):
            counts = {}
            coord_maps = {dev: {} for dev in range(self.N)}
            for d, out_d in out_map.items():
                if scatter_dim is not None and out_d == scatter_dim:
                    continue
                counts[d] = so.tiles(out_d)
                for dev in range(self.N):
                    coord_maps[dev][d] = so.coord(dev, out_d)
            for pos, d in enumerate(contracting):
                counts[d] = c_tiles[pos]
                for dev in range(self.N):
                    coord_maps[dev][d] = (contract_coord[dev][pos]
                                          if t_c > 1 else 0)
            return self._build_target(rank, counts, coord_maps)

        target_l = build_operand(lrank, lb, lc, out_of_l)
        target_r = build_operand(rrank, rb, rc, out_of_r)
        if target_l is None or target_r is None:
            return None

        # Result sharding right after the local dot (+ reduction step).
        if t_c > 1:
            key_dims = [d for d in range(out_rank)
                        if so.tiles(d) > 1 and d != scatter_dim]
            buckets: dict[tuple, list[int]] = {}
            for dev in range(self.N):
                key = tuple(so.coord(dev, d) for d in key_dims)
                buckets.setdefault(key, []).append(dev)
            groups = []
            for key in sorted(buckets):
                if scatter_dim is not None:
                    members = sorted(
                        buckets[key],
                        key=lambda dev: (so.coord(dev, scatter_dim), dev))
                else:
                    members = sorted(
                        buckets[key],
                        key=lambda dev: (contract_coord[dev], dev))
                t = t_c
                if len(members) % t:
                    return None
                width = len(members) // t
                for k in range(width):
                    group = tuple(members[k::width])
                    # Each group must cover every contracting coord once.
                    seen = [contract_coord[dev] for dev in group]
                    if len(set(seen)) != t:
                        return None
                    groups.append(group)
            red_groups = tuple(sorted(groups))
        else:
            red_groups = ()
        result_s = so
        return target_l, target_r, scatter_dim, red_groups, result_s

    @staticmethod
    def _unravel(idx: int, tiles: Sequence[int]) -> tuple[int, ...]:
        coords = []
        for t in reversed(tiles):
            coords.append(idx % t)
            idx //= t
        return tuple(reversed(coords))

    def _replication_slots(self, s: Sharding) -> dict[int, int]:
        """Index of each device within its replication subgroup."""
        slots = {}
        if s.tile_dims is None:
            for i, dev in enumerate(range(self.N)):
                slots[dev] = i
            return slots
        for group in s.replication_groups():
            for i, dev in enumerate(sorted(group)):
                slots[dev] = i
        return slots

    # .. windowed / data formatting (defined in part 2) ....................

    def h_reshape(self, ins: Instruction):
        from . import formatting
        formatting.handle_reshape(self, ins)

    def h_reverse(self, ins: Instruction):
        from . import formatting
        formatting.handle_reverse(self, ins)

    def h_pad(self, ins: Instruction):
        from . import formatting
        formatting.handle_pad(self, ins)

    def h_slice(self, ins: Instruction):
        from . import formatting
        formatting.handle_slice(self, ins)

    def h_concat(self, ins: Instruction):
        from . import formatting
        formatting.handle_concat(self, ins)

    def h_convolution(self, ins: Instruction):
        from . import formatting
        formatting.handle_convolution(self, ins)

    def h_rotate(self, ins: Instruction):
        from . import formatting
        formatting.handle_rotate(self, ins)

    def h_shift(self, ins: Instruction):
        from . import formatting
        formatting.handle_shift(self, ins)


# ---------------------------------------------------------------------------
# Cleanup + public API
# ---------------------------------------------------------------------------


def _cleanup(graph: Graph) -> Graph:
    """Local simplifications + dead-code elimination."""
    by_id = graph.by_id
    replace: dict[str, str] = {}

    def resolve(i):
        while i in replace:
            i = replace[i]
        return i

    kept = []
    for ins in graph.instructions:
        operands = tuple(resolve(o) for o in ins.operands)
        if ins.opcode == Op.SELECT:
            pred = by_id.get(operands[0])
            if pred is not None and pred.opcode == Op.CONSTANT:
                lit = np.asarray(pred.attrs["literal"])
                if lit.size and lit.all():
                    replace[ins.id] = operands[1]
                    continue
                if lit.size and not lit.any():
                    replace[ins.id] = operands[2]
                    continue
        if ins.opcode == Op.CONCAT:
            nonempty = tuple(
                o for o in operands
                if by_id[o].shape.dims[ins.attrs["dim"]] > 0)
            if len(nonempty) == 1:
                replace[ins.id] = nonempty[0]
                continue
            if len(nonempty) != len(operands):
                operands = nonempty
        if operands != ins.operands:
            ins = dataclasses.replace(ins, operands=operands)
        kept.append(ins)
        by_id[ins.id] = ins

    outputs = tuple(resolve(o) for o in graph.outputs)
    live = set(outputs)
    for ins in reversed(kept):
        if ins.id in live:
            live.update(ins.operands)
    final = tuple(i for i in kept
                  if i.id in live or i.opcode == Op.PARAMETER)
    return Graph(graph.name, final, outputs, graph.mesh)


def partition(graph: Graph, num_partitions: int) -> SpmdProgram:
    """Rewrite an annotated graph into a per-device SPMD program."""
    from .formatting import detect_and_rotate
    graph = detect_and_rotate(graph)
    for ins in graph.instructions:
        if ins.sharding is None:
            raise UnsupportedSharding(
                f"{ins.id}: partition requires a fully annotated graph")
    return _Partitioner(graph, num_partitions).run()


def collective_stats(program: SpmdProgram) -> dict:
    """Collective counts and exchanged bytes for the emitted program."""
    counts: dict[str, int] = {}
    bytes_total = 0
    per_bytes: dict[str, int] = {}
    for ins in program.graph.instructions:
        if ins.opcode not in COLLECTIVES:
            continue
        name = ins.opcode.value
        counts[name] = counts.get(name, 0) + 1
        elem_size = np_dtype(ins.shape.dtype)().itemsize
        if ins.opcode == Op.COLLECTIVE_PERMUTE:
            participants = len(ins.attrs["pairs"])
        else:
            participants = sum(len(g) for g in ins.attrs["subgroups"])
        volume = ins.shape.num_elements * elem_size * participants
        per_bytes[name] = per_bytes.get(name, 0) + volume
        bytes_total += volume
    return {"counts": counts, "bytes": per_bytes, "total_bytes": bytes_total}
