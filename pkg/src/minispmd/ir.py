"""Tensor IR: shapes, opcodes, instructions, graphs, validation and shape inference.

All values are statically shaped dense tensors. Graphs are SSA: every
instruction's operands must be defined earlier in the instruction list.
Graphs are treated as immutable after construction; passes build new graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:
    from .sharding import DeviceMesh, Sharding


class DType(Enum):
    F32 = "f32"
    S32 = "s32"
    U32 = "u32"
    PRED = "pred"

    @property
    def is_integer(self) -> bool:
        return self in (DType.S32, DType.U32)


@dataclass(frozen=True)
class Shape:
    dims: tuple[int, ...]
    dtype: DType = DType.F32

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d < 0 for d in self.dims):
            raise ValueError(f"negative dimension in shape {self.dims}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def num_elements(self) -> int:
        return math.prod(self.dims)

    def __str__(self) -> str:
        return f"{self.dtype.value}[{','.join(str(d) for d in self.dims)}]"


class Op(Enum):
    PARAMETER = "parameter"
    CONSTANT = "constant"
    IOTA = "iota"
    PARTITION_ID = "partition-id"
    # Elementwise unary.
    NEGATE = "negate"
    EXP = "exp"
    RELU = "relu"
    # Elementwise binary.
    ADD = "add"
    MULTIPLY = "multiply"
    MAXIMUM = "maximum"
    SUBTRACT = "subtract"
    DIVIDE = "divide"
    COMPARE = "compare"
    SELECT = "select"
    # Shape ops.
    BROADCAST = "broadcast"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    REVERSE = "reverse"
    PAD = "pad"
    SLICE = "slice"
    DYNAMIC_SLICE = "dynamic-slice"
    DYNAMIC_UPDATE_SLICE = "dynamic-update-slice"
    CONCAT = "concat"
    REDUCE = "reduce"
    DOT = "dot"
    CONVOLUTION = "convolution"
    # Internal data-movement op introduced by the rotate pre-pass.
    ROTATE = "rotate"
    SHIFT = "shift"
    # Collectives (partitioner output only).
    ALL_REDUCE = "all-reduce"
    ALL_GATHER = "all-gather"
    REDUCE_SCATTER = "reduce-scatter"
    ALL_TO_ALL = "all-to-all"
    COLLECTIVE_PERMUTE = "collective-permute"


ELEMENTWISE_UNARY = frozenset({Op.NEGATE, Op.EXP, Op.RELU})
ELEMENTWISE_BINARY = frozenset(
    {Op.ADD, Op.MULTIPLY, Op.MAXIMUM, Op.SUBTRACT, Op.DIVIDE, Op.COMPARE}
)
COLLECTIVES = frozenset(
    {Op.ALL_REDUCE, Op.ALL_GATHER, Op.REDUCE_SCATTER, Op.ALL_TO_ALL, Op.COLLECTIVE_PERMUTE}
)


class ReduceKind(Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"
    PROD = "prod"


class CompareDirection(Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"


@dataclass(frozen=True)
class WindowDim:
    """Per-spatial-dimension window configuration for Convolution."""

    size: int
    stride: int = 1
    padding_low: int = 0
    padding_high: int = 0
    base_dilation: int = 1
    window_dilation: int = 1

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ValueError("window size and stride must be >= 1")
        if self.base_dilation < 1 or self.window_dilation < 1:
            raise ValueError("dilation factors must be >= 1")
        if self.padding_low < 0 or self.padding_high < 0:
            raise ValueError("padding must be >= 0")

    @property
    def effective_window(self) -> int:
        return (self.size - 1) * self.window_dilation + 1

    def dilated_base(self, n: int) -> int:
        return (n - 1) * self.base_dilation + 1 if n > 0 else 0

    def output_size(self, n: int) -> int:
        padded = self.dilated_base(n) + self.padding_low + self.padding_high
        return (padded - self.effective_window) // self.stride + 1


@dataclass(frozen=True)
class ConvDims:
    """Dimension labels for Convolution operands and output."""

    lhs_batch: int
    lhs_feature: int
    lhs_spatial: tuple[int, ...]
    rhs_in_feature: int
    rhs_out_feature: int
    rhs_spatial: tuple[int, ...]
    out_batch: int
    out_feature: int
    out_spatial: tuple[int, ...]


class IncompatibleShapes(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Instruction:
    id: str
    opcode: Op
    operands: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    shape: Shape = Shape((), DType.F32)
    sharding: Optional[Sharding] = None

    def with_sharding(self, sharding: Optional[Sharding]) -> "Instruction":
        return replace(self, sharding=sharding)


@dataclass(frozen=True, eq=False)
class Graph:
    name: str
    instructions: tuple[Instruction, ...]
    outputs: tuple[str, ...]
    mesh: Optional[DeviceMesh] = None

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def instr(self, id: str) -> Instruction:
        for ins in self.instructions:
            if ins.id == id:
                return ins
        raise KeyError(id)

    @property
    def by_id(self) -> dict[str, Instruction]:
        return {ins.id: ins for ins in self.instructions}

    @property
    def parameters(self) -> tuple[Instruction, ...]:
        params = [i for i in self.instructions if i.opcode == Op.PARAMETER]
        params.sort(key=lambda i: i.attrs["index"])
        return tuple(params)


def _elementwise_shape(op: Op, operand_shapes: Sequence[Shape]) -> Shape:
    s0 = operand_shapes[0]
    for s in operand_shapes[1:]:
        if s.dims != s0.dims:
            raise IncompatibleShapes(f"{op.value}: mismatched dims {s.dims} vs {s0.dims}")
        if s.dtype != s0.dtype:
            raise IncompatibleShapes(f"{op.value}: mismatched dtypes")
    if op == Op.COMPARE:
        return Shape(s0.dims, DType.PRED)
    return s0


def infer_shape(opcode: Op, operand_shapes: Sequence[Shape], attrs: dict) -> Shape:
    """Deterministic output shape for an opcode, or IncompatibleShapes."""
    shapes = list(operand_shapes)
    if opcode == Op.PARAMETER:
        return attrs["shape"]
    if opcode == Op.CONSTANT:
        return attrs["shape"]
    if opcode == Op.IOTA:
        shape = attrs["shape"]
        d = attrs["iota_dimension"]
        if not 0 <= d < shape.rank:
            raise IncompatibleShapes("iota dimension out of range")
        return shape
    if opcode == Op.PARTITION_ID:
        return Shape((), DType.S32)
    if opcode in ELEMENTWISE_UNARY:
        return shapes[0]
    if opcode in ELEMENTWISE_BINARY:
        return _elementwise_shape(opcode, shapes)
    if opcode == Op.SELECT:
        pred, on_true, on_false = shapes
        if pred.dtype != DType.PRED:
            raise IncompatibleShapes("select predicate must be pred")
        if pred.dims != on_true.dims or on_true != on_false:
            raise IncompatibleShapes("select operand shapes must match")
        return on_true
    if opcode == Op.BROADCAST:
        out_dims = attrs["out_dims"]
        bdims = tuple(attrs["broadcast_dims"])
        s = shapes[0]
        if len(bdims) != s.rank:
            raise IncompatibleShapes("broadcast_dims must map every operand dim")
        for i, d in enumerate(bdims):
            if not 0 <= d < len(out_dims) or out_dims[d] != s.dims[i]:
                raise IncompatibleShapes("broadcast dim mismatch")
        if list(bdims) != sorted(set(bdims)):
            raise IncompatibleShapes("broadcast_dims must be strictly increasing")
        return Shape(tuple(out_dims), s.dtype)
    if opcode == Op.RESHAPE:
        out_dims = tuple(attrs["out_dims"])
        s = shapes[0]
        if math.prod(out_dims) != s.num_elements:
            raise IncompatibleShapes("reshape element count mismatch")
        return Shape(out_dims, s.dtype)
    if opcode == Op.TRANSPOSE:
        perm = tuple(attrs["permutation"])
        s = shapes[0]
        if sorted(perm) != list(range(s.rank)):
            raise IncompatibleShapes("invalid permutation")
        return Shape(tuple(s.dims[p] for p in perm), s.dtype)
    if opcode == Op.REVERSE:
        s = shapes[0]
        if any(not 0 <= d < s.rank for d in attrs["dims"]):
            raise IncompatibleShapes("reverse dim out of range")
        return s
    if opcode == Op.PAD:
        s, pad_val = shapes
        if pad_val.rank != 0 or pad_val.dtype != s.dtype:
            raise IncompatibleShapes("pad value must be a scalar of the same dtype")
        low, high, interior = attrs["low"], attrs["high"], attrs["interior"]
        if not (len(low) == len(high) == len(interior) == s.rank):
            raise IncompatibleShapes("pad config rank mismatch")
        dims = []
        for n, l, h, it in zip(s.dims, low, high, interior):
            if l < 0 or h < 0 or it < 0:
                raise IncompatibleShapes("negative padding not supported")
            dilated = n + max(0, n - 1) * it
            dims.append(dilated + l + h)
        return Shape(tuple(dims), s.dtype)
    if opcode == Op.SLICE:
        s = shapes[0]
        starts, limits, strides = attrs["starts"], attrs["limits"], attrs["strides"]
        dims = []
        for n, b, e, st in zip(s.dims, starts, limits, strides):
            if not (0 <= b <= e <= n) or st < 1:
                raise IncompatibleShapes("invalid slice bounds")
            dims.append((e - b + st - 1) // st)
        return Shape(tuple(dims), s.dtype)
    if opcode == Op.DYNAMIC_SLICE:
        s = shapes[0]
        sizes = tuple(attrs["sizes"])
        if len(sizes) != s.rank or len(shapes) != 1 + s.rank:
            raise IncompatibleShapes("dynamic-slice arity mismatch")
        for idx in shapes[1:]:
            if idx.rank != 0 or not idx.dtype.is_integer:
                raise IncompatibleShapes("dynamic-slice indices must be integer scalars")
        if any(sz > n or sz < 0 for sz, n in zip(sizes, s.dims)):
            raise IncompatibleShapes("dynamic-slice size exceeds operand")
        return Shape(sizes, s.dtype)
    if opcode == Op.DYNAMIC_UPDATE_SLICE:
        s, upd = shapes[0], shapes[1]
        if upd.rank != s.rank or upd.dtype != s.dtype:
            raise IncompatibleShapes("dynamic-update-slice operand mismatch")
        if any(u > n for u, n in zip(upd.dims, s.dims)):
            raise IncompatibleShapes("update larger than operand")
        if len(shapes) != 2 + s.rank:
            raise IncompatibleShapes("dynamic-update-slice arity mismatch")
        return s
    if opcode == Op.CONCAT:
        d = attrs["dim"]
        s0 = shapes[0]
        total = 0
        for s in shapes:
            if s.rank != s0.rank or s.dtype != s0.dtype:
                raise IncompatibleShapes("concat rank/dtype mismatch")
            for i in range(s.rank):
                if i != d and s.dims[i] != s0.dims[i]:
                    raise IncompatibleShapes("concat non-concat dim mismatch")
            total += s.dims[d]
        dims = list(s0.dims)
        dims[d] = total
        return Shape(tuple(dims), s0.dtype)
    if opcode == Op.REDUCE:
        s, init = shapes
        rdims = sorted(attrs["dims"])
        if init.rank != 0 or init.dtype != s.dtype:
            raise IncompatibleShapes("reduce init must be scalar of operand dtype")
        if any(not 0 <= d < s.rank for d in rdims):
            raise IncompatibleShapes("reduce dim out of range")
        dims = tuple(n for i, n in enumerate(s.dims) if i not in rdims)
        return Shape(dims, s.dtype)
    if opcode == Op.DOT:
        lhs, rhs = shapes
        lb, rb = tuple(attrs["lhs_batch"]), tuple(attrs["rhs_batch"])
        lc, rc = tuple(attrs["lhs_contracting"]), tuple(attrs["rhs_contracting"])
        if lhs.dtype != rhs.dtype:
            raise IncompatibleShapes("dot dtype mismatch")
        if len(lb) != len(rb) or len(lc) != len(rc):
            raise IncompatibleShapes("dot dim list length mismatch")
        for a, b in zip(lb + lc, rb + rc):
            if lhs.dims[a] != rhs.dims[b]:
                raise IncompatibleShapes("dot batch/contracting size mismatch")
        lfree = [i for i in range(lhs.rank) if i not in lb and i not in lc]
        rfree = [i for i in range(rhs.rank) if i not in rb and i not in rc]
        dims = tuple(lhs.dims[i] for i in lb)
        dims += tuple(lhs.dims[i] for i in lfree)
        dims += tuple(rhs.dims[i] for i in rfree)
        return Shape(dims, lhs.dtype)
    if opcode == Op.CONVOLUTION:
        lhs, rhs = shapes
        cd: ConvDims = attrs["conv_dims"]
        window: tuple[WindowDim, ...] = tuple(attrs["window"])
        if lhs.dtype != rhs.dtype:
            raise IncompatibleShapes("convolution dtype mismatch")
        if len(window) != len(cd.lhs_spatial):
            raise IncompatibleShapes("window config rank mismatch")
        if lhs.dims[cd.lhs_feature] != rhs.dims[cd.rhs_in_feature]:
            raise IncompatibleShapes("convolution feature size mismatch")
        out_dims = [0] * lhs.rank
        out_dims[cd.out_batch] = lhs.dims[cd.lhs_batch]
        out_dims[cd.out_feature] = rhs.dims[cd.rhs_out_feature]
        for od, ld, rd, w in zip(cd.out_spatial, cd.lhs_spatial, cd.rhs_spatial, window):
            if rhs.dims[rd] != w.size:
                raise IncompatibleShapes("window size disagrees with rhs spatial dim")
            o = w.output_size(lhs.dims[ld])
            if o <= 0:
                raise IncompatibleShapes("non-positive convolution output size")
            out_dims[od] = o
        return Shape(tuple(out_dims), lhs.dtype)
    if opcode in (Op.ROTATE, Op.SHIFT):
        return shapes[0]
    if opcode == Op.ALL_REDUCE:
        return shapes[0]
    if opcode == Op.ALL_GATHER:
        s = shapes[0]
        d = attrs["dim"]
        factor = len(attrs["subgroups"][0])
        dims = list(s.dims)
        dims[d] *= factor
        return Shape(tuple(dims), s.dtype)
    if opcode == Op.REDUCE_SCATTER:
        s = shapes[0]
        d = attrs["dim"]
        factor = len(attrs["subgroups"][0])
        if s.dims[d] % factor != 0:
            raise IncompatibleShapes("reduce-scatter dim not divisible by group size")
        dims = list(s.dims)
        dims[d] //= factor
        return Shape(tuple(dims), s.dtype)
    if opcode == Op.ALL_TO_ALL:
        s = shapes[0]
        split, concat = attrs["split_dim"], attrs["concat_dim"]
        factor = len(attrs["subgroups"][0])
        if s.dims[split] % factor != 0:
            raise IncompatibleShapes("all-to-all split dim not divisible")
        dims = list(s.dims)
        dims[split] //= factor
        dims[concat] *= factor
        return Shape(tuple(dims), s.dtype)
    if opcode == Op.COLLECTIVE_PERMUTE:
        return shapes[0]
    raise IncompatibleShapes(f"unknown opcode {opcode}")


_ARITY = {
    Op.PARAMETER: 0,
    Op.CONSTANT: 0,
    Op.IOTA: 0,
    Op.PARTITION_ID: 0,
    Op.SELECT: 3,
    Op.PAD: 2,
    Op.REDUCE: 2,
    Op.DOT: 2,
    Op.CONVOLUTION: 2,
    Op.SHIFT: 2,
}


def validate_graph(graph: Graph) -> list[str]:
    """Return diagnostics for every violated Graph/Instruction invariant."""
    diags: list[str] = []
    seen: dict[str, Instruction] = {}
    for ins in graph.instructions:
        if ins.id in seen:
            diags.append(f"{ins.id}: duplicate definition")
            continue
        for op_id in ins.operands:
            if op_id not in seen:
                diags.append(f"{ins.id}: use-before-def of {op_id}")
        if ins.opcode in _ARITY and len(ins.operands) != _ARITY[ins.opcode]:
            diags.append(f"{ins.id}: wrong operand count for {ins.opcode.value}")
        elif ins.opcode in ELEMENTWISE_UNARY and len(ins.operands) != 1:
            diags.append(f"{ins.id}: wrong operand count for {ins.opcode.value}")
        elif ins.opcode in ELEMENTWISE_BINARY and len(ins.operands) != 2:
            diags.append(f"{ins.id}: wrong operand count for {ins.opcode.value}")
        else:
            op_shapes = [seen[o].shape for o in ins.operands if o in seen]
            if len(op_shapes) == len(ins.operands):
                try:
                    expected = infer_shape(ins.opcode, op_shapes, ins.attrs)
                    if expected != ins.shape:
                        diags.append(
                            f"{ins.id}: shape mismatch: declared {ins.shape}, "
                            f"inferred {expected}"
                        )
                except IncompatibleShapes as e:
                    diags.append(f"{ins.id}: shape mismatch: {e}")
        if ins.sharding is not None and ins.sharding.tile_dims is not None:
            if ins.sharding.data_rank != ins.shape.rank:
                diags.append(f"{ins.id}: sharding rank does not match shape rank")
        seen[ins.id] = ins
    for out in graph.outputs:
        if out not in seen:
            diags.append(f"output {out} is not defined")
    return diags


class GraphBuilder:
    """Incrementally builds a valid Graph, inferring shapes as it goes."""

    def __init__(self, name: str = "main", mesh: Optional[DeviceMesh] = None):
        self.name = name
        self.mesh = mesh
        self._instrs: list[Instruction] = []
        self._count = 0
        self._param_count = 0

    def _fresh(self, hint: str) -> str:
        self._count += 1
        return f"{hint}.{self._count}"

    def add(
        self,
        opcode: Op,
        operands: Sequence[str] = (),
        attrs: Optional[dict] = None,
        sharding: Optional[Sharding] = None,
        id: Optional[str] = None,
    ) -> str:
        attrs = dict(attrs or {})
        by_id = {i.id: i for i in self._instrs}
        shapes = [by_id[o].shape for o in operands]
        shape = infer_shape(opcode, shapes, attrs)
        ins = Instruction(
            id=id or self._fresh(opcode.value.replace("-", "_")),
            opcode=opcode,
            operands=tuple(operands),
            attrs=attrs,
            shape=shape,
            sharding=sharding,
        )
        self._instrs.append(ins)
        return ins.id

    def parameter(self, shape: Shape, sharding=None, id=None) -> str:
        idx = self._param_count
        self._param_count += 1
        return self.add(Op.PARAMETER, attrs={"index": idx, "shape": shape},
                        sharding=sharding, id=id)

    def constant(self, literal, shape: Shape, sharding=None, id=None) -> str:
        return self.add(Op.CONSTANT, attrs={"literal": literal, "shape": shape},
                        sharding=sharding, id=id)

    def build(self, outputs: Sequence[str]) -> Graph:
        g = Graph(self.name, tuple(self._instrs), tuple(outputs), self.mesh)
        diags = validate_graph(g)
        if diags:
            raise ValueError("invalid graph: " + "; ".join(diags))
        return g
