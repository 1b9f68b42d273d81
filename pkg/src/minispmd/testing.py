"""Randomized graph generation for equivalence testing.

Produces small annotated dataflow graphs (a handful of instructions, ranks up
to 3, dimensions up to 12) with randomly chosen shardings — tiled, partially
tiled, uneven, and partially specified — over 2, 4, or 8 simulated devices,
together with matching random input tensors.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .ir import DType, Graph, GraphBuilder, Op, ReduceKind, Shape
from .sharding import DeviceMesh, Sharding, mesh_split, np_dtype

_MESH_SHAPES = {
    2: [(2,), (2, 1)],
    4: [(4,), (2, 2)],
    8: [(8,), (4, 2), (2, 4), (2, 2, 2)],
}

MAX_DIM = 12
MAX_RANK = 3


def random_mesh(rng: np.random.Generator, num_devices: int) -> DeviceMesh:
    shapes = _MESH_SHAPES[num_devices]
    dims = shapes[rng.integers(len(shapes))]
    ids = tuple(range(num_devices))
    if rng.random() < 0.3:
        ids = tuple(int(i) for i in rng.permutation(num_devices))
    return DeviceMesh(dims, ids)


def random_sharding(rng: np.random.Generator, rank: int,
                    mesh: DeviceMesh) -> Optional[Sharding]:
    """A random sharding for a rank-``rank`` tensor, or None."""
    if rank == 0 or rng.random() < 0.15:
        return Sharding.replicated() if rng.random() < 0.5 else None
    mapping = [-1] * rank
    mesh_dims = list(rng.permutation(mesh.rank))
    tensor_dims = list(rng.permutation(rank))
    n = int(rng.integers(1, min(rank, mesh.rank) + 1))
    for td, md in zip(tensor_dims[:n], mesh_dims[:n]):
        mapping[td] = int(md)
    s = mesh_split(rank, mesh, mapping)
    if rng.random() < 0.2:
        k = int(rng.integers(1, rank + 1))
        s = s.with_unspecified(int(d) for d in rng.permutation(rank)[:k])
    return s


def _random_dims(rng, rank):
    return tuple(int(rng.integers(1, MAX_DIM + 1)) for _ in range(rank))


def _factorize(rng, total, rank):
    """Random factorization of ``total`` into ``rank`` factors (any size)."""
    dims = []
    rest = total
    for _ in range(rank - 1):
        divisors = [d for d in range(1, rest + 1) if rest % d == 0]
        d = int(divisors[rng.integers(len(divisors))])
        dims.append(d)
        rest //= d
    dims.append(rest)
    return tuple(dims)


class _Gen:
    def __init__(self, rng: np.random.Generator, num_devices: int):
        self.rng = rng
        self.mesh = random_mesh(rng, num_devices)
        self.b = GraphBuilder("random", self.mesh)
        self.pool: list[tuple[str, Shape]] = []
        self.inputs: list[np.ndarray] = []

    def sharding_for(self, rank, prob):
        if self.rng.random() >= prob:
            return None
        return random_sharding(self.rng, rank, self.mesh)

    def emit(self, opcode, operands, attrs=None, prob=0.4):
        shapes = {i: s for i, s in self.pool}
        ins_id = self.b.add(opcode, operands, attrs)
        shape = next(s.shape for s in self.b._instrs if s.id == ins_id)
        # Rebuild with a sharding annotation via a fresh add is not possible;
        # instead annotate by replacing the trailing instruction.
        sharding = self.sharding_for(shape.rank, prob)
        if sharding is not None:
            ins = self.b._instrs.pop()
            self.b._instrs.append(
                type(ins)(id=ins.id, opcode=ins.opcode, operands=ins.operands,
                          attrs=ins.attrs, shape=ins.shape, sharding=sharding))
        self.pool.append((ins_id, shape))
        return ins_id

    def add_parameter(self):
        rng = self.rng
        rank = int(rng.integers(1, MAX_RANK + 1))
        dims = _random_dims(rng, rank)
        dtype = DType.F32 if rng.random() < 0.75 else DType.S32
        shape = Shape(dims, dtype)
        pid = self.b.parameter(shape,
                               sharding=self.sharding_for(rank, prob=0.8))
        self.pool.append((pid, shape))
        if dtype == DType.F32:
            self.inputs.append(rng.standard_normal(dims).astype(np.float32))
        else:
            self.inputs.append(rng.integers(0, 5, dims).astype(np.int32))

    def constant_scalar(self, dtype):
        if dtype == DType.F32:
            lit = np.float32(self.rng.standard_normal())
        else:
            lit = np.int32(self.rng.integers(0, 5))
        return self.b.add(Op.CONSTANT, [],
                          {"literal": lit, "shape": Shape((), dtype)})

    def pick(self, pred=lambda s: True):
        cands = [(i, s) for i, s in self.pool if pred(s)]
        if not cands:
            return None
        return cands[self.rng.integers(len(cands))]

    def step(self):
        rng = self.rng
        builders = [self._unary, self._binary, self._transpose, self._reverse,
                    self._broadcast, self._reshape, self._slice, self._pad,
                    self._concat, self._reduce, self._dot, self._dynamic_slice]
        for _ in range(8):
            fn = builders[rng.integers(len(builders))]
            if fn():
                return True
        return False

    def _unary(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        ops = [Op.NEGATE, Op.RELU]
        if t[1].dtype == DType.F32:
            ops.append(Op.EXP)
        self.emit(ops[self.rng.integers(len(ops))], [t[0]])
        return True

    def _binary(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        u = self.pick(lambda s: s == t[1])
        if u is None:
            return False
        ops = [Op.ADD, Op.SUBTRACT, Op.MAXIMUM, Op.MULTIPLY]
        self.emit(ops[self.rng.integers(len(ops))], [t[0], u[0]])
        return True

    def _transpose(self):
        t = self.pick(lambda s: s.rank >= 2)
        if t is None:
            return False
        perm = tuple(int(p) for p in self.rng.permutation(t[1].rank))
        self.emit(Op.TRANSPOSE, [t[0]], {"permutation": perm})
        return True

    def _reverse(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        k = int(self.rng.integers(1, t[1].rank + 1))
        dims = tuple(sorted(int(d) for d in self.rng.permutation(t[1].rank)[:k]))
        self.emit(Op.REVERSE, [t[0]], {"dims": dims})
        return True

    def _broadcast(self):
        t = self.pick(lambda s: s.rank < MAX_RANK)
        if t is None:
            return False
        rng = self.rng
        out_rank = int(rng.integers(t[1].rank + 1, MAX_RANK + 1))
        bdims = tuple(sorted(int(d) for d in
                             rng.permutation(out_rank)[:t[1].rank]))
        out_dims = [int(rng.integers(1, MAX_DIM + 1)) for _ in range(out_rank)]
        for td, od in zip(range(t[1].rank), bdims):
            out_dims[od] = t[1].dims[td]
        self.emit(Op.BROADCAST, [t[0]],
                  {"out_dims": tuple(out_dims), "broadcast_dims": bdims})
        return True

    def _reshape(self):
        t = self.pick(lambda s: s.rank >= 1 and s.num_elements <= 200)
        if t is None:
            return False
        rank = int(self.rng.integers(1, MAX_RANK + 1))
        out_dims = _factorize(self.rng, t[1].num_elements, rank)
        if max(out_dims) > 64:
            return False
        self.emit(Op.RESHAPE, [t[0]], {"out_dims": out_dims})
        return True

    def _slice(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        rng = self.rng
        starts, limits, strides = [], [], []
        for n in t[1].dims:
            a = int(rng.integers(0, n))
            b = int(rng.integers(a + 1, n + 1))
            starts.append(a)
            limits.append(b)
            strides.append(int(rng.integers(1, 3)))
        self.emit(Op.SLICE, [t[0]], {"starts": tuple(starts),
                                     "limits": tuple(limits),
                                     "strides": tuple(strides)})
        return True

    def _pad(self):
        t = self.pick(lambda s: s.rank >= 1 and max(s.dims) <= 9)
        if t is None:
            return False
        rng = self.rng
        c = self.constant_scalar(t[1].dtype)
        low = tuple(int(rng.integers(0, 3)) for _ in t[1].dims)
        high = tuple(int(rng.integers(0, 3)) for _ in t[1].dims)
        interior = tuple(int(rng.integers(0, 2)) for _ in t[1].dims)
        self.emit(Op.PAD, [t[0], c],
                  {"low": low, "high": high, "interior": interior})
        return True

    def _concat(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        d = int(self.rng.integers(t[1].rank))
        def ok(s):
            return (s.rank == t[1].rank and s.dtype == t[1].dtype
                    and all(s.dims[i] == t[1].dims[i]
                            for i in range(s.rank) if i != d)
                    and s.dims[d] + t[1].dims[d] <= 2 * MAX_DIM)
        u = self.pick(ok)
        if u is None:
            return False
        self.emit(Op.CONCAT, [t[0], u[0]], {"dim": d})
        return True

    def _reduce(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        rng = self.rng
        k = int(rng.integers(1, t[1].rank + 1))
        dims = tuple(sorted(int(d) for d in rng.permutation(t[1].rank)[:k]))
        kind = [ReduceKind.SUM, ReduceKind.MAX][rng.integers(2)]
        if kind == ReduceKind.SUM:
            init = np.float32(0) if t[1].dtype == DType.F32 else np.int32(0)
        else:
            init = (np.float32(-np.inf) if t[1].dtype == DType.F32
                    else np.int32(np.iinfo(np.int32).min))
        c = self.b.add(Op.CONSTANT, [],
                       {"literal": init, "shape": Shape((), t[1].dtype)})
        self.emit(Op.REDUCE, [t[0], c], {"kind": kind, "dims": dims})
        return True

    def _dot(self):
        t = self.pick(lambda s: s.dtype == DType.F32 and 1 <= s.rank <= 2)
        if t is None:
            return False
        lc = int(self.rng.integers(t[1].rank))
        n = t[1].dims[lc]
        def ok(s):
            return (s.dtype == DType.F32 and 1 <= s.rank <= 2
                    and n in s.dims
                    and (t[1].rank - 1) + (s.rank - 1) <= MAX_RANK)
        u = self.pick(ok)
        if u is None:
            return False
        rc = u[1].dims.index(n)
        self.emit(Op.DOT, [t[0], u[0]],
                  {"lhs_batch": (), "rhs_batch": (),
                   "lhs_contracting": (lc,), "rhs_contracting": (rc,)})
        return True

    def _dynamic_slice(self):
        t = self.pick(lambda s: s.rank >= 1)
        if t is None:
            return False
        rng = self.rng
        starts, sizes = [], []
        for n in t[1].dims:
            sz = int(rng.integers(1, n + 1))
            starts.append(int(rng.integers(0, n - sz + 1)))
            sizes.append(sz)
        idx = [self.b.add(Op.CONSTANT, [],
                          {"literal": np.int32(a), "shape": Shape((), DType.S32)})
               for a in starts]
        self.emit(Op.DYNAMIC_SLICE, [t[0], *idx], {"sizes": tuple(sizes)})
        return True

    def build(self):
        rng = self.rng
        for _ in range(int(rng.integers(1, 3))):
            self.add_parameter()
        n_ops = int(rng.integers(3, 9))
        for _ in range(n_ops):
            self.step()
        produced = {i for i, _ in self.pool}
        consumed = set()
        for ins in self.b._instrs:
            consumed.update(ins.operands)
        sinks = [i for i, _ in self.pool if i not in consumed]
        if not sinks:
            sinks = [self.pool[-1][0]]
        return self.b.build(sinks), self.inputs


def random_graph(rng: np.random.Generator,
                 num_devices: int) -> tuple[Graph, list[np.ndarray]]:
    """A random annotated graph plus matching random inputs."""
    return _Gen(rng, num_devices).build()
