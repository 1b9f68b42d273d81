"""SPMD rewrite: per-device programs, resharding, and collectives."""

import numpy as np
import pytest

from minispmd.ir import DType, GraphBuilder, Op, ReduceKind, Shape
from minispmd.partitioner import collective_stats, fit_linear, partition
from minispmd.propagation import propagate
from minispmd.sharding import DeviceMesh, Sharding, mesh_split
from minispmd.simulator import verify_equivalence

MESH22 = DeviceMesh.default(2, 2)
MESH4 = DeviceMesh.default(4)


def check(graph, n_dev=4, seed=1, **kw):
    annotated, _ = propagate(graph)
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal(p.shape.dims).astype(np.float32)
              if p.shape.dtype == DType.F32 else
              rng.integers(-5, 5, p.shape.dims).astype(np.int32)
              for p in graph.parameters]
    rep = verify_equivalence(graph, annotated, n_dev, inputs, **kw)
    assert rep.passed, rep.details
    return rep


class TestFitLinear:
    def test_constant(self):
        assert fit_linear([3, 3, 3]) == (0, 3)

    def test_linear(self):
        assert fit_linear([1, 2, 3, 4]) == (1, 1)

    def test_not_linear(self):
        assert fit_linear([1, 2, 4]) is None

    def test_single(self):
        assert fit_linear([7]) == (0, 7)


class TestElementwise:
    def test_sharded_uneven(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((7,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.RELU, [x], sharding=mesh_split(1, MESH4, [0]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {}

    def test_int_divide_masks_padding(self):
        # Padding garbage in the divisor must not fault the SPMD program.
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((7,), DType.S32), sharding=mesh_split(1, MESH4, [0]))
        y = b.parameter(Shape((7,), DType.S32), sharding=mesh_split(1, MESH4, [0]))
        d = b.add(Op.DIVIDE, [x, y], id="d")
        g = b.build([d])
        annotated, _ = propagate(g)
        rep = verify_equivalence(g, annotated, 4,
                                 [np.arange(1, 8, dtype=np.int32),
                                  np.full(7, 2, np.int32)])
        assert rep.passed, rep.details


class TestDot:
    def test_contracting_sharded_allreduce(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((5, 8)), sharding=mesh_split(2, MESH22, [-1, 0]))
        w = b.parameter(Shape((8, 3)), sharding=mesh_split(2, MESH22, [0, -1]))
        y = b.add(Op.DOT, [x, w],
                  {"lhs_batch": (), "rhs_batch": (),
                   "lhs_contracting": (1,), "rhs_contracting": (0,)},
                  sharding=Sharding.replicated())
        rep = check(b.build([y]))
        assert rep.collective_counts.get("all-reduce", 0) == 1

    def test_matched_output_reduce_scatter(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((8, 8)), sharding=mesh_split(2, MESH22, [0, 1]))
        w = b.parameter(Shape((8, 8)), sharding=mesh_split(2, MESH22, [1, 0]))
        y = b.add(Op.DOT, [x, w],
                  {"lhs_batch": (), "rhs_batch": (),
                   "lhs_contracting": (1,), "rhs_contracting": (0,)},
                  sharding=mesh_split(2, MESH22, [0, 1]))
        rep = check(b.build([y]))
        assert rep.collective_counts.get("reduce-scatter", 0) == 1
        assert rep.collective_counts.get("all-reduce", 0) == 0

    def test_batched_einsum(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((4, 5, 6)), sharding=mesh_split(3, MESH22, [0, -1, -1]))
        w = b.parameter(Shape((4, 6, 7)), sharding=mesh_split(3, MESH22, [0, -1, 1]))
        y = b.add(Op.DOT, [x, w],
                  {"lhs_batch": (0,), "rhs_batch": (0,),
                   "lhs_contracting": (2,), "rhs_contracting": (1,)})
        rep = check(b.build([y]))
        assert rep.collective_counts == {}


class TestReduce:
    def test_uneven_2d_masked(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((7, 5)), sharding=mesh_split(2, MESH22, [0, 1]))
        c = b.constant(np.float32(0), Shape((), DType.F32))
        r = b.add(Op.REDUCE, [x, c], {"kind": ReduceKind.SUM, "dims": (0, 1)},
                  sharding=Sharding.replicated())
        rep = check(b.build([r]))
        assert rep.max_rel_error < 1e-5
        assert rep.collective_counts.get("all-reduce", 0) >= 1

    def test_max_uneven(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((9,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(-np.inf), Shape((), DType.F32))
        r = b.add(Op.REDUCE, [x, c], {"kind": ReduceKind.MAX, "dims": (0,)})
        check(b.build([r]))


class TestReshard:
    def test_dim_swap_all_to_all(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((8, 8)), sharding=mesh_split(2, MESH22, [0, -1]))
        y = b.add(Op.RELU, [x], sharding=mesh_split(2, MESH22, [-1, 0]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {"all-to-all": 1}

    def test_device_order_swap_collective_permute(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((8, 8)),
                        sharding=Sharding.tiled([[0, 1], [2, 3]]))
        y = b.add(Op.RELU, [x], sharding=Sharding.tiled([[0, 2], [1, 3]]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {"collective-permute": 1}

    def test_unshard_uses_all_gather(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((8,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.RELU, [x], sharding=Sharding.replicated())
        rep = check(b.build([y]))
        assert rep.collective_counts.get("all-gather", 0) == 1


class TestSpmdStructure:
    def test_single_program_per_device_offsets(self):
        # An uneven iota has device-dependent offsets but the program text is
        # shared; offsets come from a constant table indexed by partition id.
        b = GraphBuilder("g", MESH4)
        i = b.add(Op.IOTA, [], {"shape": Shape((7,), DType.S32),
                                "iota_dimension": 0},
                  sharding=mesh_split(1, MESH4, [0]))
        g = b.build([i])
        annotated, _ = propagate(g)
        prog = partition(annotated, 4)
        ops = {ins.opcode for ins in prog.graph.instructions}
        assert Op.PARTITION_ID in ops
        rep = verify_equivalence(g, annotated, 4, [])
        assert rep.passed, rep.details

    def test_dynamic_slice_unshards_touched_dim(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((8, 10)), sharding=mesh_split(2, MESH22, [0, -1]))
        s0 = b.constant(np.int32(0), Shape((), DType.S32))
        s1 = b.constant(np.int32(3), Shape((), DType.S32))
        y = b.add(Op.DYNAMIC_SLICE, [x, s0, s1], {"sizes": (8, 4)})
        r = b.add(Op.RELU, [y])
        check(b.build([r]))

    def test_fully_annotated_required(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((8,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.RELU, [x])          # no sharding anywhere downstream
        g = b.build([y])
        with pytest.raises(Exception):
            partition(g, 4)


class TestStats:
    def test_counts_and_bytes(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((8,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.RELU, [x], sharding=Sharding.replicated())
        annotated, _ = propagate(b.build([y]))
        stats = collective_stats(partition(annotated, 4))
        assert stats["counts"] == {"all-gather": 1}
        # 8 f32 elements * 4 bytes * 4 participants
        assert stats["bytes"] == {"all-gather": 8 * 4 * 4}
        assert stats["total_bytes"] == 128
