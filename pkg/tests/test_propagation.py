"""Sharding completion: iterative propagation with operator priorities."""

import numpy as np

from minispmd.ir import DType, GraphBuilder, Op, ReduceKind, Shape
from minispmd.sharding import DeviceMesh, Sharding, mesh_split
from minispmd.propagation import propagate

MESH2 = DeviceMesh.default(2)
MESH22 = DeviceMesh.default(2, 2)


def shardings(graph):
    return {i.id: i.sharding for i in graph.instructions}


class TestBasic:
    def test_elementwise_forward(self):
        b = GraphBuilder("g", MESH2)
        x = b.parameter(Shape((8,)), sharding=mesh_split(1, MESH2, [0]))
        y = b.add(Op.RELU, [x], id="y")
        g, _ = propagate(b.build([y]))
        assert shardings(g)["y"] == mesh_split(1, MESH2, [0])

    def test_elementwise_backward(self):
        b = GraphBuilder("g", MESH2)
        x = b.parameter(Shape((8,)))
        y = b.add(Op.NEGATE, [x], sharding=mesh_split(1, MESH2, [0]), id="y")
        g, _ = propagate(b.build([y]))
        assert shardings(g)[g.parameters[0].id] == mesh_split(1, MESH2, [0])

    def test_default_is_replicated(self):
        b = GraphBuilder("g", MESH2)
        x = b.parameter(Shape((8,)))
        y = b.add(Op.RELU, [x])
        g, _ = propagate(b.build([y]))
        assert all(s is not None and s.is_replicated
                   for s in shardings(g).values())

    def test_transpose_permutes_dims(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((4, 6)), sharding=mesh_split(2, MESH22, [0, 1]))
        t = b.add(Op.TRANSPOSE, [x], {"permutation": (1, 0)}, id="t")
        g, _ = propagate(b.build([t]))
        s = shardings(g)["t"]
        assert s.tiles(0) == 2 and s.tiles(1) == 2
        # dim 0 of the transpose is dim 1 of the input
        ref = mesh_split(2, MESH22, [1, 0])
        assert s == ref

    def test_reduce_keeps_remaining_dims(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((4, 6)), sharding=mesh_split(2, MESH22, [0, 1]))
        c = b.constant(np.float32(0), Shape((), DType.F32))
        r = b.add(Op.REDUCE, [x, c], {"kind": ReduceKind.SUM, "dims": (0,)},
                  id="r")
        g, _ = propagate(b.build([r]))
        s = shardings(g)["r"]
        assert not s.is_replicated and s.tiles(0) == 2

    def test_broadcast_backward_beats_forward(self):
        b = GraphBuilder("g", MESH2)
        x = b.parameter(Shape((4,)))
        o = b.add(Op.BROADCAST, [x],
                  {"out_dims": (4, 6), "broadcast_dims": (0,)},
                  sharding=mesh_split(2, MESH2, [0, -1]), id="o")
        g, _ = propagate(b.build([o]))
        assert shardings(g)[g.parameters[0].id] == mesh_split(1, MESH2, [0])

    def test_dot_infers_output_from_operands(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((4, 6, 5)), sharding=mesh_split(3, MESH22, [0, -1, -1]))
        w = b.parameter(Shape((4, 5, 7)), sharding=mesh_split(3, MESH22, [0, -1, 1]))
        y = b.add(Op.DOT, [x, w],
                  {"lhs_batch": (0,), "rhs_batch": (0,),
                   "lhs_contracting": (2,), "rhs_contracting": (1,)}, id="y")
        g, _ = propagate(b.build([y]))
        s = shardings(g)["y"]
        assert s.tiles(0) == 2      # batch from mesh dim 0
        assert s.tiles(2) == 2      # rhs free dim from mesh dim 1

    def test_reshape_split_group(self):
        b = GraphBuilder("g", MESH2)
        x = b.parameter(Shape((12,)), sharding=mesh_split(1, MESH2, [0]))
        r = b.add(Op.RESHAPE, [x], {"out_dims": (4, 3)}, id="r")
        g, _ = propagate(b.build([r]))
        s = shardings(g)["r"]
        assert s.tiles(0) == 2 and s.tiles(1) == 1

    def test_unspecified_dims_refined(self):
        b = GraphBuilder("g", MESH22)
        part = mesh_split(2, MESH22, [0, -1]).with_unspecified([1])
        x = b.parameter(Shape((8, 8)), sharding=part)
        y = b.add(Op.RELU, [x], sharding=mesh_split(2, MESH22, [0, 1]), id="y")
        g, _ = propagate(b.build([y]))
        s = shardings(g)[g.parameters[0].id]
        assert s.tiles(0) == 2 and s.tiles(1) == 2

    def test_user_annotation_not_overridden(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((8, 8)), sharding=mesh_split(2, MESH22, [0, -1]))
        y = b.add(Op.RELU, [x], sharding=mesh_split(2, MESH22, [1, -1]), id="y")
        g, _ = propagate(b.build([y]))
        assert shardings(g)[g.parameters[0].id] == mesh_split(2, MESH22, [0, -1])
        assert shardings(g)["y"] == mesh_split(2, MESH22, [1, -1])


def _priority_fixture():
    """Broadcast feeding an elementwise add whose other operand is annotated.

    With priorities the elementwise op propagates first and all the 2-D
    tensors agree; a plain topological sweep lets the broadcast claim its
    output first and the shardings around the add disagree.
    """
    b = GraphBuilder("fig", MESH2)
    u = b.parameter(Shape((8,)), sharding=mesh_split(1, MESH2, [0]), id="u")
    r = b.parameter(Shape((8, 6)), sharding=mesh_split(2, MESH2, [-1, 0]),
                    id="r")
    bc = b.add(Op.BROADCAST, [u], {"out_dims": (8, 6), "broadcast_dims": (0,)},
               id="b")
    y = b.add(Op.ADD, [bc, r], id="y")
    return b.build([y])


class TestPriorities:
    def test_with_priorities_consistent(self):
        g, report = propagate(_priority_fixture(), use_priorities=True)
        s = shardings(g)
        want = mesh_split(2, MESH2, [-1, 0])
        assert s["y"] == want and s["b"] == want and s["r"] == want
        assert report.iterations >= 1

    def test_without_priorities_mismatch(self):
        g, report = propagate(_priority_fixture(), use_priorities=False)
        s = shardings(g)
        assert s["y"] != s["r"]
        assert report.iterations >= 1

    def test_both_modes_terminate(self):
        for flag in (True, False):
            _, report = propagate(_priority_fixture(), use_priorities=flag)
            assert report.iterations < 50


class TestReport:
    def test_trace_records_changes(self):
        g, report = propagate(_priority_fixture())
        assert report.changes
        j = report.to_json()
        assert set(j) == {"iterations", "final_shardings", "changes"}
        ids = {c["instruction"] for c in j["changes"]}
        assert "y" in ids or "b" in ids

    def test_deterministic(self):
        a = propagate(_priority_fixture())[1].to_json()
        b_ = propagate(_priority_fixture())[1].to_json()
        assert a == b_
