"""Halo exchange for windowed and data-formatting operators."""

import numpy as np
import pytest

from minispmd.formatting import conv_halo_spec, detect_and_rotate
from minispmd.ir import (
    ConvDims,
    DType,
    GraphBuilder,
    Op,
    Shape,
    WindowDim,
)
from minispmd.partitioner import partition
from minispmd.propagation import propagate
from minispmd.sharding import DeviceMesh, Sharding, mesh_split
from minispmd.simulator import verify_equivalence

MESH4 = DeviceMesh.default(4)
MESH22 = DeviceMesh.default(2, 2)


def check(graph, n_dev=4, seed=5, int_inputs=False, **kw):
    annotated, _ = propagate(graph)
    rng = np.random.default_rng(seed)
    inputs = []
    for p in graph.parameters:
        if p.shape.dtype == DType.F32 and not int_inputs:
            inputs.append(rng.standard_normal(p.shape.dims).astype(np.float32))
        elif p.shape.dtype == DType.F32:
            inputs.append(rng.integers(-4, 5, p.shape.dims).astype(np.float32))
        else:
            inputs.append(rng.integers(-4, 5, p.shape.dims).astype(np.int32))
    rep = verify_equivalence(graph, annotated, n_dev, inputs, **kw)
    assert rep.passed, rep.details
    return rep


class TestSlicePad:
    def test_strided_slice_sharded(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((17,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.SLICE, [x], {"starts": (3,), "limits": (15,), "strides": (2,)},
                  sharding=mesh_split(1, MESH4, [0]))
        check(b.build([y]))

    def test_slice_2d(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((9, 10)), sharding=mesh_split(2, MESH22, [0, 1]))
        y = b.add(Op.SLICE, [x],
                  {"starts": (1, 2), "limits": (8, 9), "strides": (1, 3)},
                  sharding=mesh_split(2, MESH22, [0, 1]))
        check(b.build([y]))

    def test_pad_edges(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((10,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(-1), Shape((), DType.F32))
        y = b.add(Op.PAD, [x, c], {"low": (3,), "high": (2,), "interior": (0,)},
                  sharding=mesh_split(1, MESH4, [0]))
        check(b.build([y]))

    def test_pad_interior(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((7,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(5), Shape((), DType.F32))
        y = b.add(Op.PAD, [x, c], {"low": (1,), "high": (2,), "interior": (2,)},
                  sharding=mesh_split(1, MESH4, [0]))
        check(b.build([y]))


class TestConcatReverse:
    def test_concat_sharded_dim(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((5,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.parameter(Shape((6,)), sharding=mesh_split(1, MESH4, [0]))
        z = b.add(Op.CONCAT, [x, y], {"dim": 0},
                  sharding=mesh_split(1, MESH4, [0]))
        check(b.build([z]))

    def test_reverse_uneven_realigns(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((11,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.REVERSE, [x], {"dims": (0,)},
                  sharding=mesh_split(1, MESH4, [0]))
        rep = check(b.build([y]))
        assert rep.collective_counts.get("all-gather", 0) == 0

    def test_reverse_even_collective_permute_only(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((12,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.REVERSE, [x], {"dims": (0,)},
                  sharding=mesh_split(1, MESH4, [0]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {"collective-permute": 1}


class TestReshape:
    def test_uneven_merge_3_2_to_6(self):
        # Input (3,2) unevenly 2-way sharded on dim 0 (shard (2,2)), output
        # (6,) 2-way sharded (shard (3,)): the input padding sits mid-tensor
        # and must be exchanged away.
        mesh2 = DeviceMesh.default(2)
        b = GraphBuilder("g", mesh2)
        x = b.parameter(Shape((3, 2)), sharding=mesh_split(2, mesh2, [0, -1]))
        y = b.add(Op.RESHAPE, [x], {"out_dims": (6,)},
                  sharding=mesh_split(1, mesh2, [0]))
        check(b.build([y]), n_dev=2)

    def test_split(self):
        b = GraphBuilder("g", MESH4)
        x = b.parameter(Shape((12,)), sharding=mesh_split(1, MESH4, [0]))
        y = b.add(Op.RESHAPE, [x], {"out_dims": (4, 3)},
                  sharding=mesh_split(2, MESH4, [0, -1]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {}

    def test_multi_group(self):
        b = GraphBuilder("g", MESH22)
        x = b.parameter(Shape((4, 6, 5)), sharding=mesh_split(3, MESH22, [0, 1, -1]))
        y = b.add(Op.RESHAPE, [x], {"out_dims": (24, 5)})
        check(b.build([y]))


def conv1d_graph(n, window, t=4, mesh=None):
    mesh = mesh or MESH4
    b = GraphBuilder("conv", mesh)
    cd = ConvDims(lhs_batch=0, lhs_feature=1, lhs_spatial=(2,),
                  rhs_in_feature=0, rhs_out_feature=1, rhs_spatial=(2,),
                  out_batch=0, out_feature=1, out_spatial=(2,))
    x = b.parameter(Shape((2, 3, n)), sharding=mesh_split(3, mesh, [-1, -1, 0]))
    k = b.parameter(Shape((3, 4, window.size)), sharding=Sharding.replicated())
    y = b.add(Op.CONVOLUTION, [x, k], {"conv_dims": cd, "window": (window,)})
    return b.build([y])


class TestConvolution:
    @pytest.mark.parametrize("n,size,stride,pl,ph,bd,wd", [
        (16, 3, 1, 1, 1, 1, 1),
        (16, 2, 1, 1, 0, 1, 1),
        (17, 3, 1, 1, 1, 1, 1),   # uneven input
        (16, 5, 2, 2, 2, 1, 1),
        (12, 3, 1, 1, 1, 2, 1),   # base dilation
        (10, 3, 2, 2, 1, 3, 1),
        (16, 3, 1, 2, 2, 1, 2),   # window dilation
        (15, 2, 2, 0, 1, 2, 1),
    ])
    def test_1d_exact_for_ints(self, n, size, stride, pl, ph, bd, wd):
        w = WindowDim(size=size, stride=stride, padding_low=pl,
                      padding_high=ph, base_dilation=bd, window_dilation=wd)
        rep = check(conv1d_graph(n, w), int_inputs=True)
        assert rep.max_abs_error == 0.0

    def test_2d_spatial_sharded(self):
        b = GraphBuilder("conv2", MESH22)
        cd = ConvDims(lhs_batch=0, lhs_feature=1, lhs_spatial=(2, 3),
                      rhs_in_feature=0, rhs_out_feature=1, rhs_spatial=(2, 3),
                      out_batch=0, out_feature=1, out_spatial=(2, 3))
        wd = (WindowDim(size=3, stride=1, padding_low=1, padding_high=1),
              WindowDim(size=2, stride=2, padding_low=0, padding_high=0))
        x = b.parameter(Shape((2, 2, 8, 10)),
                        sharding=mesh_split(4, MESH22, [-1, -1, 0, 1]))
        k = b.parameter(Shape((2, 3, 3, 2)), sharding=Sharding.replicated())
        y = b.add(Op.CONVOLUTION, [x, k], {"conv_dims": cd, "window": wd})
        rep = check(b.build([y]), int_inputs=True)
        assert rep.max_abs_error == 0.0

    def test_right_halo_linear_in_partition_id(self):
        # 4-way partitioned length-16 input, window 2, stride 1, padding 1/1:
        # the right halo for partition i is i + 1 (non-constant).
        w = WindowDim(size=2, stride=1, padding_low=1, padding_high=1)
        spec = conv_halo_spec(16, 4, w, 17)
        assert (spec.right_a, spec.right_b) == (1, 1)
        assert spec.max_right == 4
        rep = check(conv1d_graph(16, w), int_inputs=True)
        assert rep.max_abs_error == 0.0

    def test_constant_halo(self):
        w = WindowDim(size=3, stride=1, padding_low=1, padding_high=1)
        spec = conv_halo_spec(16, 4, w, 16)
        assert spec.left_a == 0 and spec.right_a == 0
        assert spec.left_b == 1 and spec.right_b == 1


class TestRotateShift:
    def rotate_graph(self, n, k, mesh=None):
        mesh = mesh or MESH4
        b = GraphBuilder("rot", mesh)
        x = b.parameter(Shape((n,)), sharding=mesh_split(1, mesh, [0]))
        hi = b.add(Op.SLICE, [x], {"starts": (k,), "limits": (n,), "strides": (1,)})
        lo = b.add(Op.SLICE, [x], {"starts": (0,), "limits": (k,), "strides": (1,)})
        y = b.add(Op.CONCAT, [hi, lo], {"dim": 0},
                  sharding=mesh_split(1, mesh, [0]))
        return b.build([y])

    def test_detect_rotate(self):
        g = self.rotate_graph(16, 4)
        g2 = detect_and_rotate(g)
        assert any(i.opcode == Op.ROTATE for i in g2.instructions)

    def test_aligned_rotate_is_one_collective_permute(self):
        rep = check(self.rotate_graph(16, 4))
        assert rep.collective_counts == {"collective-permute": 1}

    def test_unaligned_rotate(self):
        check(self.rotate_graph(16, 3))

    def test_detect_shift(self):
        b = GraphBuilder("sh", MESH4)
        x = b.parameter(Shape((16,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(0), Shape((), DType.F32))
        p = b.add(Op.PAD, [x, c], {"low": (4,), "high": (0,), "interior": (0,)})
        y = b.add(Op.SLICE, [p], {"starts": (0,), "limits": (16,), "strides": (1,)},
                  sharding=mesh_split(1, MESH4, [0]))
        g = detect_and_rotate(b.build([y]))
        assert any(i.opcode == Op.SHIFT for i in g.instructions)

    def test_zero_fill_shift_is_bare_collective_permute(self):
        b = GraphBuilder("sh", MESH4)
        x = b.parameter(Shape((16,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(0), Shape((), DType.F32))
        p = b.add(Op.PAD, [x, c], {"low": (4,), "high": (0,), "interior": (0,)})
        y = b.add(Op.SLICE, [p], {"starts": (0,), "limits": (16,), "strides": (1,)},
                  sharding=mesh_split(1, MESH4, [0]))
        rep = check(b.build([y]))
        assert rep.collective_counts == {"collective-permute": 1}

    def test_nonzero_fill_shift(self):
        b = GraphBuilder("sh", MESH4)
        x = b.parameter(Shape((16,)), sharding=mesh_split(1, MESH4, [0]))
        c = b.constant(np.float32(9), Shape((), DType.F32))
        p = b.add(Op.PAD, [x, c], {"low": (0,), "high": (3,), "interior": (0,)})
        y = b.add(Op.SLICE, [p], {"starts": (3,), "limits": (19,), "strides": (1,)},
                  sharding=mesh_split(1, MESH4, [0]))
        rep = check(b.build([y]))
        assert "all-gather" not in rep.collective_counts
