"""Uneven partitions and halo exchange for a sharded convolution.

Two things that make real partitioning messy:

1. Tensor dimensions rarely divide evenly by the number of shards.  Shards
   are padded to a common (ceil) size, the padding is allowed to hold
   garbage, and the garbage is masked out only where it could change a
   result (reductions, divides, windowed ops).

2. A convolution whose spatial dimension is sharded needs elements owned by
   neighbouring devices ("halos").  The halo width can differ per device —
   here it is linear in the partition id — and is exchanged with
   CollectivePermute rather than by gathering the whole tensor.
"""

import numpy as np

from minispmd import (
    ConvDims,
    DeviceMesh,
    GraphBuilder,
    Op,
    ReduceKind,
    Shape,
    Sharding,
    WindowDim,
    mesh_split,
    propagate,
    verify_equivalence,
)
from minispmd.formatting import conv_halo_spec


def uneven_reduce(mesh):
    """Sum a length-7 vector split over 4 devices (shards 2,2,2,1)."""
    b = GraphBuilder("uneven_sum", mesh)
    x = b.parameter(Shape((7,)), sharding=mesh_split(1, mesh, [0]), id="x")
    c = b.constant(np.float32(0), Shape(()))
    s = b.add(Op.REDUCE, [x, c], {"kind": ReduceKind.SUM, "dims": (0,)},
              id="s")
    return b.build([s])


def sharded_conv(mesh, n=16):
    """1-D convolution with the spatial dimension split over 4 devices."""
    b = GraphBuilder("conv", mesh)
    cd = ConvDims(lhs_batch=0, lhs_feature=1, lhs_spatial=(2,),
                  rhs_in_feature=0, rhs_out_feature=1, rhs_spatial=(2,),
                  out_batch=0, out_feature=1, out_spatial=(2,))
    w = WindowDim(size=2, stride=1, padding_low=1, padding_high=1)
    x = b.parameter(Shape((2, 3, n)), sharding=mesh_split(3, mesh, [-1, -1, 0]))
    k = b.parameter(Shape((3, 4, 2)), sharding=Sharding.replicated())
    y = b.add(Op.CONVOLUTION, [x, k], {"conv_dims": cd, "window": (w,)})
    return b.build([y]), w


def main():
    mesh = DeviceMesh.default(4)
    rng = np.random.default_rng(3)

    g = uneven_reduce(mesh)
    annotated, _ = propagate(g)
    rep = verify_equivalence(g, annotated, 4,
                             [np.arange(1, 8, dtype=np.float32)])
    print(f"uneven reduce over shards (2,2,2,1): passed={rep.passed}, "
          f"collectives={rep.collective_counts}")

    g, w = sharded_conv(mesh)
    spec = conv_halo_spec(16, 4, w, 17)
    print("convolution halo for partition i: "
          f"left = {spec.left_a}*i + {spec.left_b}, "
          f"right = {spec.right_a}*i + {spec.right_b}  (varies per device)")

    annotated, _ = propagate(g)
    inputs = [rng.integers(-4, 5, p.shape.dims).astype(np.float32)
              for p in g.parameters]
    rep = verify_equivalence(g, annotated, 4, inputs)
    print(f"sharded conv: passed={rep.passed}, exact={rep.max_abs_error == 0}, "
          f"collectives={rep.collective_counts}")


if __name__ == "__main__":
    main()
