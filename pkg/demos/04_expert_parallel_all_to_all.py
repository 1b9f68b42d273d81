"""Switch between batch-parallel and expert-parallel layouts with AllToAll.

A mixture-of-experts layer holds a tensor [experts, batch, seq, model].
Elementwise work wants the batch dimension sharded; the per-expert matmul
wants the expert dimension sharded.  Moving between the two layouts is a
resharding where each device keeps the same amount of data but swaps which
dimension it owns — exactly one AllToAll, not a gather-then-slice.
"""

import numpy as np

from minispmd import (
    DeviceMesh,
    GraphBuilder,
    Op,
    Shape,
    mesh_split,
    propagate,
    verify_equivalence,
)


def main():
    mesh = DeviceMesh.default(2)
    b = GraphBuilder("moe", mesh)
    # [experts=4, batch=8, model=6], batch-sharded for the elementwise part.
    x = b.parameter(Shape((4, 8, 6)),
                    sharding=mesh_split(3, mesh, [-1, 0, -1]), id="x")
    # Per-expert weights [experts=4, model=6, hidden=2], expert-sharded.
    w = b.parameter(Shape((4, 6, 2)),
                    sharding=mesh_split(3, mesh, [0, -1, -1]), id="w")
    r = b.add(Op.RELU, [x], sharding=mesh_split(3, mesh, [-1, 0, -1]),
              id="r")
    # Batched per-expert matmul: requires the expert-sharded layout.
    y = b.add(Op.DOT, [r, w],
              {"lhs_batch": (0,), "rhs_batch": (0,),
               "lhs_contracting": (2,), "rhs_contracting": (1,)},
              sharding=mesh_split(3, mesh, [0, -1, -1]), id="y")
    g = b.build([y])

    annotated, _ = propagate(g)
    rng = np.random.default_rng(4)
    inputs = [rng.standard_normal(p.shape.dims).astype(np.float32)
              for p in g.parameters]
    rep = verify_equivalence(g, annotated, 2, inputs)
    print(f"batch-sharded relu -> expert-sharded matmul: passed={rep.passed}")
    print(f"collectives: {rep.collective_counts}  "
          "(the layout swap is a single all-to-all)")


if __name__ == "__main__":
    main()
