"""Complete partial sharding annotations over a whole dataflow graph.

We build a small graph, annotate only its parameters with device-mesh
shardings, and let propagation infer shardings for every remaining
instruction.  The trace shows which rule fired at each step and in which
direction (forward through users or backward into operands).
"""

import numpy as np

from minispmd import (
    DeviceMesh,
    GraphBuilder,
    Op,
    ReduceKind,
    Shape,
    mesh_split,
    print_graph,
    propagate,
)


def main():
    mesh = DeviceMesh.default(2, 2)          # 4 devices in a 2x2 grid

    b = GraphBuilder("mlp_block", mesh)
    # Activations: batch dim split across mesh axis 0, features replicated.
    x = b.parameter(Shape((8, 16)), sharding=mesh_split(2, mesh, [0, -1]),
                    id="x")
    # Weights: output features split across mesh axis 1.
    w = b.parameter(Shape((16, 32)), sharding=mesh_split(2, mesh, [-1, 1]),
                    id="w")
    h = b.add(Op.DOT, [x, w],
              {"lhs_batch": (), "rhs_batch": (),
               "lhs_contracting": (1,), "rhs_contracting": (0,)}, id="h")
    r = b.add(Op.RELU, [h], id="r")
    c = b.constant(np.float32(0), Shape(()))
    s = b.add(Op.REDUCE, [r, c], {"kind": ReduceKind.SUM, "dims": (1,)},
              id="s")
    g = b.build([s])

    print("=== input graph (only parameters annotated) ===")
    print(print_graph(g))

    annotated, report = propagate(g)

    print("=== after propagation (every instruction annotated) ===")
    print(print_graph(annotated))

    print(f"converged in {report.iterations} iteration(s)")
    print("--- change trace ---")
    for ch in report.changes:
        print(f"  iter {ch.iteration}: %{ch.instruction} "
              f"{ch.old or '<none>'} -> {ch.new}  [{ch.rule}, {ch.direction}]")


if __name__ == "__main__":
    main()
