"""Pipeline-parallel graph construction using a shifting state buffer.

The pipeline is expressed as plain dataflow IR: the state carries a leading
stage dimension ``L`` and every iteration shifts it right by one position
(pad-left-then-slice).  Sharding the stage dimension makes the partitioner
lower the shift into a ``CollectivePermute`` between neighbouring devices.

Two schedules are supported:

* ``gpipe``: each microbatch flows once through the ``L`` stages; the unrolled
  loop runs ``M + L - 1`` iterations.
* ``circular``: each device holds ``R`` layers assigned round-robin, so the
  state wraps around from the last stage to the first (a rotate instead of a
  shift) and every microbatch circulates ``R`` times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .ir import (
    CompareDirection,
    DType,
    Graph,
    GraphBuilder,
    Op,
    Shape,
)
from .sharding import DeviceMesh, Sharding


class ShapeMismatch(Exception):
    """The stage body returned a tensor whose shape differs from the state."""


# A stage body receives the builder, the id of the per-iteration input tensor
# (shape ``(L, *state_dims)``) and the ids of the per-stage weight tensors
# (shape ``(L, *weight_dims)`` each), and returns the id of the new state
# (same shape as the input).
StageBody = Callable[[GraphBuilder, str, Sequence[str]], str]


@dataclass(frozen=True)
class PipelineConfig:
    """Static description of an unrolled pipeline."""

    num_stages: int
    num_microbatches: int
    schedule: str = "gpipe"
    layers_per_device: int = 1

    def __post_init__(self):
        if self.num_stages < 1 or self.num_microbatches < 1:
            raise ValueError("num_stages and num_microbatches must be >= 1")
        if self.schedule not in ("gpipe", "circular"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.layers_per_device < 1:
            raise ValueError("layers_per_device must be >= 1")
        if self.schedule == "gpipe" and self.layers_per_device != 1:
            raise ValueError("gpipe schedule uses exactly one layer per stage")

    @property
    def total_layers(self) -> int:
        return self.num_stages * self.layers_per_device


@dataclass(frozen=True)
class BubbleStats:
    """Padded-compute accounting for an unrolled pipeline schedule."""

    total_iterations: int
    useful_applications: int
    padded_applications: int

    @property
    def total_applications(self) -> int:
        return self.useful_applications + self.padded_applications

    @property
    def bubble_ratio(self) -> Fraction:
        if self.total_applications == 0:
            return Fraction(0)
        return Fraction(self.padded_applications, self.total_applications)

    def to_json(self) -> dict:
        return {
            "total_iterations": self.total_iterations,
            "useful_applications": self.useful_applications,
            "padded_applications": self.padded_applications,
            "bubble_ratio": [
                self.bubble_ratio.numerator,
                self.bubble_ratio.denominator,
            ],
            "bubble_ratio_float": float(self.bubble_ratio),
        }


def _schedule_table(cfg: PipelineConfig) -> list[dict[int, tuple[int, int]]]:
    """Occupancy of each (iteration, stage) slot.

    Returns one dict per iteration mapping stage index to the
    ``(microbatch, round)`` pair being processed there.  Slots not present in
    the dict compute on padding.
    """
    L, M, R = cfg.num_stages, cfg.num_microbatches, cfg.layers_per_device
    entries: list[tuple[int, int, int]] = []  # (entry iteration, microbatch, round)
    for m in range(M):
        group, offset = divmod(m, L)
        for r in range(R):
            entries.append((group * L * R + r * L + offset, m, r))
    total = max(e + L - 1 for e, _, _ in entries) + 1
    table: list[dict[int, tuple[int, int]]] = [dict() for _ in range(total)]
    for e, m, r in entries:
        for s in range(L):
            table[e + s][s] = (m, r)
    return table


def bubble_stats(cfg: PipelineConfig) -> BubbleStats:
    """Count useful and padded stage-body applications over the unroll."""
    table = _schedule_table(cfg)
    useful = sum(len(row) for row in table)
    padded = len(table) * cfg.num_stages - useful
    return BubbleStats(
        total_iterations=len(table),
        useful_applications=useful,
        padded_applications=padded,
    )


def build_pipeline(
    cfg: PipelineConfig,
    mesh: Optional[DeviceMesh],
    state_dims: Sequence[int],
    body: StageBody,
    weight_shapes: Sequence[Shape] = (),
    dtype: DType = DType.F32,
    input_sharding: Optional[Sharding] = None,
    state_sharding: Optional[Sharding] = None,
    weight_shardings: Optional[Sequence[Optional[Sharding]]] = None,
    name: str = "pipeline",
) -> Graph:
    """Build the unrolled shifting-buffer pipeline graph.

    Parameters are one tensor of shape ``state_dims`` per microbatch followed
    by the weights (each with a leading ``(L,)`` dimension for the gpipe
    schedule or ``(L, R)`` for the circular schedule).  Outputs are the
    last-stage results for each microbatch, in microbatch order.
    """
    L, M, R = cfg.num_stages, cfg.num_microbatches, cfg.layers_per_device
    state_dims = tuple(state_dims)
    state_shape = Shape((L, *state_dims), dtype)
    rank = state_shape.rank
    if weight_shardings is None:
        weight_shardings = [None] * len(weight_shapes)

    b = GraphBuilder(name, mesh)
    inputs = [
        b.parameter(Shape(state_dims, dtype), sharding=input_sharding,
                    id=f"microbatch{m}")
        for m in range(M)
    ]
    lead = (L,) if cfg.schedule == "gpipe" else (L, R)
    weights = [
        b.parameter(Shape((*lead, *ws.dims), ws.dtype), sharding=wsh,
                    id=f"weight{k}")
        for k, (ws, wsh) in enumerate(zip(weight_shapes, weight_shardings))
    ]

    # Stage-id mask selecting the first stage: Iota(L) == 0, broadcast to the
    # state shape.
    iota = b.add(Op.IOTA, [], {"shape": Shape((L,), DType.S32),
                               "iota_dimension": 0}, id="stage_ids")
    zero = b.constant(np.int32(0), Shape((), DType.S32), id="zero_s32")
    zero_vec = b.add(Op.BROADCAST, [zero],
                     {"out_dims": (L,), "broadcast_dims": ()}, id="zero_vec")
    first_stage = b.add(Op.COMPARE, [iota, zero_vec],
                        {"direction": CompareDirection.EQ}, id="first_stage")
    first_stage_mask = b.add(
        Op.BROADCAST, [first_stage],
        {"out_dims": state_shape.dims, "broadcast_dims": (0,)},
        id="first_stage_mask")

    fill = b.constant(np.zeros((), dtype=_np_zero_dtype(dtype)),
                      Shape((), dtype), id="state_fill")
    state = b.add(Op.BROADCAST, [fill],
                  {"out_dims": state_shape.dims, "broadcast_dims": ()},
                  id="state_init")

    table = _schedule_table(cfg)
    circular = cfg.schedule == "circular"
    outputs: list[Optional[str]] = [None] * M

    for i, row in enumerate(table):
        # Shift the state right by one stage.  The circular schedule wraps the
        # last stage's result back to the first stage; gpipe drops it.
        if L == 1:
            shifted = state
        elif circular:
            tail = b.add(Op.SLICE, [state],
                         {"starts": (L - 1,) + (0,) * (rank - 1),
                          "limits": state_shape.dims,
                          "strides": (1,) * rank}, id=f"wrap{i}")
            head = b.add(Op.SLICE, [state],
                         {"starts": (0,) * rank,
                          "limits": (L - 1,) + state_dims,
                          "strides": (1,) * rank}, id=f"head{i}")
            shifted = b.add(Op.CONCAT, [tail, head], {"dim": 0},
                            id=f"shift{i}")
        else:
            padded = b.add(Op.PAD, [state, fill],
                           {"low": (1,) + (0,) * (rank - 1),
                            "high": (0,) * rank,
                            "interior": (0,) * rank}, id=f"padded{i}")
            shifted = b.add(Op.SLICE, [padded],
                            {"starts": (0,) * rank,
                             "limits": state_shape.dims,
                             "strides": (1,) * rank}, id=f"shift{i}")

        entering = [m for s, (m, r) in row.items() if s == 0 and r == 0]
        if entering:
            (m,) = entering
            inp = b.add(Op.BROADCAST, [inputs[m]],
                        {"out_dims": state_shape.dims,
                         "broadcast_dims": tuple(range(1, rank))},
                        id=f"inp{i}")
            cur = b.add(Op.SELECT, [first_stage_mask, inp, shifted],
                        id=f"select{i}")
        else:
            cur = shifted

        body_weights = (weights if not circular
                        else _select_round_weights(b, cfg, weights,
                                                   weight_shapes, row, i))
        state = body(b, cur, body_weights)
        actual = _instr_shape(b, state)
        if actual != state_shape:
            raise ShapeMismatch(
                f"stage body produced {actual}, expected {state_shape}")
        if state_sharding is not None:
            # Identity reshape used purely as a sharding annotation point.
            state = b.add(Op.RESHAPE, [state],
                          {"out_dims": state_shape.dims},
                          sharding=state_sharding, id=f"state{i}")

        finishing = [m for s, (m, r) in row.items()
                     if s == L - 1 and r == R - 1]
        if finishing:
            (m,) = finishing
            last = b.add(Op.SLICE, [state],
                         {"starts": (L - 1,) + (0,) * (rank - 1),
                          "limits": state_shape.dims,
                          "strides": (1,) * rank}, id=f"last{i}")
            outputs[m] = b.add(Op.RESHAPE, [last], {"out_dims": state_dims},
                               id=f"out{m}")

    assert all(o is not None for o in outputs)
    return b.build(outputs)


def _select_round_weights(b, cfg, weights, weight_shapes, row, i):
    """Pick each stage's weight for its current round in the circular schedule.

    Weights carry a ``(L, R)`` leading shape; stage ``s`` needs round
    ``r(i, s)``, which varies across stages within one iteration, so the
    selection is a chain of Selects against the per-iteration round vector.
    """
    L, R = cfg.num_stages, cfg.layers_per_device
    rounds = [row.get(s, (0, 0))[1] for s in range(L)]
    round_vec = b.add(
        Op.CONSTANT, [],
        {"literal": np.asarray(rounds, dtype=np.int32),
         "shape": Shape((L,), DType.S32)}, id=f"rounds{i}")
    out = []
    for k, (w, ws) in enumerate(zip(weights, weight_shapes)):
        flat_dims = (L, *ws.dims)
        picked = None
        for r in range(R):
            sliced = b.add(Op.SLICE, [w],
                           {"starts": (0, r) + (0,) * ws.rank,
                            "limits": (L, r + 1) + ws.dims,
                            "strides": (1,) * (ws.rank + 2)},
                           id=f"w{k}_r{r}_i{i}")
            flat = b.add(Op.RESHAPE, [sliced], {"out_dims": flat_dims},
                         id=f"w{k}_r{r}f_i{i}")
            if picked is None:
                picked = flat
                continue
            r_const = b.add(
                Op.CONSTANT, [],
                {"literal": np.full((L,), r, dtype=np.int32),
                 "shape": Shape((L,), DType.S32)}, id=f"rc{k}_{r}_i{i}")
            is_r = b.add(Op.COMPARE, [round_vec, r_const],
                         {"direction": CompareDirection.EQ},
                         id=f"isr{k}_{r}_i{i}")
            mask = b.add(Op.BROADCAST, [is_r],
                         {"out_dims": flat_dims, "broadcast_dims": (0,)},
                         id=f"wm{k}_{r}_i{i}")
            picked = b.add(Op.SELECT, [mask, flat, picked],
                           id=f"wsel{k}_{r}_i{i}")
        out.append(picked)
    return out


def _instr_shape(b: GraphBuilder, ins_id: str) -> Shape:
    for ins in b._instrs:
        if ins.id == ins_id:
            return ins.shape
    raise KeyError(ins_id)


def _np_zero_dtype(dtype: DType):
    from .sharding import np_dtype

    return np_dtype(dtype)
