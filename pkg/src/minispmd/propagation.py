"""Sharding completion over a dataflow graph.

Starting from user annotations, candidate shardings flow forward (operands to
results) and backward (results to operands) through per-opcode dimension
correspondences. Updates are refinement-only: an instruction's sharding only
ever shards more dims or shrinks its replication subgroup, which guarantees a
fixed point. Rules run in priority tiers so that shape-preserving ops
(elementwise first) win ties against shape-changing ones.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

from .ir import (
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    ConvDims,
    Graph,
    Instruction,
    Op,
)
from .sharding import Sharding, merge_shardings


class ConflictingUserAnnotations(Exception):
    """Two user annotations pin the same value to incompatible shardings."""


@dataclasses.dataclass
class Change:
    iteration: int
    instruction: str
    old: Optional[str]
    new: str
    rule: str
    direction: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class PropagationReport:
    iterations: int
    final_shardings: dict[str, str]
    changes: list[Change]

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_shardings": dict(self.final_shardings),
            "changes": [c.to_json() for c in self.changes],
        }


# ---------------------------------------------------------------------------
# Dimension correspondences
# ---------------------------------------------------------------------------


def _identity_map(rank: int) -> dict[int, int]:
    return {d: d for d in range(rank)}


def _dot_operand_to_result(ins: Instruction, k: int,
                           operand_rank: int) -> dict[int, int]:
    """Result dims are [batch..., lhs-free..., rhs-free...]."""
    lb = list(ins.attrs["lhs_batch"])
    rb = list(ins.attrs["rhs_batch"])
    lc = list(ins.attrs["lhs_contracting"])
    rc = list(ins.attrs["rhs_contracting"])
    lhs_rank = operand_rank if k == 0 else None
    m: dict[int, int] = {}
    if k == 0:
        for pos, d in enumerate(lb):
            m[d] = pos
        free = [i for i in range(operand_rank) if i not in lb and i not in lc]
        for pos, d in enumerate(free):
            m[d] = len(lb) + pos
    else:
        for pos, d in enumerate(rb):
            m[d] = pos
        free = [i for i in range(operand_rank) if i not in rb and i not in rc]
        num_lhs_free = ins.shape.rank - len(lb) - len(free)
        for pos, d in enumerate(free):
            m[d] = len(lb) + num_lhs_free + pos
    return m


def _conv_operand_to_result(ins: Instruction, k: int) -> dict[int, int]:
    cd: ConvDims = ins.attrs["conv_dims"]
    if k == 0:
        m = {cd.lhs_batch: cd.out_batch}
        for ld, od in zip(cd.lhs_spatial, cd.out_spatial):
            m[ld] = od
        return m
    return {cd.rhs_out_feature: cd.out_feature}


def _reshape_groups(in_dims: Sequence[int],
                    out_dims: Sequence[int]) -> list[tuple[list[int], list[int]]]:
    """Greedy correspondence between input and output dim index groups with
    equal element products."""
    groups = []
    i = j = 0
    while i < len(in_dims) or j < len(out_dims):
        gi, gj = [i], [j]
        pi = in_dims[i] if i < len(in_dims) else 1
        pj = out_dims[j] if j < len(out_dims) else 1
        while pi != pj:
            if pi < pj:
                i += 1
                gi.append(i)
                pi *= in_dims[i]
            else:
                j += 1
                gj.append(j)
                pj *= out_dims[j]
        # Absorb trailing size-1 dims into the current group.
        while i + 1 < len(in_dims) and in_dims[i + 1] == 1:
            i += 1
            gi.append(i)
        while j + 1 < len(out_dims) and out_dims[j + 1] == 1:
            j += 1
            gj.append(j)
        groups.append((
            [d for d in gi if d < len(in_dims)],
            [d for d in gj if d < len(out_dims)],
        ))
        i += 1
        j += 1
    return groups


def _reshape_map(s: Sharding, in_dims: Sequence[int],
                 out_dims: Sequence[int]) -> dict[int, int]:
    """Map a sharding through a reshape, keeping only evenly-divisible
    dim-group correspondences."""
    m: dict[int, int] = {}
    for gin, gout in _reshape_groups(in_dims, out_dims):
        if not gin or not gout:
            continue
        lead_in, lead_out = gin[0], gout[0]
        if len(gin) == 1 and len(gout) == 1 and in_dims[lead_in] == out_dims[lead_out]:
            m[lead_in] = lead_out
            continue
        t = s.tiles(lead_in)
        if t > 1 and in_dims[lead_in] % t == 0 and out_dims[lead_out] % t == 0:
            m[lead_in] = lead_out
    return m


# ---------------------------------------------------------------------------
# Per-opcode rules
# ---------------------------------------------------------------------------

_ELEMENTWISE = (
    ELEMENTWISE_UNARY | ELEMENTWISE_BINARY | {Op.SELECT}
)

# Priority tiers: lower number wins ties (its updates land first).
TIER_ELEMENTWISE = 0
TIER_STRUCTURAL = 1     # Broadcast backward, Reduce, Transpose, Reverse
TIER_CONTRACTION = 2    # Dot, Convolution
TIER_RESHAPE = 3        # Reshape, Pad, Slice, Concat, DynamicSlice
TIER_BROADCAST_FWD = 4


def _forward_tier(op: Op) -> Optional[int]:
    if op in _ELEMENTWISE:
        return TIER_ELEMENTWISE
    if op in (Op.REDUCE, Op.TRANSPOSE, Op.REVERSE):
        return TIER_STRUCTURAL
    if op in (Op.DOT, Op.CONVOLUTION):
        return TIER_CONTRACTION
    if op in (Op.RESHAPE, Op.PAD, Op.SLICE, Op.CONCAT, Op.DYNAMIC_SLICE):
        return TIER_RESHAPE
    if op == Op.BROADCAST:
        return TIER_BROADCAST_FWD
    return None


def _backward_tier(op: Op) -> Optional[int]:
    if op in _ELEMENTWISE:
        return TIER_ELEMENTWISE
    if op in (Op.REDUCE, Op.TRANSPOSE, Op.REVERSE, Op.BROADCAST):
        return TIER_STRUCTURAL
    if op in (Op.DOT, Op.CONVOLUTION):
        return TIER_CONTRACTION
    if op in (Op.RESHAPE, Op.PAD, Op.SLICE, Op.CONCAT, Op.DYNAMIC_SLICE):
        return TIER_RESHAPE
    return None


def _sliced_identity_map(ins: Instruction, operand_dims: Sequence[int]) -> dict:
    """Identity map restricted to dims an op leaves untouched."""
    op = ins.opcode
    rank = len(operand_dims)
    if op == Op.SLICE:
        keep = [
            d for d in range(rank)
            if ins.attrs["starts"][d] == 0
            and ins.attrs["limits"][d] == operand_dims[d]
            and ins.attrs["strides"][d] == 1
        ]
    elif op == Op.PAD:
        keep = [
            d for d in range(rank)
            if ins.attrs["low"][d] == 0 and ins.attrs["high"][d] == 0
            and ins.attrs["interior"][d] == 0
        ]
    elif op == Op.CONCAT:
        keep = [d for d in range(rank) if d != ins.attrs["dim"]]
    elif op == Op.DYNAMIC_SLICE:
        keep = [d for d in range(rank)
                if ins.attrs["sizes"][d] == operand_dims[d]]
    else:
        keep = list(range(rank))
    return {d: d for d in keep}


def infer_forward(ins: Instruction,
                  operand_shardings: Sequence[Optional[Sharding]],
                  operand_ranks: Sequence[int],
                  operand_dims: Sequence[tuple[int, ...]]) -> Optional[Sharding]:
    op = ins.opcode
    out_rank = ins.shape.rank

    def useful(s: Optional[Sharding]) -> bool:
        return s is not None and not s.is_replicated

    if op in _ELEMENTWISE:
        candidate = None
        for s in operand_shardings:
            if not useful(s):
                continue
            candidate = s if candidate is None else (
                merge_shardings(candidate, s) or candidate
            )
        return candidate
    if op == Op.BROADCAST:
        s = operand_shardings[0]
        if not useful(s):
            return None
        bdims = tuple(ins.attrs["broadcast_dims"])
        return s.project({i: bdims[i] for i in range(len(bdims))}, out_rank)
    if op == Op.TRANSPOSE:
        s = operand_shardings[0]
        if not useful(s):
            return None
        perm = tuple(ins.attrs["permutation"])
        return s.project({perm[j]: j for j in range(len(perm))}, out_rank)
    if op == Op.REVERSE:
        s = operand_shardings[0]
        return s if useful(s) else None
    if op == Op.REDUCE:
        s = operand_shardings[0]
        if not useful(s):
            return None
        rdims = set(ins.attrs["dims"])
        kept = [d for d in range(operand_ranks[0]) if d not in rdims]
        return s.project({d: pos for pos, d in enumerate(kept)}, out_rank)
    if op in (Op.SLICE, Op.PAD, Op.CONCAT, Op.DYNAMIC_SLICE):
        candidate = None
        n_data = len(operand_shardings) if op == Op.CONCAT else 1
        for k in range(n_data):
            s = operand_shardings[k]
            if not useful(s):
                continue
            c = s.project(_sliced_identity_map(ins, operand_dims[k]), out_rank)
            if c.is_replicated:
                continue
            candidate = c if candidate is None else (
                merge_shardings(candidate, c) or candidate
            )
        return candidate
    if op == Op.RESHAPE:
        s = operand_shardings[0]
        if not useful(s):
            return None
        m = _reshape_map(s, operand_dims[0], ins.shape.dims)
        if not m:
            return None
        c = s.project(m, out_rank)
        return None if c.is_replicated else c
    if op == Op.DOT:
        candidate = None
        for k in (0, 1):
            s = operand_shardings[k]
            if not useful(s):
                continue
            c = s.project(_dot_operand_to_result(ins, k, operand_ranks[k]),
                          out_rank)
            if c.is_replicated:
                continue
            candidate = c if candidate is None else (
                merge_shardings(candidate, c) or candidate
            )
        return candidate
    if op == Op.CONVOLUTION:
        candidate = None
        for k in (0, 1):
            s = operand_shardings[k]
            if not useful(s):
                continue
            c = s.project(_conv_operand_to_result(ins, k), out_rank)
            if c.is_replicated:
                continue
            candidate = c if candidate is None else (
                merge_shardings(candidate, c) or candidate
            )
        return candidate
    return None


def infer_backward(ins: Instruction, result_sharding: Sharding, k: int,
                   operand_rank: int,
                   operand_dims: tuple[int, ...]) -> Optional[Sharding]:
    op = ins.opcode
    s = result_sharding
    if s is None or s.is_replicated:
        return None

    def _inv(forward_map: dict[int, int]) -> Optional[Sharding]:
        c = s.project({v: d for d, v in forward_map.items()}, operand_rank)
        return None if c.is_replicated else c

    if op in _ELEMENTWISE:
        return s
    if op == Op.BROADCAST:
        bdims = tuple(ins.attrs["broadcast_dims"])
        return _inv({i: bdims[i] for i in range(len(bdims))})
    if op == Op.TRANSPOSE:
        perm = tuple(ins.attrs["permutation"])
        return _inv({perm[j]: j for j in range(len(perm))})
    if op == Op.REVERSE:
        return s
    if op == Op.REDUCE and k == 0:
        rdims = set(ins.attrs["dims"])
        kept = [d for d in range(operand_rank) if d not in rdims]
        return _inv({d: pos for pos, d in enumerate(kept)})
    if op in (Op.SLICE, Op.PAD, Op.CONCAT, Op.DYNAMIC_SLICE):
        if op in (Op.PAD, Op.DYNAMIC_SLICE) and k != 0:
            return None
        if len(operand_dims) != ins.shape.rank:
            return None
        return _inv(_sliced_identity_map(ins, operand_dims))
    if op == Op.RESHAPE:
        m = _reshape_map(s, ins.shape.dims, operand_dims)
        if not m:
            return None
        c = s.project(m, operand_rank)
        return None if c.is_replicated else c
    if op == Op.DOT and k in (0, 1):
        return _inv(_dot_operand_to_result(ins, k, operand_rank))
    if op == Op.CONVOLUTION and k in (0, 1):
        return _inv(_conv_operand_to_result(ins, k))
    return None


# ---------------------------------------------------------------------------
# Fixed-point driver
# ---------------------------------------------------------------------------


def _agrees_on_dims(a: Sharding, b: Sharding, dims, devices) -> bool:
    for d in dims:
        if a.tiles(d) != b.tiles(d):
            return False
        if a.tiles(d) == 1:
            continue
        for dev in devices:
            if a.coord(dev, d) != b.coord(dev, d):
                return False
    return True


class _State:
    def __init__(self, graph: Graph):
        self.graph = graph
        self.shardings: dict[str, Optional[Sharding]] = {}
        self.user: dict[str, Sharding] = {}
        for ins in graph.instructions:
            s = ins.sharding
            if s is not None:
                self.user[ins.id] = s
                self.shardings[ins.id] = s.clear_unspecified()
            else:
                self.shardings[ins.id] = None

    def try_update(self, ins_id: str, candidate: Optional[Sharding],
                   shape_rank: int) -> Optional[tuple]:
        if candidate is None or candidate.is_replicated:
            return None
        candidate = candidate.clear_unspecified()
        if candidate.tile_dims is not None and candidate.data_rank != shape_rank:
            return None
        current = self.shardings[ins_id]
        if current is None:
            new = candidate
        else:
            merged = merge_shardings(current, candidate)
            if merged is None or merged == current:
                return None
            new = merged
        user = self.user.get(ins_id)
        if user is not None:
            fixed = [d for d in range(shape_rank) if d not in user.unspecified_dims]
            base = user.clear_unspecified()
            devices = base.devices if base.tile_dims is not None else new.devices
            if not _agrees_on_dims(base, new, fixed, devices):
                return None
        old = current
        self.shardings[ins_id] = new
        return (old, new)


def propagate(graph: Graph, use_priorities: bool = True,
              max_iterations: Optional[int] = None):
    """Complete shardings over ``graph``.

    Returns ``(annotated_graph, report)``. With ``use_priorities=False`` all
    rules run in a single tier (plain topological order), which is kept as a
    regression mode showing why the tiers exist.
    """
    state = _State(graph)
    by_id = graph.by_id
    order = list(graph.instructions)
    cap = max_iterations or max(10, 10 * len(order))
    tiers = [0, 1, 2, 3, 4] if use_priorities else [None]
    changes: list[Change] = []
    iterations = 0

    def operand_info(ins: Instruction):
        shardings = [state.shardings[o] for o in ins.operands]
        ranks = [by_id[o].shape.rank for o in ins.operands]
        dims = [by_id[o].shape.dims for o in ins.operands]
        return shardings, ranks, dims

    while iterations < cap:
        iterations += 1
        changed = False
        for tier in tiers:
            # Forward sweep.
            for ins in order:
                t = _forward_tier(ins.opcode)
                if t is None or (tier is not None and t != tier):
                    continue
                shardings, ranks, dims = operand_info(ins)
                cand = infer_forward(ins, shardings, ranks, dims)
                upd = state.try_update(ins.id, cand, ins.shape.rank)
                if upd:
                    changed = True
                    changes.append(Change(
                        iterations, ins.id,
                        upd[0].format() if upd[0] else None, upd[1].format(),
                        ins.opcode.value, "forward"))
            # Backward sweep.
            for ins in reversed(order):
                t = _backward_tier(ins.opcode)
                if t is None or (tier is not None and t != tier):
                    continue
                result = state.shardings[ins.id]
                if result is None:
                    continue
                for k, operand in enumerate(ins.operands):
                    opnd = by_id[operand]
                    cand = infer_backward(ins, result, k, opnd.shape.rank,
                                          opnd.shape.dims)
                    upd = state.try_update(operand, cand, opnd.shape.rank)
                    if upd:
                        changed = True
                        changes.append(Change(
                            iterations, operand,
                            upd[0].format() if upd[0] else None,
                            upd[1].format(), ins.opcode.value, "backward"))
        if not changed:
            break

    new_instructions = []
    final: dict[str, str] = {}
    for ins in order:
        s = state.shardings[ins.id] or Sharding.replicated()
        s = s.clear_unspecified()
        new_instructions.append(ins.with_sharding(s))
        final[ins.id] = s.format()
    annotated = Graph(graph.name, tuple(new_instructions), graph.outputs,
                      graph.mesh)
    return annotated, PropagationReport(iterations, final, changes)
