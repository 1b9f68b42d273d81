"""Partitioning of windowed and data-formatting ops.

These ops move elements across shard boundaries, so their partitioned form
exchanges boundary data ("halos") with neighboring shards via
CollectivePermute, then realigns each shard with a PartitionId-driven
DynamicSlice. Every handler keeps a replicate-locally-then-reslice fallback
for configurations the halo machinery cannot serve (halo larger than a shard,
multiple interacting sharded dims).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .ir import (
    CompareDirection,
    ConvDims,
    DType,
    Graph,
    Instruction,
    Op,
    Shape,
    WindowDim,
)
from .sharding import Sharding, shard_shape
from .partitioner import HaloSpec, HaloTooLarge, UnsupportedConv, _ceil_div, fit_linear


# ---------------------------------------------------------------------------
# Generic fallback
# ---------------------------------------------------------------------------


def _fallback(p, ins: Instruction, attrs: Optional[dict] = None):
    """Replicate operands, run the op locally, re-shard the result."""
    args = []
    for k, op_id in enumerate(ins.operands):
        val, s = p.values[op_id]
        args.append(p.gather_full(val, p.src.instr(op_id).shape, s))
    a = dict(ins.attrs) if attrs is None else attrs
    a.pop("shape", None)
    out = p.emit(ins.opcode, tuple(args), a)
    p.set_result(ins, p.localize(out, ins.shape, ins.sharding))


# ---------------------------------------------------------------------------
# Core halo primitive
# ---------------------------------------------------------------------------


def exchange_and_slice(p, val_id: str, axis: int, s: Sharding,
                       c: int, n_valid: int, window: int,
                       g0_per_dev: Sequence[int], bd: int = 1,
                       mask_fill=None, dtype: Optional[DType] = None,
                       mask_dilation_fill: bool = False
                       ) -> tuple[str, HaloSpec]:
    """Exchange halos along ``axis`` and slice each device's window.

    Each device holds ``c`` elements of the axis (global positions
    ``coord*c .. coord*c+c-1``). Device with axis-coordinate ``i`` needs the
    window of ``window`` consecutive positions starting at ``g0_per_dev`` in
    base-dilated coordinates (dilation factor ``bd``). Returns the id of the
    per-device ``window``-sized buffer plus the halo specification.

    If ``mask_fill`` is given, positions outside the valid dilated range
    ``[0, (n_valid-1)*bd+1)`` are replaced by it; with ``mask_dilation_fill``
    the interior dilation zeros are replaced as well (used by Pad).
    """
    K = s.tiles(axis)
    coord_of = {dev: s.coord(dev, axis) for dev in range(p.N)}
    by_coord: dict[int, list[int]] = {}
    for dev in range(p.N):
        by_coord.setdefault(coord_of[dev], []).append(dev)
    g0_of_coord = {}
    for dev in range(p.N):
        i = coord_of[dev]
        prev = g0_of_coord.get(i)
        if prev is not None and prev != g0_per_dev[dev]:
            raise HaloTooLarge("window start differs within an axis coordinate")
        g0_of_coord[i] = g0_per_dev[dev]

    # Needed halos per axis coordinate, in undilated elements.
    left = []
    right = []
    for i in range(K):
        g0 = g0_of_coord[i]
        g1 = g0 + window - 1
        first = g0 // bd if g0 >= 0 else -((-g0 + bd - 1) // bd)
        last = g1 // bd
        left.append(max(0, i * c - first))
        right.append(max(0, last - (i * c + c - 1)))
    hl, hr = max(left), max(right)
    if hl > c or hr > c:
        raise HaloTooLarge(f"halo ({hl},{hr}) exceeds shard size {c}")
    la = fit_linear(left)
    ra = fit_linear(right)
    spec = HaloSpec(
        left_a=la[0] if la else 0, left_b=la[1] if la else hl,
        right_a=ra[0] if ra else 0, right_b=ra[1] if ra else hr,
        max_left=hl, max_right=hr, needs_mask=mask_fill is not None)

    local = _local_dims(p, val_id)
    rank = len(local)
    groups = s.dim_groups(axis)

    pieces = []
    if hl > 0:
        slab = _axis_slice(p, val_id, axis, local, c - hl, c)
        pairs = []
        for g in groups:
            for a, b in zip(g, g[1:]):
                pairs.append((a, b))
        recv = p.emit(Op.COLLECTIVE_PERMUTE, (slab,),
                      {"pairs": tuple(sorted(pairs))})
        pieces.append(recv)
    pieces.append(val_id)
    if hr > 0:
        slab = _axis_slice(p, val_id, axis, local, 0, hr)
        pairs = []
        for g in groups:
            for a, b in zip(g, g[1:]):
                pairs.append((b, a))
        recv = p.emit(Op.COLLECTIVE_PERMUTE, (slab,),
                      {"pairs": tuple(sorted(pairs))})
        pieces.append(recv)
    buf = pieces[0] if len(pieces) == 1 else p.emit(
        Op.CONCAT, tuple(pieces), {"dim": axis})
    buf_len = c + hl + hr

    ext_dims = list(local)
    ext_dims[axis] = buf_len
    # Base position (undilated) of each device's buffer start.
    base = {dev: coord_of[dev] * c - hl for dev in range(p.N)}

    if bd > 1:
        zero = p.const(0, dtype)
        pads = [(0, 0)] * rank
        low = [0] * rank
        high = [0] * rank
        interior = [0] * rank
        interior[axis] = bd - 1
        high[axis] = bd - 1
        buf = p.emit(Op.PAD, (buf, zero),
                     {"low": tuple(low), "high": tuple(high),
                      "interior": tuple(interior)})
        ext_dims[axis] = buf_len * bd

    if mask_fill is not None:
        nd = (n_valid - 1) * bd + 1 if n_valid > 0 else 0
        offsets = [base[dev] * bd for dev in range(p.N)]
        buf = p.select_range(buf, tuple(ext_dims), axis, offsets, 0, nd,
                             mask_fill, dtype)
        if bd > 1 and mask_dilation_fill:
            gidx = p.global_index(tuple(ext_dims), axis, offsets)
            f = p.const(bd, DType.S32)
            fb = p.bcast(f, tuple(ext_dims))
            q = p.emit(Op.DIVIDE, (gidx, fb), {})
            back = p.emit(Op.MULTIPLY, (q, fb), {})
            is_elem = p.emit(Op.COMPARE, (gidx, back),
                             {"direction": CompareDirection.EQ})
            fill = p.bcast(mask_fill, tuple(ext_dims))
            buf = p.emit(Op.SELECT, (is_elem, buf, fill), {})

    # Per-device window offset within the (dilated) buffer.
    t_per_dev = [g0_per_dev[dev] - base[dev] * bd for dev in range(p.N)]
    if any(t < 0 or t + window > ext_dims[axis] for t in t_per_dev):
        raise HaloTooLarge("window does not fit in exchanged buffer")
    starts = []
    sizes = []
    for d in range(rank):
        if d == axis:
            starts.append(p.table_scalar(t_per_dev))
            sizes.append(window)
        else:
            starts.append(p.const(0, DType.S32))
            sizes.append(ext_dims[d])
    out = p.emit(Op.DYNAMIC_SLICE, tuple([buf] + starts),
                 {"sizes": tuple(sizes)})
    return out, spec


def _local_dims(p, val_id: str) -> tuple[int, ...]:
    for ins in p.b._instrs:
        if ins.id == val_id:
            return ins.shape.dims
    raise KeyError(val_id)


def _axis_slice(p, val_id: str, axis: int, dims, start: int, stop: int) -> str:
    rank = len(dims)
    starts = [0] * rank
    limits = list(dims)
    starts[axis] = start
    limits[axis] = stop
    return p.emit(Op.SLICE, (val_id,),
                  {"starts": tuple(starts), "limits": tuple(limits),
                   "strides": (1,) * rank})


def realign_axis(p, val_id: str, axis: int, s: Sharding, c: int, n_valid: int,
                 mo: int, stride: int, start: int,
                 dtype: DType, fill_scalar: Optional[str] = None,
                 interior: int = 0) -> str:
    """Re-gather shard contents so device with coordinate i holds the ``mo``
    output elements whose source positions are ``start + (i*mo + k) * stride``
    in base coordinates dilated by ``interior + 1``."""
    bd = interior + 1
    window = (mo - 1) * stride + 1
    g0 = [s.coord(dev, axis) * mo * stride + start for dev in range(p.N)]
    buf, _ = exchange_and_slice(
        p, val_id, axis, s, c, n_valid, window, g0, bd=bd,
        mask_fill=fill_scalar, dtype=dtype,
        mask_dilation_fill=fill_scalar is not None and bd > 1)
    if stride > 1:
        dims = list(_local_dims(p, buf))
        starts = [0] * len(dims)
        limits = list(dims)
        strides = [1] * len(dims)
        strides[axis] = stride
        buf = p.emit(Op.SLICE, (buf,),
                     {"starts": tuple(starts), "limits": tuple(limits),
                      "strides": tuple(strides)})
    return buf


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def handle_slice(p, ins: Instruction):
    src = p.src.instr(ins.operands[0])
    so = ins.sharding
    rank = ins.shape.rank
    starts = tuple(ins.attrs["starts"])
    strides = tuple(ins.attrs["strides"])
    target = _input_like_output_sharding(p, so, rank)
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    try:
        for d in range(rank):
            if so.tiles(d) <= 1:
                continue
            t = so.tiles(d)
            c = _ceil_div(src.shape.dims[d], t)
            mo = _ceil_div(ins.shape.dims[d], t)
            val = realign_axis(p, val, d, so, c, src.shape.dims[d], mo,
                               strides[d], starts[d], ins.shape.dtype)
    except HaloTooLarge:
        return _fallback(p, ins)
    # Unsharded dims: plain local slice.
    local = list(_local_dims(p, val))
    sl_starts, sl_limits, sl_strides = [], [], []
    needs = False
    for d in range(rank):
        if so.tiles(d) > 1:
            sl_starts.append(0)
            sl_limits.append(local[d])
            sl_strides.append(1)
        else:
            sl_starts.append(starts[d])
            sl_limits.append(ins.attrs["limits"][d])
            sl_strides.append(strides[d])
            if (starts[d], ins.attrs["limits"][d], strides[d]) != \
                    (0, src.shape.dims[d], 1):
                needs = True
    if needs:
        val = p.emit(Op.SLICE, (val,),
                     {"starts": tuple(sl_starts), "limits": tuple(sl_limits),
                      "strides": tuple(sl_strides)})
    p.set_result(ins, val)


def _input_like_output_sharding(p, so: Sharding, rank: int
                                ) -> Optional[Sharding]:
    """Sharding for an input with the same rank and the same per-dim tiling
    and device coordinates as the output annotation."""
    counts = tuple(so.tiles(d) for d in range(rank))
    if all(c == 1 for c in counts):
        return Sharding.replicated()
    coord_maps = {dev: {d: so.coord(dev, d) for d in range(rank)}
                  for dev in range(p.N)}
    return p._build_target(rank, dict(enumerate(counts)), coord_maps)


def handle_pad(p, ins: Instruction):
    src = p.src.instr(ins.operands[0])
    so = ins.sharding
    rank = ins.shape.rank
    low = tuple(ins.attrs["low"])
    high = tuple(ins.attrs["high"])
    interior = tuple(ins.attrs["interior"])
    target = _input_like_output_sharding(p, so, rank)
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    fill = p.operand(ins, 1, Sharding.replicated())
    try:
        for d in range(rank):
            if so.tiles(d) <= 1:
                continue
            t = so.tiles(d)
            c = _ceil_div(src.shape.dims[d], t)
            mo = _ceil_div(ins.shape.dims[d], t)
            val = realign_axis(p, val, d, so, c, src.shape.dims[d], mo,
                               1, -low[d], ins.shape.dtype,
                               fill_scalar=fill, interior=interior[d])
    except HaloTooLarge:
        return _fallback(p, ins)
    # Unsharded dims padded locally.
    l2, h2, i2 = [0] * rank, [0] * rank, [0] * rank
    for d in range(rank):
        if so.tiles(d) <= 1:
            l2[d], h2[d], i2[d] = low[d], high[d], interior[d]
    if any(l2) or any(h2) or any(i2):
        val = p.emit(Op.PAD, (val, fill),
                     {"low": tuple(l2), "high": tuple(h2),
                      "interior": tuple(i2)})
    p.set_result(ins, val)


def handle_concat(p, ins: Instruction):
    so = ins.sharding
    axis = ins.attrs["dim"]
    rank = ins.shape.rank
    # Operands unsharded along the concat dim, output coords elsewhere.
    op_target = so.project({d: d for d in range(rank) if d != axis}, rank)
    args = [p.operand(ins, k, op_target) for k in range(len(ins.operands))]
    out = p.emit(Op.CONCAT, tuple(args), {"dim": axis})
    inter = op_target
    if so.tiles(axis) > 1:
        # Slice each device's shard of the concat dim.
        t = so.tiles(axis)
        c = _ceil_div(ins.shape.dims[axis], t)
        local = list(_local_dims(p, out))
        pad_high = t * c - ins.shape.dims[axis]
        if pad_high:
            zero = p.const(0, ins.shape.dtype)
            low = [0] * rank
            high = [0] * rank
            high[axis] = pad_high
            out = p.emit(Op.PAD, (out, zero),
                         {"low": tuple(low), "high": tuple(high),
                          "interior": (0,) * rank})
            local[axis] += pad_high
        starts = []
        sizes = []
        for d in range(rank):
            if d == axis:
                starts.append(p.table_scalar(
                    p.offsets(ins.shape.dims, so, axis)))
                sizes.append(c)
            else:
                starts.append(p.const(0, DType.S32))
                sizes.append(local[d])
        out = p.emit(Op.DYNAMIC_SLICE, tuple([out] + starts),
                     {"sizes": tuple(sizes)})
        inter = _input_like_output_sharding(p, so, rank) or so
    p.finish(ins, out, inter if so.tiles(axis) > 1 else op_target)


def handle_reverse(p, ins: Instruction):
    src = p.src.instr(ins.operands[0])
    so = ins.sharding
    rank = ins.shape.rank
    rdims = sorted(ins.attrs["dims"])
    target = _input_like_output_sharding(p, so, rank)
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    # Local reverse handles everything except shard-boundary realignment.
    val = p.emit(Op.REVERSE, (val,), {"dims": tuple(rdims)})
    try:
        for d in rdims:
            t = so.tiles(d)
            if t <= 1:
                continue
            n = ins.shape.dims[d]
            c = _ceil_div(n, t)
            # After the local reverse, the device at coordinate i holds
            # positions [n - (i+1)*c, n - i*c) of the reversed tensor. Swap
            # coordinates i <-> t-1-i, then shift by the left overhang.
            groups = so.dim_groups(d)
            pairs = []
            for g in groups:
                for i, dev in enumerate(g):
                    pairs.append((dev, g[t - 1 - i]))
            if any(a != b for a, b in pairs):
                val = p.emit(Op.COLLECTIVE_PERMUTE, (val,),
                             {"pairs": tuple(sorted(pairs))})
            delta = t * c - n
            if delta:
                # Device i now holds positions [i*c - delta, (i+1)*c - delta).
                # Treat the buffers as a tensor left-padded by delta and slice
                # out [delta, delta + n).
                val = realign_axis(p, val, d, so, c, t * c, c, 1, delta,
                                   ins.shape.dtype)
    except HaloTooLarge:
        return _fallback(p, ins)
    p.set_result(ins, val)


def handle_reshape(p, ins: Instruction):
    from .propagation import _reshape_groups
    src = p.src.instr(ins.operands[0])
    so = ins.sharding
    in_dims = src.shape.dims
    out_dims = ins.shape.dims
    groups = _reshape_groups(in_dims, out_dims)
    # Desired input sharding: lead dim of each input group carries the
    # sharding of the lead output dim.
    counts = {}
    coord_maps = {dev: {} for dev in range(p.N)}
    plan = []
    ok = True
    for gin, gout in _reshape_groups(in_dims, out_dims):
        if not gin or not gout:
            if any(so.tiles(d) > 1 for d in gout):
                ok = False
            continue
        t = so.tiles(gout[0])
        if any(so.tiles(d) > 1 for d in gout[1:]):
            ok = False
            break
        counts[gin[0]] = t
        for dev in range(p.N):
            coord_maps[dev][gin[0]] = so.coord(dev, gout[0]) if t > 1 else 0
        plan.append((gin, gout, t))
    target = p._build_target(src.shape.rank, counts, coord_maps) if ok else None
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    try:
        # Process groups left to right; the local tensor starts as the input
        # shard and ends as the output shard.
        done_out: list[int] = []
        local = list(_local_dims(p, val))
        for gin, gout, t in plan:
            axis = len(done_out)
            n_in = len(gin)
            rest_in = math.prod(in_dims[d] for d in gin[1:])
            rest_out = math.prod(out_dims[d] for d in gout[1:])
            lead_in, lead_out = in_dims[gin[0]], out_dims[gout[0]]
            c_in = _ceil_div(lead_in, t)
            c_out = _ceil_div(lead_out, t)
            # Merge the group's input dims into one local axis.
            merged = local[:axis] + [local[axis] * rest_in] + \
                local[axis + n_in:]
            val = p.emit(Op.RESHAPE, (val,), {"out_dims": tuple(merged)})
            local = merged
            if t > 1 and (c_in * rest_in != c_out * rest_out
                          or c_in * t != lead_in or c_out * t != lead_out):
                # Element boundaries move across shards: 1-D realign on the
                # flattened group axis.
                axis_sharding = _axis_sharding_like(p, so, gout[0],
                                                    len(local), axis)
                if axis_sharding is None:
                    raise HaloTooLarge("no axis sharding")
                val = realign_axis(p, val, axis, axis_sharding, c_in * rest_in,
                                   lead_in * rest_in, c_out * rest_out, 1, 0,
                                   ins.shape.dtype)
                local[axis] = c_out * rest_out
            # Split into the group's output dims.
            split = local[:axis] + [c_out if t > 1 else lead_out] + \
                [out_dims[d] for d in gout[1:]] + local[axis + 1:]
            val = p.emit(Op.RESHAPE, (val,), {"out_dims": tuple(split)})
            local = split
            done_out.extend(gout)
    except HaloTooLarge:
        return _fallback(p, ins)
    inter = _input_like_output_sharding(p, so, ins.shape.rank)
    p.finish(ins, val, inter or so)


def _axis_sharding_like(p, so: Sharding, out_dim: int, rank: int,
                        axis: int) -> Optional[Sharding]:
    """Rank-``rank`` sharding that tiles only ``axis`` with the coords the
    output annotation uses for ``out_dim``."""
    t = so.tiles(out_dim)
    counts = {axis: t}
    coord_maps = {dev: {axis: so.coord(dev, out_dim)} for dev in range(p.N)}
    return p._build_target(rank, counts, coord_maps)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def handle_convolution(p, ins: Instruction):
    cd: ConvDims = ins.attrs["conv_dims"]
    window: tuple[WindowDim, ...] = tuple(ins.attrs["window"])
    so = ins.sharding
    lhs_ins = p.src.instr(ins.operands[0])
    rhs_ins = p.src.instr(ins.operands[1])
    lrank = lhs_ins.shape.rank

    dim_map = {cd.out_batch: cd.lhs_batch}
    for od, ld in zip(cd.out_spatial, cd.lhs_spatial):
        dim_map[od] = ld
    target_l = so.project(dim_map, lrank)
    lhs = p.operand(ins, 0, target_l)
    rhs = p.operand(ins, 1, Sharding.replicated())
    dtype = ins.shape.dtype
    zero = p.const(0, dtype)

    try:
        local_window = []
        for k, (od, ld) in enumerate(zip(cd.out_spatial, cd.lhs_spatial)):
            w = window[k]
            t = target_l.tiles(ld)
            if t <= 1:
                local_window.append(w)
                continue
            n = lhs_ins.shape.dims[ld]
            m = ins.shape.dims[od]
            c = _ceil_div(n, t)
            mo = _ceil_div(m, t)
            ew = (w.size - 1) * w.window_dilation + 1
            W = (mo - 1) * w.stride + ew
            g0 = [target_l.coord(dev, ld) * mo * w.stride - w.padding_low
                  for dev in range(p.N)]
            lhs, _ = exchange_and_slice(
                p, lhs, ld, target_l, c, n, W, g0, bd=w.base_dilation,
                mask_fill=zero, dtype=dtype)
            local_window.append(WindowDim(
                size=w.size, stride=w.stride, padding_low=0, padding_high=0,
                base_dilation=1, window_dilation=w.window_dilation))
        # Uneven batch shards only produce garbage in garbage rows: fine.
        out = p.emit(Op.CONVOLUTION, (lhs, rhs),
                     {"conv_dims": cd, "window": tuple(local_window)})
    except HaloTooLarge:
        return _fallback(p, ins)
    inter = so.project({cd.out_batch: cd.out_batch,
                        **{od: od for od in cd.out_spatial}}, ins.shape.rank)
    p.finish(ins, out, inter)


def conv_halo_spec(n: int, t: int, w: WindowDim, m: int) -> HaloSpec:
    """Halo sizes for a 1-D sharded convolution dim, per partition index."""
    c = _ceil_div(n, t)
    mo = _ceil_div(m, t)
    ew = (w.size - 1) * w.window_dilation + 1
    W = (mo - 1) * w.stride + ew
    bd = w.base_dilation
    left, right = [], []
    for i in range(t):
        g0 = i * mo * w.stride - w.padding_low
        g1 = g0 + W - 1
        first = g0 // bd if g0 >= 0 else -((-g0 + bd - 1) // bd)
        last = g1 // bd
        left.append(max(0, i * c - first))
        right.append(max(0, last - (i * c + c - 1)))
    la = fit_linear(left)
    ra = fit_linear(right)
    return HaloSpec(
        left_a=la[0] if la else 0, left_b=la[1] if la else max(left),
        right_a=ra[0] if ra else 0, right_b=ra[1] if ra else max(right),
        max_left=max(left), max_right=max(right), needs_mask=True)


# ---------------------------------------------------------------------------
# Rotate / Shift
# ---------------------------------------------------------------------------


def handle_rotate(p, ins: Instruction):
    so = ins.sharding
    axis = ins.attrs["dim"]
    k = ins.attrs["amount"] % ins.shape.dims[axis]
    src = p.src.instr(ins.operands[0])
    n = ins.shape.dims[axis]
    t = so.tiles(axis)
    if k == 0 or t <= 1:
        target = _input_like_output_sharding(p, so, ins.shape.rank)
        if target is None:
            return _fallback(p, ins)
        val = p.operand(ins, 0, target)
        if k:
            val = p.emit(Op.ROTATE, (val,), {"dim": axis, "amount": k})
        p.set_result(ins, val)
        return
    target = _input_like_output_sharding(p, so, ins.shape.rank)
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    c = _ceil_div(n, t)
    if n == t * c and k % c == 0:
        # Whole shards move: a single CollectivePermute ring.
        shift = k // c
        groups = so.dim_groups(axis)
        pairs = []
        for g in groups:
            for i, dev in enumerate(g):
                pairs.append((dev, g[(i - shift) % t]))
        val = p.emit(Op.COLLECTIVE_PERMUTE, (val,),
                     {"pairs": tuple(sorted(pairs))})
        p.set_result(ins, val)
        return
    if n != t * c:
        return _fallback(p, ins)
    try:
        # out[o] = in[(o + k) mod n]: two shifted re-gathers stitched by the
        # global index.
        zero = p.const(0, ins.shape.dtype)
        a = realign_axis(p, val, axis, so, c, n, c, 1, k, ins.shape.dtype,
                         fill_scalar=zero)
        b = realign_axis(p, val, axis, so, c, n, c, 1, k - n,
                         ins.shape.dtype, fill_scalar=zero)
        local = _local_dims(p, a)
        offsets = p.offsets(ins.shape.dims, so, axis)
        gidx = p.global_index(local, axis, offsets)
        lim = p.bcast(p.const(n - k, DType.S32), local)
        pred = p.emit(Op.COMPARE, (gidx, lim),
                      {"direction": CompareDirection.LT})
        val = p.emit(Op.SELECT, (pred, a, b), {})
    except HaloTooLarge:
        return _fallback(p, ins)
    p.set_result(ins, val)


def handle_shift(p, ins: Instruction):
    so = ins.sharding
    axis = ins.attrs["dim"]
    delta = ins.attrs["amount"]
    n = ins.shape.dims[axis]
    t = so.tiles(axis)
    target = _input_like_output_sharding(p, so, ins.shape.rank)
    if target is None:
        return _fallback(p, ins)
    val = p.operand(ins, 0, target)
    fill = p.operand(ins, 1, Sharding.replicated())
    if t <= 1:
        out = p.emit(Op.SHIFT, (val, fill), {"dim": axis, "amount": delta})
        p.set_result(ins, out)
        return
    c = _ceil_div(n, t)
    if n == t * c and delta % c == 0:
        # Whole shards move; devices at the open end receive zeros from the
        # permute and only need the fill when it is nonzero.
        shift = delta // c
        groups = so.dim_groups(axis)
        pairs = []
        for g in groups:
            for i, dev in enumerate(g):
                j = i + shift
                if 0 <= j < t:
                    pairs.append((dev, g[j]))
        val = p.emit(Op.COLLECTIVE_PERMUTE, (val,),
                     {"pairs": tuple(sorted(pairs))})
        val = _mask_shift_ends(p, ins, val, so, axis, n, delta, fill)
        p.set_result(ins, val)
        return
    try:
        out = realign_axis(p, val, axis, so, c, n, c, 1, -delta,
                           ins.shape.dtype, fill_scalar=fill)
    except HaloTooLarge:
        return _fallback(p, ins)
    out = _mask_shift_ends(p, ins, out, so, axis, n, delta, fill)
    p.set_result(ins, out)


def _mask_shift_ends(p, ins, val, so, axis, n, delta, fill):
    """Fill positions whose source fell outside [0, n)."""
    src_op = p.src.instr(ins.operands[1])
    fill_is_zero = (src_op.opcode == Op.CONSTANT
                    and not np.asarray(src_op.attrs["literal"]).any())
    local = _local_dims(p, val)
    offsets = p.offsets(ins.shape.dims, so, axis)
    low = max(0, delta)
    high = min(n, n + delta)
    if fill_is_zero and delta % _ceil_div(n, so.tiles(axis)) == 0 \
            and n == so.tiles(axis) * _ceil_div(n, so.tiles(axis)):
        # CollectivePermute already zero-fills missing shards.
        return val
    return p.select_range(val, local, axis, offsets, low, high, fill,
                          ins.shape.dtype)


# ---------------------------------------------------------------------------
# Rotate detection pre-pass
# ---------------------------------------------------------------------------


def detect_and_rotate(graph: Graph) -> Graph:
    """Rewrite rotate-like Concat(Slice, Slice) and Pad-then-Slice patterns
    into internal Rotate/Shift ops that lower to CollectivePermute."""
    by_id = graph.by_id
    uses: dict[str, int] = {}
    for ins in graph.instructions:
        for o in ins.operands:
            uses[o] = uses.get(o, 0) + 1
    out = []
    replaced: dict[str, Instruction] = {}
    for ins in graph.instructions:
        new = _match_rotate(ins, by_id) or _match_shift(ins, by_id)
        if new is not None:
            replaced[ins.id] = new
            out.append(new)
            by_id[ins.id] = new
        else:
            out.append(ins)
    if not replaced:
        return graph
    # Drop now-dead intermediates.
    live = set(graph.outputs)
    for ins in reversed(out):
        if ins.id in live:
            live.update(ins.operands)
    final = tuple(i for i in out if i.id in live or i.opcode == Op.PARAMETER)
    return Graph(graph.name, final, graph.outputs, graph.mesh)


def _is_full_slice_except(ins: Instruction, src_shape: Shape, axis: int
                          ) -> bool:
    for d in range(src_shape.rank):
        if ins.attrs["strides"][d] != 1:
            return False
        if d == axis:
            continue
        if ins.attrs["starts"][d] != 0 or \
                ins.attrs["limits"][d] != src_shape.dims[d]:
            return False
    return True


def _match_rotate(ins: Instruction, by_id) -> Optional[Instruction]:
    if ins.opcode != Op.CONCAT or len(ins.operands) != 2:
        return None
    axis = ins.attrs["dim"]
    a, b = by_id.get(ins.operands[0]), by_id.get(ins.operands[1])
    if a is None or b is None:
        return None
    if a.opcode != Op.SLICE or b.opcode != Op.SLICE:
        return None
    if a.operands[0] != b.operands[0]:
        return None
    src = by_id[a.operands[0]]
    if src.shape != ins.shape:
        return None
    if not _is_full_slice_except(a, src.shape, axis) or \
            not _is_full_slice_except(b, src.shape, axis):
        return None
    n = src.shape.dims[axis]
    k = a.attrs["starts"][axis]
    if a.attrs["limits"][axis] != n:
        return None
    if b.attrs["starts"][axis] != 0 or b.attrs["limits"][axis] != k:
        return None
    if k == 0:
        return None
    import dataclasses as dc
    return dc.replace(ins, opcode=Op.ROTATE, operands=(src.id,),
                      attrs={"dim": axis, "amount": k})


def _match_shift(ins: Instruction, by_id) -> Optional[Instruction]:
    if ins.opcode != Op.SLICE:
        return None
    pad = by_id.get(ins.operands[0])
    if pad is None or pad.opcode != Op.PAD:
        return None
    if any(pad.attrs["interior"]):
        return None
    src = by_id[pad.operands[0]]
    if src.shape != ins.shape:
        return None
    if any(st != 1 for st in ins.attrs["strides"]):
        return None
    axes = [d for d in range(src.shape.rank)
            if pad.attrs["low"][d] or pad.attrs["high"][d]]
    if len(axes) != 1:
        return None
    axis = axes[0]
    for d in range(src.shape.rank):
        if d == axis:
            continue
        if ins.attrs["starts"][d] != 0 or \
                ins.attrs["limits"][d] != src.shape.dims[d]:
            return None
    start = ins.attrs["starts"][axis]
    if ins.attrs["limits"][axis] - start != src.shape.dims[axis]:
        return None
    delta = pad.attrs["low"][axis] - start
    import dataclasses as dc
    return dc.replace(ins, opcode=Op.SHIFT,
                      operands=(src.id, pad.operands[1]),
                      attrs={"dim": axis, "amount": delta})
