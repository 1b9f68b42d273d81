"""Sharding representation: device meshes, tile assignments, and shard math.

A sharding assigns regions of a tensor to devices:

* replicated: every device holds the full tensor;
* tiled: a device-id array of the same rank as the data, one tile per device;
* partially tiled: device-id array with one extra trailing dimension whose
  extent is the replication-subgroup size (devices in a subgroup hold the
  same tile).

Uneven dimensions are rounded up: the shard size along a dimension is
ceil(size / tiles), and out-of-range elements are padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ir import Shape


class ShardingError(Exception):
    pass


class DuplicateMeshDim(ShardingError):
    pass


class MeshDimOutOfRange(ShardingError):
    pass


class RankMismatch(ShardingError):
    pass


class DeviceNotInSharding(ShardingError):
    pass


class MissingShard(ShardingError):
    pass


class ReplicaDivergence(ShardingError):
    def __init__(self, device_a: int, device_b: int, max_abs_diff: float):
        self.devices = (device_a, device_b)
        self.max_abs_diff = max_abs_diff
        super().__init__(
            f"replicated shards on devices {device_a} and {device_b} diverge "
            f"(max abs diff {max_abs_diff})"
        )


@dataclass(frozen=True)
class DeviceMesh:
    """Logical multi-dimensional arrangement of device ids (order significant)."""

    mesh_dims: tuple[int, ...]
    device_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mesh_dims", tuple(int(d) for d in self.mesh_dims))
        object.__setattr__(self, "device_ids", tuple(int(d) for d in self.device_ids))
        if len(self.device_ids) != math.prod(self.mesh_dims):
            raise ShardingError("device_ids size must equal the product of mesh_dims")
        if len(set(self.device_ids)) != len(self.device_ids):
            raise ShardingError("duplicate device id in mesh")
        if any(d < 0 for d in self.device_ids):
            raise ShardingError("device ids must be non-negative")

    @property
    def rank(self) -> int:
        return len(self.mesh_dims)

    @property
    def ids_array(self) -> np.ndarray:
        return np.array(self.device_ids, dtype=np.int64).reshape(self.mesh_dims)

    @staticmethod
    def default(*mesh_dims: int) -> "DeviceMesh":
        n = math.prod(mesh_dims)
        return DeviceMesh(tuple(mesh_dims), tuple(range(n)))


class ShardingKind(Enum):
    REPLICATED = "replicated"
    TILED = "tiled"
    PARTIAL = "partial"


@dataclass(frozen=True)
class Sharding:
    """Tile-assignment-based sharding of one tensor.

    ``tile_dims`` / ``tile_devices`` describe the tile assignment array
    (shape and row-major device ids); both are None for replicated shardings.
    For partially tiled shardings the assignment carries one extra trailing
    dimension for the replication subgroup. ``unspecified_dims`` marks tensor
    dimensions the propagation pass may refine even on user annotations.
    """

    tile_dims: Optional[tuple[int, ...]] = None
    tile_devices: Optional[tuple[int, ...]] = None
    partial: bool = False
    unspecified_dims: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "unspecified_dims", frozenset(self.unspecified_dims))
        if self.tile_dims is None:
            object.__setattr__(self, "tile_devices", None)
            object.__setattr__(self, "partial", False)
            return
        dims = tuple(int(d) for d in self.tile_dims)
        devs = tuple(int(d) for d in self.tile_devices)
        if len(devs) != math.prod(dims):
            raise ShardingError("tile assignment size does not match its dims")
        if len(set(devs)) != len(devs):
            raise ShardingError("tile assignment entries must be distinct")
        # Canonical form: trivial replication dim collapses to tiled; a fully
        # trivial tiling over more than one device collapses to replicated.
        partial = self.partial
        if partial and dims[-1] == 1:
            dims, partial = dims[:-1], False
        data_dims = dims[:-1] if partial else dims
        if all(d == 1 for d in data_dims):
            object.__setattr__(self, "tile_dims", None)
            object.__setattr__(self, "tile_devices", None)
            object.__setattr__(self, "partial", False)
            return
        object.__setattr__(self, "tile_dims", dims)
        object.__setattr__(self, "tile_devices", devs)
        object.__setattr__(self, "partial", partial)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def replicated(unspecified_dims: Iterable[int] = ()) -> "Sharding":
        return Sharding(None, None, False, frozenset(unspecified_dims))

    @staticmethod
    def tiled(assignment, unspecified_dims: Iterable[int] = ()) -> "Sharding":
        arr = np.asarray(assignment, dtype=np.int64)
        return Sharding(arr.shape, tuple(arr.reshape(-1).tolist()), False,
                        frozenset(unspecified_dims))

    @staticmethod
    def partial_tiled(assignment, unspecified_dims: Iterable[int] = ()) -> "Sharding":
        arr = np.asarray(assignment, dtype=np.int64)
        return Sharding(arr.shape, tuple(arr.reshape(-1).tolist()), True,
                        frozenset(unspecified_dims))

    # -- basic queries ------------------------------------------------------

    @property
    def kind(self) -> ShardingKind:
        if self.tile_dims is None:
            return ShardingKind.REPLICATED
        return ShardingKind.PARTIAL if self.partial else ShardingKind.TILED

    @property
    def is_replicated(self) -> bool:
        return self.tile_dims is None

    @property
    def tiles_array(self) -> np.ndarray:
        if self.tile_dims is None:
            raise ShardingError("replicated sharding has no tile assignment")
        return np.array(self.tile_devices, dtype=np.int64).reshape(self.tile_dims)

    @property
    def data_rank(self) -> int:
        if self.tile_dims is None:
            raise ShardingError("replicated sharding has no data rank")
        return len(self.tile_dims) - (1 if self.partial else 0)

    @property
    def devices(self) -> tuple[int, ...]:
        if self.tile_devices is None:
            raise ShardingError("replicated sharding does not list devices")
        return self.tile_devices

    @property
    def num_devices(self) -> int:
        return len(self.tile_devices) if self.tile_devices is not None else 0

    def tiles(self, dim: int) -> int:
        """Number of tiles along data dimension ``dim`` (1 if replicated)."""
        if self.tile_dims is None:
            return 1
        return self.tile_dims[dim]

    @property
    def replication_factor(self) -> int:
        if self.tile_dims is None:
            raise ShardingError("replication factor of replicated sharding is unbounded")
        return self.tile_dims[-1] if self.partial else 1

    @property
    def sharded_dims(self) -> tuple[int, ...]:
        if self.tile_dims is None:
            return ()
        return tuple(d for d in range(self.data_rank) if self.tiles(d) > 1)

    def coords(self, device: int) -> tuple[int, ...]:
        """Full tile coordinates of ``device`` (incl. replication slot)."""
        if self.tile_devices is None:
            raise DeviceNotInSharding("replicated sharding has no coordinates")
        try:
            flat = self.tile_devices.index(device)
        except ValueError:
            raise DeviceNotInSharding(f"device {device} not in sharding") from None
        return tuple(int(c) for c in np.unravel_index(flat, self.tile_dims))

    def coord(self, device: int, dim: int) -> int:
        if self.tile_dims is None:
            return 0
        return self.coords(device)[dim]

    def dim_groups(self, dim: int) -> list[list[int]]:
        """Device subgroups varying along tile dim ``dim``, in coordinate order."""
        arr = self.tiles_array
        moved = np.moveaxis(arr, dim, -1).reshape(-1, arr.shape[dim])
        return [[int(d) for d in row] for row in moved]

    def replication_groups(self) -> list[list[int]]:
        """Replication subgroups (singletons for fully tiled shardings)."""
        arr = self.tiles_array
        if not self.partial:
            return [[int(d)] for d in arr.reshape(-1)]
        return [[int(d) for d in row] for row in arr.reshape(-1, arr.shape[-1])]

    # -- transformations ----------------------------------------------------

    def project(self, dim_map: Mapping[int, int], new_rank: int) -> "Sharding":
        """Map this sharding through an operand/result dimension correspondence.

        ``dim_map`` maps my data dims to target dims; unmapped sharded dims are
        folded into the replication subgroup (device order preserved).
        """
        if self.tile_dims is None:
            return Sharding.replicated()
        arr = self.tiles_array
        if not self.partial:
            arr = arr.reshape(arr.shape + (1,))
        rank = self.data_rank
        kept = sorted(dim_map.keys(), key=lambda d: dim_map[d])
        dropped = [d for d in range(rank) if d not in dim_map]
        arr = arr.transpose(kept + dropped + [rank])
        repl = math.prod(arr.shape[len(kept):])
        final = [1] * new_rank + [repl]
        for d in kept:
            final[dim_map[d]] = self.tiles(d)
        out = arr.reshape(final)
        if repl == 1:
            return Sharding.tiled(out.reshape(final[:-1]))
        return Sharding.partial_tiled(out)

    def with_unspecified(self, dims: Iterable[int]) -> "Sharding":
        return Sharding(self.tile_dims, self.tile_devices, self.partial,
                        frozenset(dims))

    def clear_unspecified(self) -> "Sharding":
        return self.with_unspecified(())

    # -- text format --------------------------------------------------------

    def format(self) -> str:
        if self.tile_dims is None:
            text = "replicated"
        else:
            dims = ",".join(str(d) for d in self.tile_dims)
            ids = ",".join(str(d) for d in self.tile_devices)
            text = f"devices=[{dims}]{ids}"
            if self.partial:
                text += " last_tile_dim_replicate"
        if self.unspecified_dims:
            inner = ",".join(str(d) for d in sorted(self.unspecified_dims))
            text += " unspecified_dims={" + inner + "}"
        return text

    @staticmethod
    def parse(text: str) -> "Sharding":
        text = text.strip()
        unspecified: frozenset = frozenset()
        if "unspecified_dims={" in text:
            text, _, tail = text.partition("unspecified_dims={")
            tail = tail.rstrip()
            if not tail.endswith("}"):
                raise ShardingError(f"malformed unspecified_dims in {text!r}")
            inner = tail[:-1].strip()
            unspecified = frozenset(int(t) for t in inner.split(",") if t.strip())
            text = text.strip()
        if text == "replicated":
            return Sharding.replicated(unspecified)
        partial = False
        if text.endswith("last_tile_dim_replicate"):
            partial = True
            text = text[: -len("last_tile_dim_replicate")].strip()
        if not text.startswith("devices=["):
            raise ShardingError(f"cannot parse sharding {text!r}")
        dims_text, _, ids_text = text[len("devices=["):].partition("]")
        dims = tuple(int(t) for t in dims_text.split(","))
        ids = [int(t) for t in ids_text.split(",") if t.strip()]
        if len(ids) != math.prod(dims):
            raise ShardingError("tile assignment size does not match dims")
        arr = np.array(ids, dtype=np.int64).reshape(dims)
        if partial:
            return Sharding.partial_tiled(arr, unspecified)
        return Sharding.tiled(arr, unspecified)

    def __str__(self) -> str:
        return self.format()


def mesh_split(rank: int, mesh: DeviceMesh, dims_mapping: Sequence[int]) -> Sharding:
    """Build a sharding from a device mesh and a tensor-dim to mesh-dim mapping.

    ``dims_mapping[i]`` names the mesh dimension that shards tensor dim ``i``,
    or -1 for no sharding. Unused mesh dims become the replication subgroup,
    preserving mesh device order.
    """
    if len(dims_mapping) != rank:
        raise RankMismatch("dims_mapping length must equal tensor rank")
    used = [m for m in dims_mapping if m != -1]
    if len(set(used)) != len(used):
        raise DuplicateMeshDim("mesh dim used more than once")
    for m in used:
        if not 0 <= m < mesh.rank:
            raise MeshDimOutOfRange(f"mesh dim {m} out of range")
    if not used:
        return Sharding.replicated()
    arr = mesh.ids_array
    mapped = [m for m in dims_mapping if m != -1]
    unused = [m for m in range(mesh.rank) if m not in mapped]
    arr = arr.transpose(mapped + unused)
    repl = math.prod(mesh.mesh_dims[m] for m in unused)
    final = [mesh.mesh_dims[m] if m != -1 else 1 for m in dims_mapping] + [repl]
    arr = arr.reshape(final)
    if repl == 1:
        return Sharding.tiled(arr.reshape(final[:-1]))
    return Sharding.partial_tiled(arr)


def shard_shape(shape: Shape, s: Sharding) -> Shape:
    """Per-device shard shape: each dim is rounded up to a tile multiple."""
    if s.is_replicated:
        return shape
    if s.data_rank != shape.rank:
        raise RankMismatch(
            f"sharding rank {s.data_rank} does not match shape rank {shape.rank}"
        )
    dims = tuple(-(-d // s.tiles(i)) for i, d in enumerate(shape.dims))
    return Shape(dims, shape.dtype)


def shard_offset(shape: Shape, s: Sharding, device: int, dim: int) -> int:
    """Element offset of ``device``'s shard along ``dim``."""
    if s.is_replicated:
        return 0
    per = shard_shape(shape, s).dims[dim]
    return s.coord(device, dim) * per


def merge_shardings(s0: Sharding, s1: Sharding) -> Optional[Sharding]:
    """Most refined sharding agreeing with both inputs' shard offsets, if any.

    Two shardings are compatible when a sharding exists whose per-device
    offsets match s0 on every dim s0 shards and s1 on every dim s1 shards.
    Ties break toward the smallest replication subgroup, then the
    lexicographically smallest tile assignment (ascending device order within
    each replication subgroup).
    """
    if s0.is_replicated:
        return s1.clear_unspecified()
    if s1.is_replicated:
        return s0.clear_unspecified()
    if s0.data_rank != s1.data_rank:
        return None
    if set(s0.devices) != set(s1.devices):
        return None
    rank = s0.data_rank
    counts: dict[int, int] = {}
    coord_maps: dict[int, dict[int, int]] = {}
    for d in range(rank):
        t0, t1 = s0.tiles(d), s1.tiles(d)
        if t0 > 1 and t1 > 1:
            if t0 != t1:
                return None
            m0 = {dev: s0.coord(dev, d) for dev in s0.devices}
            m1 = {dev: s1.coord(dev, d) for dev in s1.devices}
            if m0 != m1:
                return None
            counts[d], coord_maps[d] = t0, m0
        elif t0 > 1:
            counts[d] = t0
            coord_maps[d] = {dev: s0.coord(dev, d) for dev in s0.devices}
        elif t1 > 1:
            counts[d] = t1
            coord_maps[d] = {dev: s1.coord(dev, d) for dev in s1.devices}
    return build_sharding_from_coords(rank, counts, coord_maps, sorted(s0.devices))


def build_sharding_from_coords(
    rank: int,
    counts: Mapping[int, int],
    coord_maps: Mapping[int, Mapping[int, int]],
    devices: Sequence[int],
) -> Optional[Sharding]:
    """Construct a sharding with the given per-dim tile coordinates per device.

    Returns None when no valid tiling exists (uneven subgroup sizes or
    out-of-range coordinates). Devices with equal coordinates form a
    replication subgroup, ordered by ascending device id.
    """
    n = len(devices)
    counts = {d: c for d, c in counts.items() if c > 1}
    total = math.prod(counts.values()) if counts else 1
    if total == 0 or n % total != 0:
        return None
    if total == 1:
        return Sharding.replicated()
    repl = n // total
    dims = [counts.get(d, 1) for d in range(rank)]
    buckets: dict[tuple[int, ...], list[int]] = {}
    for dev in devices:
        key = tuple(coord_maps[d][dev] if d in counts else 0 for d in range(rank))
        if any(not 0 <= key[d] < dims[d] for d in range(rank)):
            return None
        buckets.setdefault(key, []).append(dev)
    if len(buckets) != total or any(len(v) != repl for v in buckets.values()):
        return None
    arr = np.zeros(dims + [repl], dtype=np.int64)
    for key, devs in buckets.items():
        arr[key] = sorted(devs)
    if repl == 1:
        return Sharding.tiled(arr.reshape(dims))
    return Sharding.partial_tiled(arr)


def shard_data(
    array: np.ndarray,
    s: Sharding,
    pad_value=0,
    devices: Optional[Sequence[int]] = None,
) -> dict[int, np.ndarray]:
    """Split a full array into per-device shards (padding uneven tails)."""
    array = np.asarray(array)
    if s.is_replicated:
        if devices is None:
            raise ShardingError("device list required to shard replicated data")
        return {int(d): array.copy() for d in devices}
    if s.data_rank != array.ndim:
        raise RankMismatch("array rank does not match sharding rank")
    per = [-(-n // s.tiles(d)) for d, n in enumerate(array.shape)]
    padded_dims = [p * s.tiles(d) for d, p in enumerate(per)]
    padded = np.full(padded_dims, pad_value, dtype=array.dtype)
    padded[tuple(slice(0, n) for n in array.shape)] = array
    out = {}
    for dev in s.devices:
        c = s.coords(dev)[: s.data_rank]
        sel = tuple(slice(c[d] * per[d], (c[d] + 1) * per[d]) for d in range(array.ndim))
        out[int(dev)] = padded[sel].copy()
    return out


def assemble_data(
    shards: Mapping[int, np.ndarray],
    s: Sharding,
    full_shape: Shape,
    rtol: float = 1e-6,
) -> np.ndarray:
    """Inverse of shard_data: reassemble the full array, checking replicas."""
    if s.is_replicated:
        items = sorted(shards.items())
        if not items:
            raise MissingShard("no shards provided")
        ref_dev, ref = items[0]
        for dev, arr in items[1:]:
            _check_replicas(ref, arr, ref_dev, dev, full_shape.dtype, rtol)
        return np.asarray(ref).copy()
    per = [-(-n // s.tiles(d)) for d, n in enumerate(full_shape.dims)]
    padded_dims = [p * s.tiles(d) for d, p in enumerate(per)]
    out = np.zeros(padded_dims, dtype=np_dtype(full_shape.dtype))
    seen: dict[tuple[int, ...], tuple[int, np.ndarray]] = {}
    for dev in s.devices:
        if dev not in shards:
            raise MissingShard(f"missing shard for device {dev}")
        c = s.coords(dev)[: s.data_rank]
        arr = np.asarray(shards[dev])
        if c in seen:
            prev_dev, prev = seen[c]
            _check_replicas(prev, arr, prev_dev, dev, full_shape.dtype, rtol)
        else:
            seen[c] = (dev, arr)
            sel = tuple(
                slice(c[d] * per[d], (c[d] + 1) * per[d]) for d in range(len(per))
            )
            out[sel] = arr
    return out[tuple(slice(0, n) for n in full_shape.dims)].copy()


def _check_replicas(a, b, dev_a, dev_b, dtype, rtol):
    a, b = np.asarray(a), np.asarray(b)
    if dtype.value == "f32":
        scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
        diff = float(np.max(np.abs(a - b))) if a.size else 0.0
        if diff > rtol * scale:
            raise ReplicaDivergence(dev_a, dev_b, diff)
    else:
        if not np.array_equal(a, b):
            diff = float(np.max(np.abs(a.astype(np.int64) - b.astype(np.int64))))
            raise ReplicaDivergence(dev_a, dev_b, diff)


def np_dtype(dtype) -> np.dtype:
    """numpy dtype for an IR dtype."""
    from .ir import DType

    return {
        DType.F32: np.float32,
        DType.S32: np.int32,
        DType.U32: np.uint32,
        DType.PRED: np.bool_,
    }[dtype]
