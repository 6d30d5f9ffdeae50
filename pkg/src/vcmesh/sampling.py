"""Topology-driven graph down/up-sampling with stride and radius control.

A level of the hierarchy selects a subset of vertices that are mutually at
least ``s`` hops apart, links two selected vertices when they are within
``2s - 1`` hops, and records two neighborhood tables:

* the down map: for every selected vertex, its ``r``-ring in the fine graph;
* the up map: for every fine vertex, the selected vertices inside its
  ``r``-ring, expressed as coarse indices.

Both are stored ragged (one sorted row per output vertex) and can be
expanded to the dense ``N x max(E_i)`` table-plus-mask layout consumed by
the layers.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .mesh import MeshTopology, bfs_distances, connected_components

MAGIC = b"VCMHIER\x00"
VERSION = 1


@dataclass(frozen=True)
class SamplingMap:
    direction: str
    stride: int
    radius: int
    in_vertices: int
    out_vertices: int
    rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.direction not in ("down", "up"):
            raise InputError(f"direction must be 'down' or 'up', got {self.direction!r}")
        if len(self.rows) != self.out_vertices:
            raise InputError("one neighborhood row per output vertex is required")
        for i, row in enumerate(self.rows):
            if not row:
                raise InputError(f"neighborhood of output vertex {i} is empty")
            if len(set(row)) != len(row):
                raise InputError(f"neighborhood of output vertex {i} has duplicates")
            if min(row) < 0 or max(row) >= self.in_vertices:
                raise InputError(f"neighborhood of output vertex {i} indexes outside the input graph")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(r) for r in self.rows], dtype=np.int64)

    @property
    def total_size(self) -> int:
        return int(self.sizes.sum())

    @property
    def max_size(self) -> int:
        return int(self.sizes.max())

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """``(table, mask)``; vacant slots hold index 0 and mask ``False``."""
        table = np.zeros((self.out_vertices, self.max_size), dtype=np.int64)
        mask = np.zeros(table.shape, dtype=bool)
        for i, row in enumerate(self.rows):
            table[i, : len(row)] = row
            mask[i, : len(row)] = True
        return table, mask

    @classmethod
    def from_dense(cls, table, mask, *, direction, stride, radius, in_vertices) -> "SamplingMap":
        rows = tuple(tuple(int(v) for v in t[m]) for t, m in zip(np.asarray(table), np.asarray(mask)))
        return cls(direction, stride, radius, in_vertices, len(rows), rows)

    def incidence(self) -> set[tuple[int, int]]:
        """``(output, input)`` index pairs."""
        return {(i, j) for i, row in enumerate(self.rows) for j in row}


@dataclass(frozen=True)
class SamplingLevel:
    stride: int
    radius: int
    pinned: tuple[int, ...]
    selected: tuple[int, ...]
    coarse: MeshTopology
    down: SamplingMap
    up: SamplingMap


@dataclass(frozen=True)
class SamplingHierarchy:
    base: MeshTopology
    levels: tuple[SamplingLevel, ...]
    seed: int = 0

    @property
    def depth(self) -> int:
        return len(self.levels)

    def topology(self, level: int) -> MeshTopology:
        """Input graph of ``level``; ``depth`` gives the coarsest graph."""
        return self.base if level == 0 else self.levels[level - 1].coarse

    def vertex_counts(self) -> list[int]:
        return [self.base.num_vertices] + [lv.coarse.num_vertices for lv in self.levels]

    def anchors(self) -> list[int]:
        """Base-mesh vertex index of every coarsest-level vertex."""
        idx = list(range(self.base.num_vertices))
        for lv in self.levels:
            idx = [idx[v] for v in lv.selected]
        return idx

    def to_bytes(self) -> bytes:
        return serialize_hierarchy(self)

    def fingerprint(self) -> int:
        return hierarchy_fingerprint(self.to_bytes())


@dataclass(frozen=True)
class ReceptiveField:
    latent_vertex: int
    vertices: frozenset = field(default_factory=frozenset)


def _ring(topology: MeshTopology, v: int, k: int) -> list[int]:
    return list(bfs_distances(topology, v, k))


def select_vertices(topology: MeshTopology, stride: int, pinned: Sequence[int] = (), seed: int = 0) -> list[int]:
    """Pick vertices mutually at least ``stride`` hops apart that cover the graph.

    Per connected component the traversal starts from the pinned vertices of
    that component, or else from a seeded random vertex.  Each selected
    vertex removes its ``(stride-1)``-ring, then its exact ``stride``-ring is
    scanned in ascending index order and every still-unmarked vertex found
    there is selected and queued.
    """
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    n = topology.num_vertices
    pinned = sorted({int(p) for p in pinned})
    for p in pinned:
        if not 0 <= p < n:
            raise InputError(f"pinned vertex {p} out of range for {n} vertices")
    if stride == 1:
        return list(range(n))

    pinned_set = set(pinned)
    for p in pinned:
        near = bfs_distances(topology, p, stride - 1)
        clash = sorted(q for q in pinned_set if q != p and q in near)
        if clash:
            raise InputError(
                f"pinned vertices {p} and {clash[0]} are {near[clash[0]]} hops apart; "
                f"stride {stride} needs at least {stride}"
            )

    UNMARKED, REMOVED, SELECTED = 0, 1, 2
    state = np.zeros(n, dtype=np.int8)

    def select(v):
        for u in _ring(topology, v, stride - 1):
            if state[u] == UNMARKED:
                state[u] = REMOVED
        state[v] = SELECTED

    for p in pinned:
        select(p)

    labels = connected_components(topology)
    rng = np.random.default_rng(seed)
    for comp in range(int(labels.max(initial=-1)) + 1):
        members = np.flatnonzero(labels == comp)
        queue = deque(p for p in pinned if labels[p] == comp)
        if not queue:
            start = int(members[rng.integers(len(members))])
            select(start)
            queue.append(start)
        while True:
            while queue:
                v = queue.popleft()
                dist = bfs_distances(topology, v, stride)
                for u in sorted(u for u, d in dist.items() if d == stride):
                    # an unmarked vertex has no selected vertex within stride-1 hops
                    if state[u] == UNMARKED:
                        select(u)
                        queue.append(u)
            rest = members[state[members] == UNMARKED]
            if len(rest) == 0:
                break
            select(int(rest[0]))
            queue.append(int(rest[0]))
    return [int(v) for v in np.flatnonzero(state == SELECTED)]


def build_coarse_topology(topology: MeshTopology, selected: Sequence[int], stride: int) -> MeshTopology:
    """Link two selected vertices iff their fine graph distance is <= 2*stride - 1."""
    index = {v: c for c, v in enumerate(selected)}
    edges = []
    for a, v in enumerate(selected):
        for u in bfs_distances(topology, v, 2 * stride - 1):
            b = index.get(u)
            if b is not None and b > a:
                edges.append((a, b))
    return MeshTopology.from_edges(len(selected), edges)


def build_down_map(topology: MeshTopology, selected: Sequence[int], stride: int, radius: int) -> SamplingMap:
    if len(selected) == 0:
        raise InputError("down map needs at least one selected vertex")
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    rows = tuple(tuple(sorted(bfs_distances(topology, v, radius))) for v in selected)
    return SamplingMap("down", stride, radius, topology.num_vertices, len(selected), rows)


def build_up_map(topology: MeshTopology, selected: Sequence[int], stride: int, radius: int) -> SamplingMap:
    if len(selected) == 0:
        raise InputError("up map needs at least one selected vertex")
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    index = {v: c for c, v in enumerate(selected)}
    rows = []
    for y in range(topology.num_vertices):
        row = sorted(index[u] for u in bfs_distances(topology, y, radius) if u in index)
        if not row:
            raise ConfigurationError(
                f"fine vertex {y} has no selected vertex within radius {radius} "
                f"(stride {stride}); use radius >= stride - 1"
            )
        rows.append(tuple(row))
    return SamplingMap("up", stride, radius, len(selected), topology.num_vertices, tuple(rows))


def build_level(topology: MeshTopology, stride: int, radius: int, pinned: Sequence[int] = (), seed: int = 0) -> SamplingLevel:
    selected = select_vertices(topology, stride, pinned, seed)
    return SamplingLevel(
        stride=stride,
        radius=radius,
        pinned=tuple(sorted({int(p) for p in pinned})),
        selected=tuple(selected),
        coarse=build_coarse_topology(topology, selected, stride),
        down=build_down_map(topology, selected, stride, radius),
        up=build_up_map(topology, selected, stride, radius),
    )


def build_hierarchy(topology: MeshTopology, specs, seed: int = 0, pin: Sequence[int] = ()) -> SamplingHierarchy:
    """Chain sampling levels, each coarsening the previous level's output.

    ``specs`` holds ``(stride, radius)`` or ``(stride, radius, pinned)``
    tuples; ``pinned`` indexes the level's own input graph.  ``pin`` lists
    base-mesh vertices that are carried through every level, so they end up
    as latent vertices.
    """
    specs = list(specs)
    if not specs:
        raise InputError("a hierarchy needs at least one level")
    carried = [int(p) for p in pin]
    levels = []
    topo = topology
    for k, spec in enumerate(specs):
        stride, radius, *rest = spec
        pinned = set(int(p) for p in (rest[0] if rest else ()))
        pinned.update(carried)
        level = build_level(topo, int(stride), int(radius), sorted(pinned), seed + k)
        position = {v: c for c, v in enumerate(level.selected)}
        carried = [position[p] for p in carried]
        levels.append(level)
        topo = level.coarse
    return SamplingHierarchy(topology, tuple(levels), seed)


def receptive_field(hierarchy: SamplingHierarchy, latent_vertex: int) -> ReceptiveField:
    """Base vertices reachable from a latent vertex through the up maps."""
    n_latent = hierarchy.vertex_counts()[-1]
    if not 0 <= latent_vertex < n_latent:
        raise InputError(f"latent vertex {latent_vertex} out of range for {n_latent}")
    current = {latent_vertex}
    for level in reversed(hierarchy.levels):
        current = {y for y, row in enumerate(level.up.rows) if current.intersection(row)}
    return ReceptiveField(latent_vertex, frozenset(current))


# -- serialization -------------------------------------------------------------

def _put_u32(buf, *values):
    buf.write(struct.pack(f"<{len(values)}I", *values))


def _put_array(buf, values):
    arr = np.asarray(values, dtype="<u4")
    _put_u32(buf, arr.size)
    buf.write(arr.tobytes())


def _put_ragged(buf, rows):
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(r) for r in rows])
    _put_array(buf, offsets)
    _put_array(buf, [v for r in rows for v in r])


def _put_map(buf, m: SamplingMap):
    _put_u32(buf, 0 if m.direction == "down" else 1, m.stride, m.radius, m.in_vertices, m.out_vertices)
    _put_ragged(buf, m.rows)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u32(self, count=1):
        end = self.pos + 4 * count
        if end > len(self.data):
            raise InputError("hierarchy file is truncated")
        vals = struct.unpack_from(f"<{count}I", self.data, self.pos)
        self.pos = end
        return vals if count > 1 else vals[0]

    def array(self):
        n = self.u32()
        end = self.pos + 4 * n
        if end > len(self.data):
            raise InputError("hierarchy file is truncated")
        arr = np.frombuffer(self.data, dtype="<u4", count=n, offset=self.pos).astype(np.int64)
        self.pos = end
        return arr

    def ragged(self):
        offsets, flat = self.array(), self.array()
        return tuple(tuple(int(v) for v in flat[a:b]) for a, b in zip(offsets[:-1], offsets[1:]))

    def sampling_map(self):
        direction, stride, radius, n_in, n_out = self.u32(5)
        return SamplingMap("down" if direction == 0 else "up", stride, radius, n_in, n_out, self.ragged())


def serialize_hierarchy(h: SamplingHierarchy) -> bytes:
    """Versioned little-endian binary layout; every index is a uint32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    _put_u32(buf, VERSION)
    buf.write(struct.pack("<Q", h.seed))
    _put_u32(buf, h.base.num_vertices)
    _put_ragged(buf, h.base.adjacency)
    _put_u32(buf, len(h.levels))
    for lv in h.levels:
        _put_u32(buf, lv.stride, lv.radius)
        _put_array(buf, lv.pinned)
        _put_array(buf, lv.selected)
        _put_u32(buf, lv.coarse.num_vertices)
        _put_ragged(buf, lv.coarse.adjacency)
        _put_map(buf, lv.down)
        _put_map(buf, lv.up)
    return buf.getvalue()


def deserialize_hierarchy(data: bytes) -> SamplingHierarchy:
    if data[: len(MAGIC)] != MAGIC:
        raise InputError("not a hierarchy file (bad magic bytes)")
    rd = _Reader(data)
    rd.pos = len(MAGIC)
    version = rd.u32()
    if version != VERSION:
        raise InputError(f"unsupported hierarchy version {version}")
    if rd.pos + 8 > len(data):
        raise InputError("hierarchy file is truncated")
    (seed,) = struct.unpack_from("<Q", data, rd.pos)
    rd.pos += 8
    n_base = rd.u32()
    base = MeshTopology(n_base, rd.ragged())
    levels = []
    for _ in range(rd.u32()):
        stride, radius = rd.u32(2)
        pinned = tuple(int(v) for v in rd.array())
        selected = tuple(int(v) for v in rd.array())
        n_coarse = rd.u32()
        coarse = MeshTopology(n_coarse, rd.ragged())
        down = rd.sampling_map()
        up = rd.sampling_map()
        levels.append(SamplingLevel(stride, radius, pinned, selected, coarse, down, up))
    if rd.pos != len(data):
        raise InputError("trailing bytes after hierarchy payload")
    return SamplingHierarchy(base, tuple(levels), seed)


def hierarchy_fingerprint(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def save_hierarchy(h: SamplingHierarchy, path) -> None:
    with open(path, "wb") as fh:
        fh.write(h.to_bytes())


def load_hierarchy(path) -> SamplingHierarchy:
    with open(path, "rb") as fh:
        return deserialize_hierarchy(fh.read())


def summarize(h: SamplingHierarchy) -> str:
    lines = [f"level 0: {h.base.num_vertices} vertices (base)"]
    for k, lv in enumerate(h.levels, start=1):
        d, u = lv.down.sizes, lv.up.sizes
        lines.append(
            f"level {k}: {lv.coarse.num_vertices} vertices  s={lv.stride} r={lv.radius}  "
            f"down E mean {d.mean():.2f} max {d.max()}  up E mean {u.mean():.2f} max {u.max()}"
        )
    return "\n".join(lines)
