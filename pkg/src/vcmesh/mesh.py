"""Mesh and graph ingestion plus topology queries.

Every mesh is reduced to a :class:`MeshTopology`: a vertex count and an
undirected, symmetric adjacency.  Cells of any arity (edges, triangles,
polygons, tetrahedra) contribute a clique over their vertices, which lets
surface meshes, volumetric tet meshes and bridged non-manifold graphs share
one code path.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeshTopology:
    """Vertex count plus a sorted, symmetric neighbor list per vertex."""

    num_vertices: int
    adjacency: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.adjacency) != self.num_vertices:
            raise InputError(
                f"adjacency has {len(self.adjacency)} rows for {self.num_vertices} vertices"
            )

    @classmethod
    def from_edges(cls, num_vertices: int, edges: Iterable[tuple[int, int]]) -> "MeshTopology":
        nbrs: list[set[int]] = [set() for _ in range(num_vertices)]
        for a, b in edges:
            a, b = int(a), int(b)
            if not (0 <= a < num_vertices and 0 <= b < num_vertices):
                raise InputError(f"edge ({a}, {b}) out of range for {num_vertices} vertices")
            if a == b:
                continue
            nbrs[a].add(b)
            nbrs[b].add(a)
        return cls(num_vertices, tuple(tuple(sorted(s)) for s in nbrs))

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges as ``(i, j)`` with ``i < j``, sorted."""
        return [(i, j) for i, row in enumerate(self.adjacency) for j in row if i < j]

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def degrees(self) -> np.ndarray:
        return np.array([len(row) for row in self.adjacency], dtype=np.int64)

    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(N, max_degree)`` neighbor table and its validity mask."""
        width = max(1, int(self.degrees().max(initial=0)))
        table = np.zeros((self.num_vertices, width), dtype=np.int64)
        mask = np.zeros((self.num_vertices, width), dtype=bool)
        for i, row in enumerate(self.adjacency):
            table[i, : len(row)] = row
            mask[i, : len(row)] = True
        return table, mask


@dataclass
class VertexFeatures:
    """Dense ``num_vertices x channels`` feature matrix."""

    values: np.ndarray
    label: str = "position-xyz"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"vertex features must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("vertex features contain non-finite entries")

    @property
    def num_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class MeshDataset:
    """Samples sharing one fixed topology (a registered mesh set)."""

    topology: MeshTopology
    samples: list[VertexFeatures]
    splits: list[str] = field(default_factory=list)

    def __post_init__(self):
        for k, s in enumerate(self.samples):
            if s.num_vertices != self.topology.num_vertices:
                raise InputError(
                    f"sample {k} has {s.num_vertices} vertices, topology has "
                    f"{self.topology.num_vertices}"
                )
        if not self.splits:
            self.splits = ["train"] * len(self.samples)
        if len(self.splits) != len(self.samples):
            raise InputError("one split label per sample is required")

    def subset(self, split: str) -> np.ndarray:
        """Stacked ``(S, N, C)`` array of the samples carrying ``split``."""
        rows = [s.values for s, lab in zip(self.samples, self.splits) if lab == split]
        if not rows:
            c = self.samples[0].channels if self.samples else 3
            return np.zeros((0, self.topology.num_vertices, c))
        return np.stack(rows)


def build_topology_from_cells(num_vertices: int, cells: Iterable[Sequence[int]]) -> MeshTopology:
    """Build adjacency where two vertices are linked iff they share a cell."""
    edges = []
    for c, cell in enumerate(cells):
        cell = [int(i) for i in cell]
        if len(cell) < 2:
            raise InputError(f"cell {c} has {len(cell)} vertices; at least 2 required")
        for i in cell:
            if not 0 <= i < num_vertices:
                raise InputError(f"cell {c} references vertex {i}, only {num_vertices} exist")
        edges.extend(combinations(cell, 2))
    return MeshTopology.from_edges(num_vertices, edges)


def load_obj(path) -> tuple[MeshTopology, VertexFeatures]:
    """Read positions and faces from a Wavefront OBJ file.

    Only ``v`` and ``f`` records are interpreted; normals, texture
    coordinates, groups and materials are skipped.  Face tokens may use the
    ``v/vt/vn`` form and negative (relative) indices.
    """
    path = Path(path)
    positions: list[list[float]] = []
    faces: list[tuple[list[int], int]] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ParseError("vertex record needs 3 coordinates", path, lineno)
                try:
                    positions.append([float(t) for t in rest[:3]])
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}", path, lineno) from None
            elif tag == "f":
                if len(rest) < 2:
                    raise ParseError("face record needs at least 2 indices", path, lineno)
                idx = []
                for tok in rest:
                    try:
                        k = int(tok.split("/", 1)[0])
                    except ValueError:
                        raise ParseError(f"bad face index {tok!r}", path, lineno) from None
                    if k == 0:
                        raise ParseError("face index 0 is invalid (indices are 1-based)", path, lineno)
                    idx.append(k)
                faces.append((idx, lineno))
    n = len(positions)
    cells = []
    for idx, lineno in faces:
        cell = [k - 1 if k > 0 else n + k for k in idx]
        for k, c in zip(idx, cell):
            if not 0 <= c < n:
                raise InputError(f"{path}:{lineno}: face index {k} out of range for {n} vertices")
        cells.append(cell)
    topo = build_topology_from_cells(n, cells)
    feats = VertexFeatures(np.array(positions, dtype=np.float64).reshape(n, 3))
    return topo, feats


def read_obj_faces(path) -> list[list[int]]:
    """Return the 0-based face index lists of an OBJ file (no validation)."""
    faces = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line.startswith("f "):
                faces.append([int(t.split("/", 1)[0]) - 1 for t in line.split()[1:]])
    return faces


def write_obj(path, positions: np.ndarray, faces: Sequence[Sequence[int]] = ()) -> None:
    """Write positions (and optional 0-based faces) as OBJ with round-trip precision."""
    positions = np.asarray(positions, dtype=np.float64)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in positions[:, :3].tolist()]
    lines += ["f " + " ".join(str(int(i) + 1) for i in face) for face in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cells(path) -> tuple[MeshTopology, VertexFeatures, str]:
    """Read the plain-text cell format used for tet and non-manifold meshes.

    Layout::

        verts N cells M celltype T
        x y z            (N lines)
        i j k ...        (M lines, 0-based)
    """
    path = Path(path)
    with path.open() as fh:
        lines = [(k, ln.split("#", 1)[0].strip()) for k, ln in enumerate(fh, start=1)]
    lines = [(k, ln) for k, ln in lines if ln]
    if not lines:
        raise ParseError("empty cell file", path, 1)
    lineno, header = lines[0]
    tok = header.split()
    if len(tok) != 6 or tok[0] != "verts" or tok[2] != "cells" or tok[4] != "celltype":
        raise ParseError("header must be 'verts N cells M celltype T'", path, lineno)
    try:
        n, m = int(tok[1]), int(tok[3])
    except ValueError:
        raise ParseError("vertex and cell counts must be integers", path, lineno) from None
    celltype = tok[5]
    body = lines[1:]
    if len(body) != n + m:
        raise ParseError(f"expected {n + m} records after header, found {len(body)}", path, lineno)
    pos = np.zeros((n, 3))
    for row, (k, ln) in enumerate(body[:n]):
        try:
            vals = [float(t) for t in ln.split()]
        except ValueError:
            raise ParseError("bad coordinate", path, k) from None
        if len(vals) != 3:
            raise ParseError("position line needs exactly 3 values", path, k)
        pos[row] = vals
    cells = []
    for k, ln in body[n:]:
        try:
            cells.append([int(t) for t in ln.split()])
        except ValueError:
            raise ParseError("bad cell index", path, k) from None
    return build_topology_from_cells(n, cells), VertexFeatures(pos), celltype


def load_mesh(path) -> tuple[MeshTopology, VertexFeatures]:
    """Dispatch on suffix: ``.obj`` is Wavefront, anything else the cell format."""
    if Path(path).suffix.lower() == ".obj":
        return load_obj(path)
    topo, feats, _ = load_cells(path)
    return topo, feats


def bfs_distances(topology: MeshTopology, source: int, max_depth: int | None = None) -> dict[int, int]:
    """Hop distances from ``source`` to every vertex within ``max_depth``."""
    dist = {source: 0}
    queue = deque([source])
    adj = topology.adjacency
    while queue:
        v = queue.popleft()
        d = dist[v]
        if max_depth is not None and d >= max_depth:
            continue
        for u in adj[v]:
            if u not in dist:
                dist[u] = d + 1
                queue.append(u)
    return dist


def k_ring(topology: MeshTopology, v: int, k: int) -> set[int]:
    """All vertices within ``k`` hops of ``v``, including ``v`` itself."""
    if not 0 <= v < topology.num_vertices:
        raise InputError(f"vertex {v} out of range for {topology.num_vertices} vertices")
    if k < 0:
        raise InputError(f"ring radius must be nonnegative, got {k}")
    return set(bfs_distances(topology, v, k))


def connected_components(topology: MeshTopology) -> np.ndarray:
    """Component label per vertex, numbered 0..C-1 in order of lowest vertex."""
    labels = np.full(topology.num_vertices, -1, dtype=np.int64)
    current = 0
    for start in range(topology.num_vertices):
        if labels[start] >= 0:
            continue
        labels[start] = current
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in topology.adjacency[v]:
                if labels[u] < 0:
                    labels[u] = current
                    queue.append(u)
        current += 1
    return labels


def bridge_components(topology: MeshTopology, positions: VertexFeatures, threshold: float) -> MeshTopology:
    """Connect close components by one edge between their nearest vertex pair.

    Two components are close when their minimum Euclidean vertex distance is
    at most ``threshold``.  Ties resolve to the lexicographically lowest
    ``(i, j)`` pair.  Passes repeat until no close pair of distinct
    components remains.
    """
    pos = positions.values if isinstance(positions, VertexFeatures) else np.asarray(positions, float)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise InputError(f"bridging needs 3-channel positions, got shape {pos.shape}")
    if pos.shape[0] != topology.num_vertices:
        raise InputError("positions and topology disagree on vertex count")
    pairs = cKDTree(pos).query_pairs(r=threshold, output_type="ndarray")
    if len(pairs) == 0:
        return topology
    d = np.linalg.norm(pos[pairs[:, 0]] - pos[pairs[:, 1]], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], d))
    pairs, d = pairs[order], d[order]

    edges = set(topology.edges())
    while True:
        topo = MeshTopology.from_edges(topology.num_vertices, edges)
        labels = connected_components(topo)
        best: dict[tuple[int, int], tuple[int, int]] = {}
        for (i, j) in pairs.tolist():
            a, b = labels[i], labels[j]
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            # pairs are pre-sorted by (distance, i, j): the first hit is the winner
            if key not in best:
                best[key] = (min(i, j), max(i, j))
        if not best:
            return topo
        logger.info("bridging %d component pairs", len(best))
        edges.update(best.values())
