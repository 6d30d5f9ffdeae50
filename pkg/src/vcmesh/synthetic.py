"""Procedural meshes and a desk-scale deformation dataset."""

from __future__ import annotations

import numpy as np

from .mesh import MeshDataset, MeshTopology, VertexFeatures, build_topology_from_cells


def icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, faces


def icosphere(subdiv: int = 2) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Unit icosphere by repeated midpoint subdivision (10 * 4**subdiv + 2 vertices)."""
    verts, faces = icosahedron()
    verts = list(map(tuple, verts))
    for _ in range(subdiv):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts, dtype=np.float64), faces


def grid(n: int) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Triangulated ``(n+1) x (n+1)`` unit square in the z=0 plane."""
    side = n + 1
    xs, ys = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(side * side)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a, b = i * side + j, (i + 1) * side + j
            faces += [(a, b, a + 1), (b, b + 1, a + 1)]
    return verts, faces


def path_topology(n: int) -> MeshTopology:
    return MeshTopology.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def base_mesh(kind: str, subdiv: int):
    if kind == "icosphere":
        return icosphere(subdiv)
    if kind == "grid":
        return grid(max(1, 2**subdiv))
    raise ValueError(f"unknown base mesh {kind!r}")


def deform(base: np.ndarray, rng: np.random.Generator, amplitude: float = 0.1, fields: int = 3) -> np.ndarray:
    """Displace ``base`` by a sum of random low-frequency sinusoidal fields.

    Each field has peak displacement ``amplitude`` times the bounding-box
    diagonal, a random unit direction, a wave vector of 0.5-1.5 cycles per
    diagonal and a random phase.
    """
    diag = float(np.linalg.norm(base.max(axis=0) - base.min(axis=0)))
    out = base.copy()
    for _ in range(fields):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wave = rng.normal(size=3)
        wave *= 2.0 * np.pi * rng.uniform(0.5, 1.5) / (np.linalg.norm(wave) * diag)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += amplitude * diag * np.sin(base @ wave + phase)[:, None] * direction
    return out


def make_synthetic(kind: str = "icosphere", subdiv: int = 2, samples: int = 64, seed: int = 7,
                   amplitude: float = 0.1):
    """Return ``(faces, dataset)`` of ``samples`` smooth deformations of a base mesh."""
    verts, faces = base_mesh(kind, subdiv)
    topo = build_topology_from_cells(len(verts), faces)
    rng = np.random.default_rng(seed)
    data = [VertexFeatures(deform(verts, rng, amplitude)) for _ in range(samples)]
    return faces, MeshDataset(topo, data)


def random_graph(n: int, rng: np.random.Generator, extra_edges: int | None = None,
                 components: int = 1) -> MeshTopology:
    """Random graph: a random spanning forest with ``components`` trees plus chords."""
    perm = rng.permutation(n)
    edges = []
    bounds = np.linspace(0, n, components + 1).astype(int)
    for a, b in zip(bounds[:-1], bounds[1:]):
        part = perm[a:b]
        for k in range(1, len(part)):
            edges.append((int(part[k]), int(part[rng.integers(k)])))
        if extra_edges is None:
            chords = len(part)
        else:
            chords = extra_edges // components
        if len(part) > 1:
            for _ in range(chords):
                i, j = rng.choice(part, size=2, replace=False)
                edges.append((int(i), int(j)))
    return MeshTopology.from_edges(n, edges)
