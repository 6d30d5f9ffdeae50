import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from vcmesh.mesh import build_topology_from_cells
from vcmesh.synthetic import icosahedron, icosphere, path_topology

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def all_pairs_hops(topology):
    """Independent oracle: scipy's unweighted all-pairs shortest paths."""
    n = topology.num_vertices
    rows = [i for i, r in enumerate(topology.adjacency) for _ in r]
    cols = [j for r in topology.adjacency for j in r]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return shortest_path(adj, unweighted=True, directed=False)


@pytest.fixture
def path5():
    return path_topology(5)


@pytest.fixture(scope="session")
def ico_topology():
    verts, faces = icosahedron()
    return build_topology_from_cells(len(verts), faces)


@pytest.fixture(scope="session")
def icosphere162():
    verts, faces = icosphere(2)
    return build_topology_from_cells(len(verts), faces), verts, faces
