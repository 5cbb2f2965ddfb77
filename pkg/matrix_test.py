"""
File for testing the ``matrix.py`` module.
"""
import networkx as nx
import numpy as np
import pytest

import matrix

# unit cube, outward triangles
CUBE_TRIANGLES = np.array([
    [0, 2, 1], [0, 3, 2],
    [4, 5, 6], [4, 6, 7],
    [0, 1, 5], [0, 5, 4],
    [3, 7, 6], [3, 6, 2],
    [0, 4, 7], [0, 7, 3],
    [1, 2, 6], [1, 6, 5],
])

OCTAHEDRON_TRIANGLES = np.array([
    [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
    [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
])


def test_mesh_edges_cube():
    edges = matrix.mesh_edges(CUBE_TRIANGLES)
    # 12 cube edges plus one diagonal per face
    assert len(edges) == 18
    assert np.all(edges[:, 0] < edges[:, 1])


def test_mesh_edges_empty():
    assert len(matrix.mesh_edges(np.zeros((0, 3), dtype=int))) == 0


def test_mesh_graph_keeps_isolated_vertices():
    g = matrix.mesh_graph(10, CUBE_TRIANGLES)
    assert g.number_of_nodes() == 10
    assert g.degree(9) == 0


@pytest.mark.parametrize("n, triangles", [
    (8, CUBE_TRIANGLES),
    (6, OCTAHEDRON_TRIANGLES),
])
def test_euler_characteristic_closed(n, triangles):
    assert matrix.euler_characteristic(n, triangles) == 2


def test_euler_characteristic_open():
    # removing one face of the octahedron leaves a disk
    assert matrix.euler_characteristic(6, OCTAHEDRON_TRIANGLES[1:]) == 1


def test_connected_components():
    two = np.concatenate([CUBE_TRIANGLES, OCTAHEDRON_TRIANGLES + 8])
    assert matrix.connected_components(20, two) == 2
    assert matrix.connected_components(8, CUBE_TRIANGLES) == 1


@pytest.mark.parametrize("kind", ["adjacency", "laplacian"])
def test_mesh_matrix_matches_networkx(kind):
    g = matrix.mesh_graph(6, OCTAHEDRON_TRIANGLES)
    m = matrix.mesh_matrix(6, OCTAHEDRON_TRIANGLES, matrix=kind).toarray()
    expected = nx.to_numpy_array(g, nodelist=range(6), weight=None)
    if kind == "laplacian":
        expected = np.diag(expected.sum(axis=1)) - expected
    assert np.array_equal(m, expected)


def test_mesh_matrix_unknown():
    with pytest.raises(ValueError):
        matrix.mesh_matrix(8, CUBE_TRIANGLES, matrix="incidence")


def test_umbrella_rows():
    op = matrix.umbrella_operator(7, OCTAHEDRON_TRIANGLES).toarray()
    assert np.allclose(op.sum(axis=1), 0.0)
    assert np.array_equal(np.diag(op), [1.0] * 6 + [0.0])
    # vertex 6 is not referenced
    assert np.array_equal(op[6], np.zeros(7))
    assert np.allclose(op[0][op[0] < 0], -0.25)


def test_umbrella_matches_laplacian():
    laplacian = matrix.mesh_matrix(8, CUBE_TRIANGLES, matrix="laplacian").toarray()
    op = matrix.umbrella_operator(8, CUBE_TRIANGLES).toarray()
    assert np.allclose(op * np.diag(laplacian)[:, None], laplacian)


def test_umbrella_mean_of_ring():
    vertices = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                         [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    op = matrix.umbrella_operator(6, OCTAHEDRON_TRIANGLES)
    # every ring is two opposite pairs, centred at the origin
    assert np.allclose(vertices - op @ vertices, 0.0)
