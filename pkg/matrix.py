"""
This module builds the edge graph of a triangle mesh, both as a NetworkX graph
for topology queries and as sparse matrices (adjacency, Laplacian) for
smoothing.

>>> A = mesh_matrix(len(mesh.vertices), mesh.triangles, matrix="adjacency")
>>> euler_characteristic(len(mesh.vertices), mesh.triangles)
2
"""
import networkx as nx
import numpy as np
import scipy.sparse as sparse


def mesh_edges(triangles):
    """
    The unique undirected edges of a triangle list.

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :return: sorted array of ``(i, j)`` pairs with ``i < j``
    :rtype: numpy.ndarray
    """
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs.sort(axis=1)
    if len(pairs) == 0:
        return pairs
    return np.unique(pairs, axis=0)


def mesh_graph(vertex_count, triangles):
    """
    Creates the edge graph of a mesh. Every vertex is a node, including
    vertices no triangle references.

    :param vertex_count: number of mesh vertices
    :type vertex_count: int

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :return: the undirected edge graph
    :rtype: networkx.Graph
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(vertex_count))
    graph.add_edges_from(map(tuple, mesh_edges(triangles).tolist()))
    return graph


def adjacency_matrix(vertex_count, edges):
    """
    Symmetric 0/1 adjacency matrix of an edge list.

    :param vertex_count: number of mesh vertices
    :type vertex_count: int

    :param edges: ``(i, j)`` pairs, each undirected edge once
    :type edges: numpy.ndarray

    :rtype: scipy.sparse.csr_matrix
    """
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.ones(len(rows), dtype=np.float64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(vertex_count, vertex_count))


def laplacian_matrix(vertex_count, edges):
    """
    Graph Laplacian ``D - A`` of an edge list.

    :rtype: scipy.sparse.csr_matrix
    """
    adjacency = adjacency_matrix(vertex_count, edges)
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    return sparse.csr_matrix(sparse.diags(degree) - adjacency)


MATRIX = {
    "adjacency": adjacency_matrix,
    "laplacian": laplacian_matrix,
}


def mesh_matrix(vertex_count, triangles, matrix="adjacency"):
    """
    Builds a sparse matrix over the edge graph of a mesh.

    :param vertex_count: number of mesh vertices
    :type vertex_count: int

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :param matrix: the type of matrix wanted
    :type matrix: str

    :return: a sparse ``vertex_count x vertex_count`` matrix
    :rtype: scipy.sparse.csr_matrix
    """
    try:
        func = MATRIX[matrix]
    except KeyError:
        raise ValueError(f"Matrix must be one of {list(MATRIX)}")
    return func(vertex_count, mesh_edges(triangles))


def umbrella_operator(vertex_count, triangles):
    """
    The degree-normalized Laplacian ``D^-1 (D - A)`` of the mesh edge graph:
    applied to the vertex positions it gives every vertex minus the mean of
    its 1-ring. Rows of isolated vertices are zero.

    :param vertex_count: number of mesh vertices
    :type vertex_count: int

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :rtype: scipy.sparse.csr_matrix
    """
    laplacian = mesh_matrix(vertex_count, triangles, "laplacian")
    degree = laplacian.diagonal()
    inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    return sparse.csr_matrix(sparse.diags(inverse) @ laplacian)


def euler_characteristic(vertex_count, triangles):
    """
    V - E + F of a triangle mesh, counting only referenced vertices.

    :param vertex_count: number of mesh vertices
    :type vertex_count: int

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :rtype: int
    """
    graph = mesh_graph(vertex_count, triangles)
    used = sum(1 for _, d in graph.degree() if d > 0)
    return used - graph.number_of_edges() + len(np.asarray(triangles).reshape(-1, 3))


def connected_components(vertex_count, triangles):
    """
    Number of connected pieces of the mesh, ignoring unreferenced vertices.

    :rtype: int
    """
    graph = mesh_graph(vertex_count, triangles)
    graph.remove_nodes_from([n for n, d in list(graph.degree()) if d == 0])
    return nx.number_connected_components(graph)
