"""
This module turns scalar grids into triangle meshes and meshes into oriented
point clouds: marching cubes isosurface extraction, Laplacian smoothing,
area-weighted surface sampling, and mesh volume. It also reads and writes the
two geometry formats of the pipeline, an ASCII OBJ subset for meshes and binary
little-endian PLY for oriented point clouds. All coordinates are millimeters.

>>> mesh = marching_cubes(volgrid.sample_signed_field(mask), 0.5)
>>> mesh = laplacian_smooth(mesh, 0.5, 10)
>>> cloud = sample_surface(mesh, 800000, np.random.default_rng(0))
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

import matrix
from errors import EmptyInputError, FormatError

logger = logging.getLogger(__name__)

MM3_PER_LITER = 1e6

# Smoothing and sampling defaults
SMOOTH_LAMBDA = 0.5
SMOOTH_ITERS = 10
SURFACE_POINTS = 800000

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")])


def _normalize_rows(v, fallback=(0.0, 0.0, 1.0)):
    norms = np.linalg.norm(v, axis=1)
    out = np.empty_like(v)
    ok = norms > 0
    out[ok] = v[ok] / norms[ok, None]
    out[~ok] = fallback
    return out


def triangle_cross(vertices, triangles):
    """
    Unnormalized triangle normals ``(v1 - v0) x (v2 - v0)``; their length is
    twice the triangle area.
    """
    v0 = vertices[triangles[:, 0]]
    return np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)


def vertex_normals(vertices, triangles):
    """
    Area-weighted averages of the normals of the triangles around each vertex,
    renormalized to unit length. Vertices without triangles get +z.

    :param vertices: vertex positions
    :type vertices: numpy.ndarray

    :param triangles: vertex index triples
    :type triangles: numpy.ndarray

    :return: unit normals, one per vertex
    :rtype: numpy.ndarray
    """
    accum = np.zeros_like(vertices)
    if len(triangles):
        cross = triangle_cross(vertices, triangles)
        for k in range(3):
            np.add.at(accum, triangles[:, k], cross)
    return _normalize_rows(accum)


@dataclass
class TriMesh:
    """
    A triangle surface mesh with outward unit vertex normals.
    """
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise FormatError("triangle index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def build(cls, vertices, triangles):
        """
        Creates a mesh, dropping zero-area triangles and compacting away the
        vertices that are no longer referenced.

        :param vertices: vertex positions in mm
        :type vertices: numpy.ndarray

        :param triangles: vertex index triples
        :type triangles: numpy.ndarray

        :rtype: TriMesh
        """
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles):
            area2 = np.linalg.norm(triangle_cross(vertices, triangles), axis=1)
            triangles = triangles[area2 > 0]
        used = np.unique(triangles)
        remap = np.full(len(vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return cls(vertices[used], remap[triangles])

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def translated(self, offset):
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles, self.normals)

    def scaled(self, factor):
        return TriMesh(self.vertices * float(factor), self.triangles, self.normals)


@dataclass
class OrientedPointCloud:
    """
    Points with unit normals in millimeters, plus an optional integer tag per
    point (e.g. the index of the source triangle).
    """
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tags: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.points.shape != self.normals.shape:
            raise FormatError("points and normals must have the same shape")
        if self.tags is not None:
            self.tags = np.asarray(self.tags).reshape(-1)
            if len(self.tags) != len(self.points):
                raise FormatError("one tag per point is required")

    def __len__(self):
        return len(self.points)

    def subset(self, index):
        """
        The cloud restricted to ``index`` (boolean mask or integer indices).
        """
        tags = None if self.tags is None else self.tags[index]
        return OrientedPointCloud(self.points[index], self.normals[index], tags)


### marching cubes ###

def marching_cubes(grid, iso):
    """
    Extracts the ``iso`` surface of a scalar grid with
    :func:`skimage.measure.marching_cubes`. Its Lewiner variant resolves the
    ambiguous cube cases consistently and shares vertices between neighbouring
    cubes, so closed surfaces come out watertight. The grid is padded with a
    value below ``iso`` so surfaces touching the border close.

    Triangles face away from the region with values ``>= iso``.

    :param grid: the scalar grid (values indexed ``[x, y, z]``)
    :type grid: volgrid.ScalarGrid

    :param iso: the iso value
    :type iso: float

    :return: the iso-surface in physical mm; empty if nothing crosses ``iso``
    :rtype: TriMesh
    """
    values = np.asarray(grid.values, dtype=np.float64)
    if min(values.shape) < 2:
        raise FormatError(f"marching cubes needs at least 2 samples per axis, got {values.shape}")
    if not np.any(values >= iso):
        logger.debug("No iso crossing at %s", iso)
        return TriMesh()
    values = np.pad(values, 1, mode="constant", constant_values=min(values.min(), iso - 1.0))

    positions, triangles, _, _ = measure.marching_cubes(values, level=iso, method="lewiner")
    spacing = np.asarray(grid.spacing_mm, dtype=np.float64)
    origin = np.asarray(grid.origin_mm, dtype=np.float64)
    vertices = (positions.astype(np.float64) - 1.0) * spacing + origin

    m = TriMesh.build(vertices, triangles)
    if signed_volume_mm3(m) < 0:
        m = TriMesh(m.vertices, m.triangles[:, ::-1])
    logger.debug("Marching cubes: %d vertices, %d triangles", len(m.vertices), len(m.triangles))
    return m


### smoothing ###

def laplacian_smooth(m, lam=SMOOTH_LAMBDA, iters=SMOOTH_ITERS):
    """
    Moves every vertex toward the mean of its 1-ring neighbours by the factor
    ``lam``, ``iters`` times. Connectivity is unchanged and normals are
    recomputed afterwards. Isolated vertices stay where they are.

    :param m: the mesh
    :type m: TriMesh

    :param lam: the step factor, in (0, 1]
    :type lam: float

    :param iters: number of iterations, >= 0
    :type iters: int

    :rtype: TriMesh
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    if iters < 0:
        raise ValueError(f"iterations must be >= 0, got {iters}")
    if iters == 0 or m.is_empty:
        return TriMesh(m.vertices.copy(), m.triangles.copy(), m.normals.copy())

    umbrella = matrix.umbrella_operator(len(m.vertices), m.triangles)
    vertices = m.vertices.copy()
    for _ in range(iters):
        vertices = vertices - lam * (umbrella @ vertices)
    return TriMesh(vertices, m.triangles.copy())


### sampling ###

def triangle_areas(m):
    """
    Area of every triangle in mm^2.
    """
    return 0.5 * np.linalg.norm(triangle_cross(m.vertices, m.triangles), axis=1)


def sample_surface(m, n=SURFACE_POINTS, rng=None):
    """
    Draws ``n`` points from the surface: triangles are picked with probability
    proportional to their area and points are uniform inside each triangle.
    Normals are the barycentric interpolation of the vertex normals,
    renormalized. The source triangle index is kept as the point tag.

    :param m: the mesh
    :type m: TriMesh

    :param n: number of points, >= 1
    :type n: int

    :param rng: the random generator
    :type rng: numpy.random.Generator

    :rtype: OrientedPointCloud

    :raises EmptyInputError: if the mesh has no triangles
    """
    if m.is_empty:
        raise EmptyInputError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng() if rng is None else rng

    areas = triangle_areas(m)
    cumulative = np.cumsum(areas)
    picks = np.searchsorted(cumulative, rng.random(n) * cumulative[-1], side="right")
    picks = np.minimum(picks, len(areas) - 1)

    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)

    tri = m.triangles[picks]
    points = np.einsum("nk,nkd->nd", bary, m.vertices[tri])
    normals = _normalize_rows(np.einsum("nk,nkd->nd", bary, m.normals[tri]))
    return OrientedPointCloud(points, normals, picks)


### volume ###

def signed_volume_mm3(m):
    """
    Signed enclosed volume by the divergence theorem, sum of det(v0, v1, v2)/6.
    Positive for closed meshes with outward orientation.
    """
    if m.is_empty:
        return 0.0
    v = m.vertices[m.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def mesh_volume(m):
    """
    Enclosed volume of a closed mesh in liters, independent of orientation.

    :param m: the mesh
    :type m: TriMesh

    :rtype: float
    """
    return abs(signed_volume_mm3(m)) / MM3_PER_LITER


### file formats ###

def save_obj(m, path):
    """
    Writes ``v x y z`` and ``f i j k`` lines (1-based indices). Floats are
    written with ``repr`` so that reading the file back is exact.
    """
    with open(path, "w") as f:
        for x, y, z in m.vertices.tolist():
            f.write(f"v {x!r} {y!r} {z!r}\n")
        for i, j, k in (m.triangles + 1).tolist():
            f.write(f"f {i} {j} {k}\n")


def load_obj(path):
    """
    Reads the OBJ subset written by :func:`save_obj`. Face entries of the form
    ``i/t/n`` keep only the vertex index; other line types are ignored.

    :raises FormatError: for non-triangular faces or malformed numbers
    """
    vertices, triangles = [], []
    with open(path, "r") as f:
        for number, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    if len(parts) != 4:
                        raise FormatError(f"{path}:{number}: only triangular faces are supported")
                    triangles.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
            except ValueError as e:
                raise FormatError(f"{path}:{number}: {e}") from e
    return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                   np.array(triangles, dtype=np.int64).reshape(-1, 3))


def save_ply(pc, path):
    """
    Writes a binary little-endian PLY with float32 ``x y z nx ny nz``.
    """
    data = np.empty(len(pc), dtype=PLY_DTYPE)
    for k, name in enumerate(("x", "y", "z")):
        data[name] = pc.points[:, k]
        data["n" + name] = pc.normals[:, k]
    header = ("ply\n"
              "format binary_little_endian 1.0\n"
              f"element vertex {len(pc)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property float nx\nproperty float ny\nproperty float nz\n"
              "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def load_ply(path):
    """
    Reads a PLY written by :func:`save_ply`.

    :raises FormatError: for other PLY layouts or a truncated body
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path} is not a PLY file")
        count, properties = None, []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: missing end_header")
            words = line.decode("ascii").split()
            if not words:
                continue
            if words[0] == "format" and words[1] != "binary_little_endian":
                raise FormatError(f"{path}: only binary_little_endian PLY is supported")
            elif words[0] == "element" and words[1] == "vertex":
                count = int(words[2])
            elif words[0] == "property":
                properties.append((words[1], words[2]))
            elif words[0] == "end_header":
                break
        expected = [("float", name) for name in PLY_DTYPE.names]
        if count is None or properties != expected:
            raise FormatError(f"{path}: expected float properties {PLY_DTYPE.names}")
        body = f.read()

    if len(body) != count * PLY_DTYPE.itemsize:
        raise FormatError(f"{path}: body has {len(body)} bytes, expected {count * PLY_DTYPE.itemsize}")
    data = np.frombuffer(body, dtype=PLY_DTYPE)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    return OrientedPointCloud(points, normals)
