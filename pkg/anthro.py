"""
This module measures body height and circumferences on triangle meshes. A
circumference is the perimeter of the 2D convex hull of an axial cross section,
the way a tape measure spans the concave parts of the body.

>>> m = meshkit.load_obj("body_0001.obj")
>>> measure_height(m)
172.4
>>> measure_circumferences(m)
(98.1, 84.7, 101.3)
"""

import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

import matrix
from errors import DegenerateSectionError, EmptyInputError

logger = logging.getLogger(__name__)

# Keypoint heights as fractions of body height, measured from the floor
KEYPOINTS = (0.72, 0.62, 0.53)
KEYPOINT_NAMES = ("chest", "waist", "hip")

MM_PER_CM = 10.0


@dataclass
class CrossSection:
    """
    The intersection of a mesh with the plane ``z = height_mm``. ``points``
    are the 2D ``(x, y)`` positions of the intersection in mm and ``segments``
    join pairs of them along the mesh surface.
    """
    height_mm: float
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.segments = np.asarray(self.segments, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)


def measure_height(m):
    """
    Vertical extent of the mesh.

    :param m: the mesh
    :type m: meshkit.TriMesh

    :return: the height in cm
    :rtype: float

    :raises EmptyInputError: if the mesh has no vertices
    """
    if len(m.vertices) == 0:
        raise EmptyInputError("cannot measure the height of an empty mesh")
    z = m.vertices[:, 2]
    return float(z.max() - z.min()) / MM_PER_CM


def cross_section(m, h_mm):
    """
    Intersects the mesh with the horizontal plane at ``h_mm``. A vertex lying
    exactly on the plane counts as above it, so every crossing edge yields one
    point; points with equal coordinates are merged.

    :param m: the mesh
    :type m: meshkit.TriMesh

    :param h_mm: the plane height in mm
    :type h_mm: float

    :return: the section; empty if the plane misses the mesh
    :rtype: CrossSection
    """
    if m.is_empty:
        return CrossSection(h_mm)

    s = m.vertices[:, 2] - h_mm
    above = s >= 0
    edges = matrix.mesh_edges(m.triangles)
    crossing = above[edges[:, 0]] != above[edges[:, 1]]
    if not crossing.any():
        return CrossSection(h_mm)

    i, j = edges[crossing, 0], edges[crossing, 1]
    t = s[i] / (s[i] - s[j])
    points = (1.0 - t)[:, None] * m.vertices[i, :2] + t[:, None] * m.vertices[j, :2]
    points, merged = np.unique(points, axis=0, return_inverse=True)
    merged = merged.reshape(-1)

    point_of_edge = np.full(len(edges), -1, dtype=np.int64)
    point_of_edge[crossing] = merged

    # every triangle cut by the plane has exactly two crossing edges
    n = len(m.vertices)
    tri_edges = np.sort(np.stack([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]], axis=1), axis=2)
    keys = tri_edges[..., 0] * n + tri_edges[..., 1]
    edge_index = np.searchsorted(edges[:, 0] * n + edges[:, 1], keys)
    ends = point_of_edge[edge_index]
    cut = (ends >= 0).sum(axis=1) == 2
    ends = np.sort(ends[cut], axis=1)[:, 1:]
    segments = ends[ends[:, 0] != ends[:, 1]]

    return CrossSection(h_mm, points, segments)


def contours(s):
    """
    Splits a section into its closed curves, the connected components of its
    segment graph.

    :param s: the section
    :type s: CrossSection

    :return: one section per curve, largest first
    :rtype: list
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(len(s.points)))
    graph.add_edges_from(map(tuple, s.segments.tolist()))

    pieces = []
    for component in nx.connected_components(graph):
        index = np.array(sorted(component), dtype=np.int64)
        remap = np.full(len(s.points), -1, dtype=np.int64)
        remap[index] = np.arange(len(index))
        keep = np.isin(s.segments[:, 0], index)
        pieces.append(CrossSection(s.height_mm, s.points[index], remap[s.segments[keep]]))
    pieces.sort(key=len, reverse=True)
    return pieces


def principal_contour(s, axis_xy=(0.0, 0.0)):
    """
    The curve of the section whose centroid lies closest to the vertical body
    axis. Arms hanging next to the trunk form separate curves and are skipped.

    :param s: the section
    :type s: CrossSection

    :param axis_xy: the ``(x, y)`` position of the body axis in mm
    :type axis_xy: tuple

    :rtype: CrossSection
    """
    pieces = contours(s)
    if not pieces:
        return s
    distance = [np.linalg.norm(p.points.mean(axis=0) - np.asarray(axis_xy)) for p in pieces]
    return pieces[int(np.argmin(distance))]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """
    Andrew's monotone chain. Points are translated to the first sorted point
    before the orientation tests.

    :param points: 2D points
    :type points: numpy.ndarray

    :return: the hull vertices in counter-clockwise order, no collinear ones
    :rtype: numpy.ndarray

    :raises DegenerateSectionError: for fewer than 3 distinct points or
        collinear points
    """
    unique = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(unique) < 3:
        raise DegenerateSectionError(f"convex hull needs 3 distinct points, got {len(unique)}")
    base = unique[0]
    pts = [tuple(p) for p in (unique - base).tolist()]

    lower = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)

    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateSectionError("all section points are collinear")
    return np.array(hull) + base


def hull_perimeter(s):
    """
    Perimeter of the convex hull of all section points.

    :param s: the section, or an array of 2D points in mm
    :type s: CrossSection

    :return: the perimeter in cm
    :rtype: float

    >>> hull_perimeter(CrossSection(0.0, [[0, 0], [1, 0], [1, 1], [0, 1]]))
    0.4
    """
    points = s.points if isinstance(s, CrossSection) else s
    hull = convex_hull(points)
    sides = np.roll(hull, -1, axis=0) - hull
    return float(np.linalg.norm(sides, axis=1).sum()) / MM_PER_CM


def measure_circumferences(m, keypoints=KEYPOINTS):
    """
    Chest, waist and hip circumferences: hull perimeters of the principal
    contour at each keypoint height. Keypoint fractions are applied to the
    vertical extent of the mesh, starting at its lowest point.

    :param m: the mesh
    :type m: meshkit.TriMesh

    :param keypoints: chest, waist and hip heights as fractions of body height
    :type keypoints: tuple

    :return: chest, waist and hip circumferences in cm
    :rtype: (float, float, float)

    :raises DegenerateSectionError: naming the keypoint whose section has no
        hull
    """
    if len(keypoints) != len(KEYPOINT_NAMES):
        raise ValueError(f"expected {len(KEYPOINT_NAMES)} keypoint fractions, got {len(keypoints)}")
    for f in keypoints:
        if not 0 < f < 1:
            raise ValueError(f"keypoint fractions must be in (0, 1), got {f}")
    if m.is_empty:
        raise EmptyInputError("cannot measure an empty mesh")

    z = m.vertices[:, 2]
    floor, height = z.min(), z.max() - z.min()
    axis_xy = m.vertices[:, :2].mean(axis=0)

    result = []
    for name, fraction in zip(KEYPOINT_NAMES, keypoints):
        section = cross_section(m, floor + fraction * height)
        try:
            result.append(hull_perimeter(principal_contour(section, axis_xy)))
        except DegenerateSectionError as e:
            raise DegenerateSectionError(f"{name} section at {fraction:.3f} of height: {e}", keypoint=name) from e
        logger.debug("%s circumference %.2f cm", name, result[-1])
    return tuple(result)
