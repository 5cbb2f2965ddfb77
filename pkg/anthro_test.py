"""
File for testing the ``anthro.py`` module.
"""
import itertools

import numpy as np
import pytest

import anthro
import meshkit
from errors import DegenerateSectionError, EmptyInputError
from meshkit_test import cube


def cylinder(a, b, height, n=720, z0=0.0, x0=0.0):
    """Closed elliptic cylinder with capped ends."""
    phi = 2 * np.pi * np.arange(n) / n
    ring = np.stack([x0 + a * np.cos(phi), b * np.sin(phi)], axis=1)
    bottom = np.hstack([ring, np.full((n, 1), z0)])
    top = np.hstack([ring, np.full((n, 1), z0 + height)])
    vertices = np.vstack([bottom, top, [[x0, 0, z0], [x0, 0, z0 + height]]])
    triangles = []
    for k in range(n):
        nk = (k + 1) % n
        triangles += [[k, nk, n + nk], [k, n + nk, n + k],
                      [2 * n, nk, k], [2 * n + 1, n + k, n + nk]]
    return meshkit.TriMesh(vertices, np.array(triangles))


def ellipse_perimeter(a, b, n=200000):
    """Arc length by the trapezoidal rule."""
    t = np.linspace(0, 2 * np.pi, n + 1)
    speed = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
    return np.sum((speed[1:] + speed[:-1]) / 2 * np.diff(t))


def brute_force_perimeter(points):
    """Sum of the edges with every other point strictly on their left."""
    total = 0.0
    for i, j in itertools.permutations(range(len(points)), 2):
        p, q = points[i], points[j]
        others = [r for k, r in enumerate(points) if k not in (i, j)]
        if all((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]) > 0 for r in others):
            total += np.hypot(*(q - p))
    return total / 10.0


def star(n=5, outer=50.0, inner=20.0):
    phi = np.pi * np.arange(2 * n) / n
    r = np.where(np.arange(2 * n) % 2 == 0, outer, inner)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


### height ###

def test_height_of_cylinder():
    assert anthro.measure_height(cylinder(100, 100, 1700)) == pytest.approx(170.0)


def test_height_translation_and_scale():
    m = cylinder(80, 60, 1234.5)
    moved = m.translated((0, 0, 250.0))
    assert anthro.measure_height(moved) == pytest.approx(anthro.measure_height(m), rel=1e-12)
    assert anthro.measure_height(m.scaled(1.1)) == pytest.approx(1.1 * anthro.measure_height(m), rel=1e-9)


def test_height_empty():
    with pytest.raises(EmptyInputError):
        anthro.measure_height(meshkit.TriMesh())


### cross sections ###

def test_section_of_cube():
    s = anthro.cross_section(cube, 0.5)
    assert np.allclose(s.points.min(axis=0), 0.0) and np.allclose(s.points.max(axis=0), 1.0)
    on_boundary = np.isclose(s.points, 0.0) | np.isclose(s.points, 1.0)
    assert np.all(on_boundary.any(axis=1))
    assert anthro.hull_perimeter(s) == pytest.approx(0.4)


@pytest.mark.parametrize("h", [1.5, -0.5])
def test_section_misses(h):
    assert len(anthro.cross_section(cube, h)) == 0


def test_section_of_cylinder():
    # crossings on the vertical edges lie on the circle, those on the side
    # diagonals on the chords
    n = 360
    s = anthro.cross_section(cylinder(100, 100, 200, n=n), 100.0)
    radius = np.linalg.norm(s.points, axis=1)
    assert np.all(radius <= 100.0 + 1e-9)
    assert np.all(radius >= 100.0 * np.cos(np.pi / n) - 1e-9)
    assert len(s) == 2 * n


def test_section_through_vertices():
    # vertices on the plane count as above and coincident points are merged
    m = cylinder(100, 100, 200, n=36)
    assert len(anthro.cross_section(m, 0.0)) == 0
    s = anthro.cross_section(m, 200.0)
    assert len(s) == 36
    assert np.allclose(np.linalg.norm(s.points, axis=1), 100.0)


def test_contours_separate_pieces():
    body = cylinder(100, 80, 500)
    arm = cylinder(30, 30, 500, x0=250.0)
    both = meshkit.TriMesh(np.vstack([body.vertices, arm.vertices]),
                           np.vstack([body.triangles, arm.triangles + len(body.vertices)]))
    section = anthro.cross_section(both, 250.0)
    pieces = anthro.contours(section)
    assert len(pieces) == 2
    main = anthro.principal_contour(section)
    assert np.abs(main.points[:, 0]).max() == pytest.approx(100.0)


### hull perimeter ###

def test_hull_unit_square():
    s = anthro.CrossSection(0.0, [[0, 0], [1, 0], [1, 1], [0, 1]])
    assert anthro.hull_perimeter(s) == pytest.approx(0.4, rel=1e-12)


def test_hull_polygon_360():
    phi = 2 * np.pi * np.arange(360) / 360
    pts = 100 * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    assert anthro.hull_perimeter(pts) == pytest.approx(62.832, rel=1e-3)


def test_hull_star():
    pts = star()
    polygon = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum() / 10.0
    hull = anthro.hull_perimeter(pts)
    assert hull == pytest.approx(brute_force_perimeter(pts), rel=1e-12)
    assert hull < polygon


@pytest.mark.parametrize("seed", range(3))
def test_hull_matches_brute_force(seed):
    pts = np.random.default_rng(seed).normal(size=(9, 2)) * 40
    assert anthro.hull_perimeter(pts) == pytest.approx(brute_force_perimeter(pts), rel=1e-12)


@pytest.mark.parametrize("pts", [
    [[0, 0], [1, 1]],
    [[0, 0], [1, 1], [2, 2], [3, 3]],
    [[0, 0], [0, 0], [0, 0]],
])
def test_hull_degenerate(pts):
    with pytest.raises(DegenerateSectionError):
        anthro.hull_perimeter(np.array(pts, dtype=float))


def test_hull_rigid_invariance():
    pts = np.random.default_rng(4).normal(size=(50, 2)) * 100
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = pts @ rot.T + [1234.5, -987.25]
    assert anthro.hull_perimeter(moved) == pytest.approx(anthro.hull_perimeter(pts), rel=1e-9)


def test_hull_ignores_interior_points():
    pts = np.random.default_rng(5).normal(size=(30, 2)) * 100
    hull = anthro.convex_hull(pts)
    extra = np.vstack([pts, hull.mean(axis=0), 0.5 * (hull[0] + hull[1])])
    assert anthro.hull_perimeter(extra) == pytest.approx(anthro.hull_perimeter(pts), rel=1e-12)


### circumferences ###

@pytest.mark.parametrize("keypoints", [(0.72, 0.62, 0.53), (0.1, 0.5, 0.9)])
def test_cylinder_circumferences(keypoints):
    r = 150.0
    result = anthro.measure_circumferences(cylinder(r, r, 1700), keypoints)
    for c in result:
        assert c == pytest.approx(2 * np.pi * r / 10, rel=0.005)


def test_ellipse_circumference():
    a, b = 160.0, 110.0
    result = anthro.measure_circumferences(cylinder(a, b, 1000))
    expected = ellipse_perimeter(a, b) / 10
    assert result[1] == pytest.approx(expected, rel=0.005)


def test_circumferences_scale_linearly():
    m = cylinder(120, 90, 1500)
    base = anthro.measure_circumferences(m)
    scaled = anthro.measure_circumferences(m.scaled(1.25))
    assert np.allclose(scaled, 1.25 * np.array(base), rtol=1e-9)


def test_circumference_degenerate_names_keypoint():
    # a single triangle standing upright: its sections are line segments
    m = meshkit.TriMesh([[0, 0, 0], [100, 0, 0], [50, 0, 100]], [[0, 1, 2]])
    with pytest.raises(DegenerateSectionError) as e:
        anthro.measure_circumferences(m)
    assert e.value.keypoint == "chest"


@pytest.mark.parametrize("keypoints", [(0.0, 0.5, 0.5), (0.5, 1.0, 0.5), (0.5, 0.5)])
def test_bad_keypoints(keypoints):
    with pytest.raises(ValueError):
        anthro.measure_circumferences(cube, keypoints)

