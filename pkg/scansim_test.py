"""
File for testing the ``scansim.py`` module.
"""
import dataclasses

import numpy as np
import pytest

import config
import meshkit
import scansim
from errors import ConfigError, EmptyInputError, FormatError

STILL = scansim.ScanConfig(rot_sigma_deg=0.0, jitter_max_mm=0.0, thresh_sigma=0.0)


def random_cloud(n, seed=0, shift=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    points = rng.uniform(-300, 300, size=(n, 3)) + shift
    return meshkit.OrientedPointCloud(points, normals, np.arange(n))


def sphere_cloud(n, radius=200.0, seed=0):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return meshkit.OrientedPointCloud(radius * normals + [0, 0, radius], normals, np.arange(n))


def rows(a):
    return {tuple(p) for p in a.tolist()}


### configuration ###

@pytest.mark.parametrize("kwargs", [
    {"panel_axis": (0.0, 2.0, 0.0)},
    {"panel_axis": (0.0, 0.0, 1.0)},
    {"thresh_mean": 0.95},
    {"thresh_clip": (0.0, 0.9)},
    {"thresh_clip": (0.5, 1.0)},
    {"rot_clip_deg": -1.0},
    {"jitter_max_mm": -0.5},
    {"target_points": 0},
])
def test_bad_scan_config(kwargs):
    with pytest.raises(ConfigError):
        scansim.ScanConfig(**kwargs)


def test_scan_config_from_json():
    cfg = config.from_dict({"panel_axis": [1, 0, 0], "thresh_clip": [0.6, 0.8], "seed": 4}, scansim.ScanConfig)
    assert cfg.panel_axis == (1, 0, 0)
    assert cfg.thresh_clip == (0.6, 0.8)
    assert config.from_dict(config.to_dict(cfg), scansim.ScanConfig) == cfg


def test_scan_rng():
    a = scansim.scan_rng(1, "body_0001").random(4)
    assert np.array_equal(a, scansim.scan_rng(1, "body_0001").random(4))
    assert not np.array_equal(a, scansim.scan_rng(1, "body_0002").random(4))
    assert not np.array_equal(a, scansim.scan_rng(2, "body_0001").random(4))


### registration ###

def test_register_identity():
    pc = random_cloud(500)
    pc.points -= [pc.points[:, 0].mean(), pc.points[:, 1].mean(), pc.points[:, 2].min()]
    out = scansim.register(pc)
    assert np.allclose(out.points, pc.points, atol=1e-9)
    assert np.array_equal(out.normals, pc.normals)


def test_register_translation_invariant():
    a = scansim.register(random_cloud(500))
    b = scansim.register(random_cloud(500, shift=(5.0, -3.0, 7.0)))
    assert np.allclose(a.points, b.points, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_register_frame(seed):
    out = scansim.register(random_cloud(1000, seed, shift=(100.0, 50.0, 900.0)))
    assert out.points[:, 2].min() == 0.0
    assert abs(out.points[:, 0].mean()) < 1e-9
    assert abs(out.points[:, 1].mean()) < 1e-9


def test_register_empty():
    with pytest.raises(EmptyInputError):
        scansim.register(meshkit.OrientedPointCloud())


### augmentation ###

def test_augment_disabled_is_identity():
    pc = scansim.register(random_cloud(300))
    out = scansim.augment(pc, STILL, np.random.default_rng(0))
    assert np.array_equal(out.points, pc.points)
    assert np.array_equal(out.normals, pc.normals)


def test_rotation_clipped():
    cfg = scansim.ScanConfig(rot_sigma_deg=8.0, rot_clip_deg=10.0)
    rng = np.random.default_rng(0)
    angles = np.array([scansim.sample_rotation(cfg, rng) for _ in range(100000)])
    assert np.abs(angles).max() <= 10.0
    # clipping is rare but active
    assert 0 < np.mean(np.abs(angles) == 10.0) < 0.3


def test_augment_keeps_unit_normals():
    pc = scansim.register(random_cloud(1000))
    out = scansim.augment(pc, scansim.ScanConfig(rot_sigma_deg=30.0, rot_clip_deg=90.0), np.random.default_rng(1))
    assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-6)
    assert np.allclose(out.normals[:, 2], pc.normals[:, 2])


def test_jitter_bounded():
    pc = scansim.register(random_cloud(1000))
    cfg = scansim.ScanConfig(rot_sigma_deg=0.0)
    out = scansim.augment(pc, cfg, np.random.default_rng(2))
    delta = np.abs(out.points - pc.points)
    assert delta.max() <= 2.0 + 1e-9
    assert delta.max() > 1.5
    assert np.array_equal(out.normals, pc.normals)


### illumination filter ###

@pytest.mark.parametrize("normal, kept", [
    ((0.0, 1.0, 0.0), True),
    ((0.0, -1.0, 0.0), True),
    ((1.0, 0.0, 0.0), False),
    ((0.0, 0.0, 1.0), False),
    ((0.0, np.sqrt(0.5), np.sqrt(0.5)), False),
])
def test_illumination_single_normal(normal, kept):
    pc = meshkit.OrientedPointCloud([[0.0, 0.0, 0.0]], [normal])
    assert len(scansim.illumination_filter(pc, (0.0, 1.0, 0.0), 0.7)) == int(kept)


@pytest.mark.parametrize("tau", [0.5, 0.7, 0.9])
def test_illumination_fraction(tau):
    pc = sphere_cloud(1000000, seed=3)
    kept = scansim.illumination_filter(pc, (0.0, 1.0, 0.0), tau)
    assert len(kept) / len(pc) == pytest.approx(1 - np.sqrt(tau), rel=0.02)


def test_illumination_monotone():
    pc = sphere_cloud(20000)
    previous = None
    for tau in (0.1, 0.3, 0.5, 0.7, 0.9):
        kept = set(scansim.illumination_filter(pc, (0.0, 1.0, 0.0), tau).tags.tolist())
        if previous is not None:
            assert kept <= previous
        previous = kept


def test_illumination_bad_threshold():
    with pytest.raises(ValueError):
        scansim.illumination_filter(sphere_cloud(10), (0.0, 1.0, 0.0), 1.5)


### threshold ###

def test_threshold_without_spread():
    cfg = scansim.ScanConfig(thresh_sigma=0.0)
    rng = np.random.default_rng(0)
    assert all(scansim.sample_threshold(cfg, rng) == 0.7 for _ in range(100))


def test_threshold_clipped():
    cfg = scansim.ScanConfig(thresh_sigma=0.2)
    rng = np.random.default_rng(0)
    draws = np.array([scansim.sample_threshold(cfg, rng) for _ in range(100000)])
    assert draws.min() >= 0.5 and draws.max() <= 0.9


def test_threshold_mean():
    cfg = scansim.ScanConfig()
    rng = np.random.default_rng(1)
    n = 100000
    draws = np.array([scansim.sample_threshold(cfg, rng) for _ in range(n)])
    assert abs(draws.mean() - 0.7) < 4 * 0.05 / np.sqrt(n)


### downsampling ###

def test_downsample_small_cloud():
    pc = random_cloud(50)
    out = scansim.downsample(pc, 100, np.random.default_rng(0))
    assert np.array_equal(out.points, pc.points)


def test_downsample_single_point():
    pc = random_cloud(50)
    out = scansim.downsample(pc, 1, np.random.default_rng(0))
    assert len(out) == 1
    assert tuple(out.points[0]) in rows(pc.points)


def test_downsample_uniform():
    pc = random_cloud(20)
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    for _ in range(10000):
        out = scansim.downsample(pc, 5, rng)
        assert len(set(out.tags.tolist())) == 5
        assert np.all(np.diff(out.tags) > 0)
        counts[out.tags] += 1
    # expected 2500 per point, binomial std about 43
    assert np.all(np.abs(counts - 2500) < 250)


def test_downsample_bad_size():
    with pytest.raises(ValueError):
        scansim.downsample(random_cloud(5), 0, np.random.default_rng(0))


### simulated scans ###

def test_simulate_scan_postconditions():
    cfg = scansim.ScanConfig(target_points=5000)
    scan, tau = scansim.simulate_scan(sphere_cloud(100000), cfg, np.random.default_rng(0), return_threshold=True)
    assert 0 < len(scan) <= 5000
    assert 0.5 <= tau <= 0.9
    assert np.all((scan.normals @ np.array(cfg.panel_axis)) ** 2 >= tau)


def test_simulate_scan_deterministic(tmp_path):
    cfg = scansim.ScanConfig(target_points=2000)
    pc = sphere_cloud(20000)
    paths = []
    for name in ("a.ply", "b.ply"):
        scan = scansim.simulate_scan(pc, cfg, scansim.scan_rng(7, "body_0001"))
        paths.append(str(tmp_path / name))
        meshkit.save_ply(scan, paths[-1])
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_simulate_scan_subsample_of_registered():
    cfg = scansim.ScanConfig(rot_sigma_deg=0.0, jitter_max_mm=0.0, thresh_mean=1e-9,
                             thresh_sigma=0.0, thresh_clip=(1e-9, 0.9), target_points=700)
    pc = random_cloud(3000, shift=(10.0, 20.0, 400.0))
    scan = scansim.simulate_scan(pc, cfg, np.random.default_rng(0))
    registered = scansim.register(pc)
    assert len(scan) == 700
    assert rows(scan.points) <= rows(registered.points)


def test_simulate_scan_points_never_invented():
    cfg = scansim.ScanConfig(target_points=1000)
    pc = sphere_cloud(10000)
    scan = scansim.simulate_scan(pc, cfg, np.random.default_rng(4))
    moved = scansim.augment(scansim.register(pc), cfg, np.random.default_rng(4))
    assert np.array_equal(scan.points, moved.points[scan.tags])


def test_simulate_scan_rotation_equivariant():
    theta = np.radians(30.0)
    rot = scansim.rotation_about_vertical(30.0)
    axis = (-np.sin(theta), np.cos(theta), 0.0)
    pc = random_cloud(4000)
    turned = meshkit.OrientedPointCloud(pc.points @ rot.T, pc.normals @ rot.T, pc.tags)

    base = scansim.simulate_scan(pc, dataclasses.replace(STILL, target_points=500), np.random.default_rng(0))
    cfg = dataclasses.replace(STILL, panel_axis=axis, target_points=500)
    out = scansim.simulate_scan(turned, cfg, np.random.default_rng(0))
    assert np.array_equal(out.tags, base.tags)
    assert np.allclose(out.points, base.points @ rot.T, atol=1e-9)


### intensity volumes ###

def test_single_peak_column():
    values = np.zeros((1, 1, 8))
    values[0, 0, 5] = 3.0
    vol = scansim.IntensityVolume(values, origin_mm=(0.0, -100.0, 0.0))
    pc = scansim.extract_from_intensity(vol, 1.0)
    assert len(pc) == 1
    assert np.allclose(pc.points[0], [0.0, -100.0 + 5 * 5.5, 0.0])
    assert np.allclose(pc.normals[0], [0.0, -1.0, 0.0])


def test_back_panel_normals():
    values = np.zeros((2, 3, 4))
    values[..., 1] = 1.0
    vol = scansim.IntensityVolume(values, origin_mm=(0.0, 100.0, 0.0), panel="back")
    pc = scansim.extract_from_intensity(vol, 0.5)
    assert len(pc) == 6
    assert np.allclose(pc.normals, [0.0, 1.0, 0.0])
    assert np.allclose(pc.points[:, 1], 100.0 - 5.5)


def test_all_below_threshold():
    vol = scansim.IntensityVolume(np.full((3, 3, 3), 0.2))
    assert len(scansim.extract_from_intensity(vol, 0.5)) == 0


def test_ties_toward_panel():
    values = np.zeros((1, 1, 6))
    values[0, 0, [2, 4]] = 1.0
    pc = scansim.extract_from_intensity(scansim.IntensityVolume(values), 0.5)
    assert np.allclose(pc.points[0], [0.0, 2 * 5.5, 0.0])


def test_extract_splatted_surface():
    # a tilted surface y = -120 + 0.2 x + 0.1 z seen by the front panel
    nx, nz, nd = 40, 30, 60
    origin = np.array([-40.0, -300.0, 800.0])
    x = origin[0] + 1.9 * np.arange(nx)
    z = origin[2] + 1.9 * np.arange(nz)
    depth = origin[1] + 5.5 * np.arange(nd)
    surface = -120.0 + 0.2 * x[:, None] + 0.1 * z[None, :]
    values = np.exp(-((depth[None, None, :] - surface[..., None]) / 5.5) ** 2)
    vol = scansim.IntensityVolume(values, origin_mm=tuple(origin))

    pc = scansim.extract_from_intensity(vol, 0.5)
    assert len(pc) == nx * nz
    expected = -120.0 + 0.2 * pc.points[:, 0] + 0.1 * pc.points[:, 2]
    assert np.all(np.abs(pc.points[:, 1] - expected) <= 5.5)


def test_intensity_roundtrip(tmp_path):
    values = np.random.default_rng(0).random((4, 5, 6)).astype(np.float32)
    vol = scansim.IntensityVolume(values, origin_mm=(1.0, 2.0, 3.0), panel="back")
    path = scansim.save_intensity_volume(vol, str(tmp_path / "scan_front"))
    assert path.endswith(".ivol.json")
    loaded = scansim.load_intensity_volume(path)
    assert np.array_equal(loaded.intensities, vol.intensities)
    assert loaded.panel == "back"
    assert loaded.origin_mm == (1.0, 2.0, 3.0)


def test_intensity_payload_mismatch(tmp_path):
    vol = scansim.IntensityVolume(np.zeros((2, 2, 2)))
    scansim.save_intensity_volume(vol, str(tmp_path / "v"))
    with open(tmp_path / "v.ivol.raw", "ab") as f:
        f.write(b"\0")
    with pytest.raises(FormatError):
        scansim.load_intensity_volume(str(tmp_path / "v"))


@pytest.mark.parametrize("kwargs", [
    {"intensities": np.zeros((2, 2))},
    {"intensities": np.full((2, 2, 2), np.nan)},
    {"intensities": np.zeros((2, 2, 2)), "panel": "side"},
    {"intensities": np.zeros((2, 2, 2)), "spacing_mm": (1.9, 0.0, 5.5)},
])
def test_bad_intensity_volume(kwargs):
    with pytest.raises(FormatError):
        scansim.IntensityVolume(**kwargs)


def test_merge_clouds():
    a, b = random_cloud(10), random_cloud(5, seed=1)
    merged = scansim.merge_clouds([a, b])
    assert len(merged) == 15
    assert len(scansim.merge_clouds([])) == 0
