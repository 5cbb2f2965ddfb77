"""
This module turns dense oriented point clouds into observations that look like
those of a two-panel millimeter wave scanner, and extracts point clouds from
the intensity volumes such a scanner records.

A simulated scan registers the cloud to scanner coordinates, applies a random
rotation about the vertical axis and positional jitter, removes the points the
panels cannot see (normals nearly parallel to the panels), and downsamples.

>>> cfg = config.load_config("scan.json", ScanConfig)
>>> scan = simulate_scan(cloud, cfg, scan_rng(cfg.seed, "body_0001"))
"""

import json
import logging
import zlib
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, EmptyInputError, FormatError
from meshkit import OrientedPointCloud

logger = logging.getLogger(__name__)

VERTICAL = np.array([0.0, 0.0, 1.0])

HEADER_SUFFIX = ".ivol.json"
PAYLOAD_SUFFIX = ".ivol.raw"

PANELS = ("front", "back")


@dataclass(frozen=True)
class ScanConfig:
    """
    Parameters of the scan simulation, serialized as ``scan.json``. Angles in
    degrees, distances in mm.
    """
    panel_axis: tuple = (0.0, 1.0, 0.0)
    rot_sigma_deg: float = 5.0
    rot_clip_deg: float = 10.0
    jitter_max_mm: float = 2.0
    thresh_mean: float = 0.7
    thresh_sigma: float = 0.05
    thresh_clip: tuple = (0.5, 0.9)
    target_points: int = 100000
    dense_points: int = 800000
    seed: int = 0

    def __post_init__(self):
        axis = np.asarray(self.panel_axis, dtype=np.float64)
        if axis.shape != (3,) or not np.isclose(np.linalg.norm(axis), 1.0, atol=1e-6):
            raise ConfigError(f"panel_axis must be a unit 3-vector, got {self.panel_axis}")
        if abs(axis @ VERTICAL) > 1e-6:
            raise ConfigError("panel_axis must be horizontal")
        lo, hi = self.thresh_clip
        if not 0 < lo <= self.thresh_mean <= hi < 1:
            raise ConfigError(f"need 0 < {lo} <= thresh_mean {self.thresh_mean} <= {hi} < 1")
        if self.rot_sigma_deg < 0 or self.rot_clip_deg < 0 or self.thresh_sigma < 0:
            raise ConfigError("rotation and threshold spreads must be >= 0")
        if self.jitter_max_mm < 0:
            raise ConfigError("jitter_max_mm must be >= 0")
        if self.target_points < 1 or self.dense_points < 1:
            raise ConfigError("point counts must be >= 1")


def scan_rng(seed, sample_id):
    """
    The random stream of one scan, derived from the run seed and the sample
    id so that scans can be simulated in any order.

    :param seed: the run seed
    :type seed: int

    :param sample_id: the sample identifier
    :type sample_id: str

    :rtype: numpy.random.Generator
    """
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def register(pc):
    """
    Translates a cloud into scanner coordinates: lateral and AP centroid at
    the origin, lowest point on the floor. Normals are unchanged.

    :param pc: the cloud
    :type pc: meshkit.OrientedPointCloud

    :rtype: meshkit.OrientedPointCloud

    :raises EmptyInputError: for an empty cloud
    """
    if len(pc) == 0:
        raise EmptyInputError("cannot register an empty point cloud")
    shift = np.array([-pc.points[:, 0].mean(), -pc.points[:, 1].mean(), -pc.points[:, 2].min()])
    return OrientedPointCloud(pc.points + shift, pc.normals.copy(), pc.tags)


def sample_rotation(cfg, rng):
    """
    A rotation angle in degrees, normal with ``cfg.rot_sigma_deg`` and clipped
    to ``+-cfg.rot_clip_deg``.
    """
    theta = rng.normal(0.0, cfg.rot_sigma_deg)
    return float(np.clip(theta, -cfg.rot_clip_deg, cfg.rot_clip_deg))


def rotation_about_vertical(theta_deg):
    t = np.radians(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(pc, cfg, rng):
    """
    Rotates the cloud about the vertical axis through the origin and adds
    uniform jitter in ``[-jitter_max_mm, jitter_max_mm]`` to every coordinate.
    Normals are rotated but not jittered.

    :param pc: a registered cloud
    :type pc: meshkit.OrientedPointCloud

    :param cfg: the scan parameters
    :type cfg: ScanConfig

    :param rng: the random generator
    :type rng: numpy.random.Generator

    :rtype: meshkit.OrientedPointCloud
    """
    rot = rotation_about_vertical(sample_rotation(cfg, rng))
    jitter = rng.uniform(-cfg.jitter_max_mm, cfg.jitter_max_mm, size=pc.points.shape)
    return OrientedPointCloud(pc.points @ rot.T + jitter, pc.normals @ rot.T, pc.tags)


def illumination_filter(pc, panel_axis, tau):
    """
    Keeps the points the panels can see: those whose normal satisfies
    ``(n . panel_axis)^2 >= tau``. Squaring makes the test symmetric for the
    front and back panels.

    :param pc: the cloud
    :type pc: meshkit.OrientedPointCloud

    :param panel_axis: unit normal of the panels
    :type panel_axis: tuple

    :param tau: the threshold, in [0, 1]
    :type tau: float

    :return: the visible points, possibly none
    :rtype: meshkit.OrientedPointCloud
    """
    if not 0 <= tau <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {tau}")
    cos = pc.normals @ np.asarray(panel_axis, dtype=np.float64)
    return pc.subset(cos * cos >= tau)


def sample_threshold(cfg, rng):
    """
    The illumination threshold of one scan: normal around ``thresh_mean``,
    clipped to ``thresh_clip``. Both panels share it.

    :rtype: float
    """
    lo, hi = cfg.thresh_clip
    return float(np.clip(rng.normal(cfg.thresh_mean, cfg.thresh_sigma), lo, hi))


def downsample(pc, n, rng):
    """
    Uniform sample of ``n`` points without replacement, in their original
    order. Clouds with at most ``n`` points are returned whole.

    :param pc: the cloud
    :type pc: meshkit.OrientedPointCloud

    :param n: the number of points, >= 1
    :type n: int

    :rtype: meshkit.OrientedPointCloud
    """
    if n < 1:
        raise ValueError(f"downsample size must be >= 1, got {n}")
    if len(pc) <= n:
        return pc.subset(np.arange(len(pc)))
    keep = np.sort(rng.choice(len(pc), size=n, replace=False))
    return pc.subset(keep)


def simulate_scan(pc, cfg, rng, return_threshold=False):
    """
    Registration, augmentation, illumination filtering and downsampling, in
    that order.

    :param pc: the dense cloud sampled from a body surface
    :type pc: meshkit.OrientedPointCloud

    :param cfg: the scan parameters
    :type cfg: ScanConfig

    :param rng: the random generator of this scan
    :type rng: numpy.random.Generator

    :param return_threshold: also return the illumination threshold drawn
    :type return_threshold: bool

    :rtype: meshkit.OrientedPointCloud
    """
    moved = augment(register(pc), cfg, rng)
    tau = sample_threshold(cfg, rng)
    visible = illumination_filter(moved, cfg.panel_axis, tau)
    scan = downsample(visible, cfg.target_points, rng) if len(visible) else visible
    logger.debug("Scan: %d dense points, %d visible at tau %.3f, %d kept",
                 len(pc), len(visible), tau, len(scan))
    if return_threshold:
        return scan, tau
    return scan


### real scans ###

@dataclass
class IntensityVolume:
    """
    The reconstruction of one panel. ``intensities`` is indexed
    ``[lateral, vertical, depth]`` with depth increasing away from the panel.
    ``origin_mm`` is the scanner position of voxel ``(0, 0, 0)``.
    """
    intensities: np.ndarray
    spacing_mm: tuple = (1.9, 1.9, 5.5)
    origin_mm: tuple = (0.0, 0.0, 0.0)
    panel: str = "front"
    panel_axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if self.intensities.ndim != 3:
            raise FormatError(f"intensity volume must be 3-dimensional, got {self.intensities.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise FormatError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.panel not in PANELS:
            raise FormatError(f"panel must be one of {PANELS}, got {self.panel}")
        if not np.all(np.isfinite(self.intensities)):
            raise FormatError("intensities must be finite")

    @property
    def dims(self):
        return tuple(int(d) for d in self.intensities.shape)

    def frame(self):
        """
        Unit vectors of the lateral, vertical and depth directions in scanner
        coordinates. The front panel looks along ``+panel_axis``.
        """
        axis = np.asarray(self.panel_axis, dtype=np.float64)
        lateral = np.cross(axis, VERTICAL)
        depth = axis if self.panel == "front" else -axis
        return lateral, VERTICAL, depth

    def positions(self, i, k, d):
        """
        Scanner coordinates of voxels ``(i, k, d)``.
        """
        lateral, vertical, depth = self.frame()
        sl, sv, sd = self.spacing_mm
        return (np.asarray(self.origin_mm)
                + (i * sl)[:, None] * lateral
                + (k * sv)[:, None] * vertical
                + (d * sd)[:, None] * depth)


def intensity_paths(path):
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if path.endswith(suffix):
            path = path[:-len(suffix)]
            break
    return path + HEADER_SUFFIX, path + PAYLOAD_SUFFIX


def save_intensity_volume(vol, path):
    """
    Writes the JSON header and the float32 little-endian payload (lateral
    index fastest).

    :return: the header path
    :rtype: str
    """
    header_path, payload_path = intensity_paths(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "panel": vol.panel,
        "panel_axis": [float(a) for a in vol.panel_axis],
    }
    with open(header_path, "w") as f:
        json.dump(header, f, indent=4)
        f.write("\n")
    with open(payload_path, "wb") as f:
        f.write(vol.intensities.astype("<f4").tobytes(order="F"))
    return header_path


def load_intensity_volume(path):
    """
    Reads a volume written by :func:`save_intensity_volume`.

    :raises FormatError: for a missing file, a malformed header or a payload
        whose size disagrees with the header
    """
    header_path, payload_path = intensity_paths(path)
    try:
        with open(header_path, "r") as f:
            header = json.load(f)
        with open(payload_path, "rb") as f:
            payload = f.read()
    except FileNotFoundError as e:
        raise FormatError(f"missing intensity file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path} is not valid JSON: {e}") from e

    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(header.get("spacing_mm", (1.9, 1.9, 5.5)))
        origin = tuple(header.get("origin_mm", (0.0, 0.0, 0.0)))
        panel = header["panel"]
        axis = tuple(header.get("panel_axis", (0.0, 1.0, 0.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed intensity header {header_path}: {e}") from e

    if len(payload) != 4 * int(np.prod(dims)):
        raise FormatError(f"payload has {len(payload)} bytes, header dims {dims} need {4 * int(np.prod(dims))}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return IntensityVolume(values.copy(), spacing, origin, panel, axis)


def extract_from_intensity(vol, min_intensity):
    """
    One point per lateral column: the depth of maximum intensity, kept when
    the maximum reaches ``min_intensity``. Ties go to the voxel nearest the
    panel. Normals face the panel.

    :param vol: the panel reconstruction
    :type vol: IntensityVolume

    :param min_intensity: the detection threshold
    :type min_intensity: float

    :return: the surface points seen by the panel
    :rtype: meshkit.OrientedPointCloud
    """
    peak_depth = np.argmax(vol.intensities, axis=2)
    peak = np.take_along_axis(vol.intensities, peak_depth[..., None], axis=2)[..., 0]
    i, k = np.nonzero(peak >= min_intensity)
    d = peak_depth[i, k]
    points = vol.positions(i, k, d)
    normal = -vol.frame()[2]
    normals = np.broadcast_to(normal, points.shape).copy()
    logger.debug("Extracted %d of %d columns from the %s panel", len(i), peak.size, vol.panel)
    return OrientedPointCloud(points, normals)


def merge_clouds(clouds):
    """
    Concatenates clouds, e.g. the front and back panel extractions.
    """
    clouds = list(clouds)
    if not clouds:
        return OrientedPointCloud()
    return OrientedPointCloud(np.concatenate([c.points for c in clouds]),
                              np.concatenate([c.normals for c in clouds]))
