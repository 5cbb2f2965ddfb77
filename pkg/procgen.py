"""
This module generates procedural human-like bodies with known ground truth.
A body is a set of stacked superellipsoid segments (head, torso, pelvis, two
arms in A-pose, two legs), each made of nested tissue layers, plus a visceral
fat blob inside the torso. Because containment in a superellipsoid is a closed
form test, the bodies rasterize exactly into label volumes, and every one of
the ten regression targets can be computed from them.

Coordinates are in mm with x lateral, y antero-posterior and z vertical; the
soles touch ``z = 0`` and the top of the head is at ``z = height_mm``.

>>> rng = np.random.default_rng(7)
>>> spec = sample_body(rng, BodyRanges())
>>> volume, mesh, truth = synthesize(spec, 2.0)
>>> truth.values()["waist"]
83.9
"""

import logging
from dataclasses import dataclass, field

import numpy as np

import anthro
import meshkit
import metrics
import volgrid
from errors import ConfigError, RetryBudgetError
from targets import NUM_TARGETS, TARGET_NAMES, MaskedTargetVector

logger = logging.getLogger(__name__)

# Class ids follow the position of the name in volgrid.CLASS_NAMES
LABELS = {name: volgrid.CLASS_NAMES.index(name) for name in ("SAT", "VAT", "MUSCLE", "LEAN")}
LEGEND = {0: "background", **{v: k for k, v in LABELS.items()}}

# Core layer of the trunk, split into VAT and LEAN by the visceral blob
VISCERA = "VISCERA"
LAYER_LABELS = ("SAT", "MUSCLE", "LEAN", VISCERA)

DEFAULT_SPACING_MM = 2.0

# Vertical layout as fractions of the body height: (centre, half-height)
LAYOUT = {
    "head": (0.925, 0.075),
    "torso": (0.70, 0.16),
    "pelvis": (0.52, 0.07),
    "leg": (0.25, 0.25),
    "arm": (0.83, 0.20),
}

# Points on the unit sphere used to check that the visceral blob fits
_FIBONACCI = 200


@dataclass(frozen=True)
class Segment:
    """
    One superellipsoid ``((x/a)^2 + (y/b)^2)^(n/2) + |z/c|^n <= 1`` in its
    local frame, rotated by ``roll_deg`` about the y (antero-posterior) axis
    and centred at ``center``.

    ``layers`` lists ``(inset_mm, label)`` from the outside in: the region of a
    layer is the superellipsoid with every semi-axis reduced by ``inset_mm``.
    """
    name: str
    center: tuple
    axes: tuple
    exponent: float = 2.0
    roll_deg: float = 0.0
    layers: tuple = ((0.0, "SAT"),)

    def __post_init__(self):
        if len(self.center) != 3 or len(self.axes) != 3:
            raise ValueError(f"segment {self.name}: center and axes need 3 components")
        if self.exponent <= 0:
            raise ValueError(f"segment {self.name}: exponent must be > 0")
        insets = [inset for inset, _ in self.layers]
        if not insets or insets[0] != 0 or any(b <= a for a, b in zip(insets, insets[1:])):
            raise ValueError(f"segment {self.name}: layer insets must start at 0 and increase")
        if min(self.axes) - insets[-1] <= 0:
            raise ValueError(f"segment {self.name}: innermost layer vanishes")
        for _, label in self.layers:
            if label not in LAYER_LABELS:
                raise ValueError(f"segment {self.name}: unknown layer label {label}")

    def rotation(self):
        """
        Columns are the local x, y, z axes in body coordinates.
        """
        t = np.radians(self.roll_deg)
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def bounds(self):
        """
        Axis-aligned bounding box ``(lo, hi)`` in body coordinates.
        """
        half = np.abs(self.rotation()) @ np.asarray(self.axes, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        return center - half, center + half

    def level(self, x, y, z, inset=0.0):
        """
        The superellipsoid function of the layer at ``inset``, evaluated at
        body coordinates; ``<= 1`` inside.
        """
        d = (x - self.center[0], y - self.center[1], z - self.center[2])
        if self.roll_deg:
            r = self.rotation()
            d = [r[0, k] * d[0] + r[1, k] * d[1] + r[2, k] * d[2] for k in range(3)]
        lx, ly, lz = d
        a, b, c = (s - inset for s in self.axes)
        n = self.exponent
        return ((lx / a) ** 2 + (ly / b) ** 2) ** (n / 2) + np.abs(lz / c) ** n


@dataclass(frozen=True)
class BodySpec:
    """
    A procedural body. ``vat_axes`` of ``None`` means no visceral fat blob.
    """
    seed: int
    height_mm: float
    segments: tuple
    sat_mm: float = 0.0
    muscle_mm: float = 0.0
    vat_center: tuple = (0.0, 0.0, 0.0)
    vat_axes: tuple = None
    arm_abduction_deg: float = 0.0

    def __post_init__(self):
        if self.height_mm <= 0:
            raise ValueError("height must be > 0")
        if not self.segments:
            raise ValueError("a body needs at least one segment")

    def segment(self, name):
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def vat_level(self, x, y, z):
        """
        Ellipsoid function of the visceral blob, ``<= 1`` inside.
        """
        cx, cy, cz = self.vat_center
        ax, ay, az = self.vat_axes
        return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2


@dataclass(frozen=True)
class BodyRanges:
    """
    Parameter ranges for :func:`sample_body`, loaded from ``procgen.json``.
    Segment sizes are fractions of the body height; every ``(lo, hi)`` pair
    is sampled uniformly.
    """
    height_mm: tuple = (1500.0, 1950.0)
    torso_a: tuple = (0.085, 0.11)
    torso_b: tuple = (0.055, 0.075)
    torso_exponent: tuple = (2.5, 4.0)
    pelvis_a: tuple = (0.085, 0.11)
    pelvis_b: tuple = (0.06, 0.08)
    pelvis_exponent: tuple = (2.5, 4.0)
    head_r: tuple = (0.05, 0.06)
    arm_r: tuple = (0.022, 0.03)
    leg_r: tuple = (0.04, 0.055)
    limb_exponent: float = 2.5
    sat_mm: tuple = (4.0, 25.0)
    limb_sat_ratio: float = 0.5
    muscle_mm: tuple = (6.0, 18.0)
    vat_scale: tuple = (0.3, 0.8)
    arm_abduction_deg: tuple = (10.0, 25.0)
    bfp_range: tuple = (5.0, 70.0)
    bfp_spacing_mm: float = 10.0
    max_retries: int = 50
    profiles: dict = field(default_factory=lambda: {"full": {"weight": 1.0, "targets": TARGET_NAMES}})

    def __post_init__(self):
        for f in self.__dataclass_fields__.values():
            value = getattr(self, f.name)
            if f.name in ("bfp_range", "profiles") or not isinstance(value, tuple):
                continue
            if len(value) != 2 or not 0 < value[0] <= value[1]:
                raise ConfigError(f"range {f.name} must be (lo, hi) with 0 < lo <= hi, got {value}")
        if self.bfp_range is not None and (len(self.bfp_range) != 2 or self.bfp_range[0] >= self.bfp_range[1]):
            raise ConfigError(f"bfp_range must be (lo, hi) with lo < hi, got {self.bfp_range}")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")
        if self.bfp_spacing_mm <= 0:
            raise ConfigError("bfp_spacing_mm must be > 0")
        if not isinstance(self.profiles, dict) or not self.profiles:
            raise ConfigError(f"profiles must be a non-empty object of label profiles, got {self.profiles!r}")
        for name, profile in self.profiles.items():
            if not isinstance(profile, dict):
                raise ConfigError(f"profile {name} must be an object with weight and targets, got {profile!r}")
            targets = profile.get("targets", ())
            if not isinstance(targets, (tuple, list)):
                raise ConfigError(f"profile {name} targets must be a list, got {targets!r}")
            unknown = [t for t in targets if t not in TARGET_NAMES]
            if unknown or "height" not in targets:
                raise ConfigError(f"profile {name} must label height and only known targets, got {targets}")
            weight = profile.get("weight", 0)
            if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight <= 0:
                raise ConfigError(f"profile {name} needs a positive weight, got {weight!r}")


@dataclass
class GroundTruth:
    """
    The ten targets of a body: height and circumferences in cm, tissue
    volumes in liters. Procedural bodies are fully labeled.
    """
    height: float
    chest: float
    waist: float
    hip: float
    SAT: float
    IMVAT: float
    VAT: float
    body: float
    LT: float
    MV: float
    mask: np.ndarray = field(default_factory=lambda: np.ones(NUM_TARGETS, dtype=bool))

    def values(self):
        return {name: getattr(self, name) for name in TARGET_NAMES}

    def as_target_vector(self, sample_id, labeled=TARGET_NAMES):
        """
        The supervision vector of this body with only ``labeled`` targets
        present.

        :param sample_id: the sample identifier
        :type sample_id: str

        :param labeled: the names of the targets to keep
        :type labeled: tuple

        :rtype: targets.MaskedTargetVector
        """
        return MaskedTargetVector.from_values(
            sample_id, {k: v for k, v in self.values().items() if k in labeled})


### sampling ###

def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _trunk_layers(sat, muscle):
    return ((0.0, "SAT"), (sat, "MUSCLE"), (sat + muscle, VISCERA))


def _draw(rng, ranges, seed):
    """
    Draws one body from the ranges without validating it.
    """
    h = _uniform(rng, ranges.height_mm)
    sat = _uniform(rng, ranges.sat_mm)
    muscle = _uniform(rng, ranges.muscle_mm)
    limb_sat = sat * ranges.limb_sat_ratio
    abduction = _uniform(rng, ranges.arm_abduction_deg)

    torso_a, torso_b = h * _uniform(rng, ranges.torso_a), h * _uniform(rng, ranges.torso_b)
    torso_n = _uniform(rng, ranges.torso_exponent)
    pelvis_a, pelvis_b = h * _uniform(rng, ranges.pelvis_a), h * _uniform(rng, ranges.pelvis_b)
    pelvis_n = _uniform(rng, ranges.pelvis_exponent)
    head_r = h * _uniform(rng, ranges.head_r)
    arm_r = h * _uniform(rng, ranges.arm_r)
    leg_r = h * _uniform(rng, ranges.leg_r)
    vat_scale = _uniform(rng, ranges.vat_scale)

    def at(part):
        centre, half = LAYOUT[part]
        return centre * h, half * h

    head_z, head_c = at("head")
    torso_z, torso_c = at("torso")
    pelvis_z, pelvis_c = at("pelvis")
    leg_z, leg_c = at("leg")
    shoulder_z, arm_c = at("arm")

    segments = [
        Segment("head", (0.0, 0.0, head_z), (head_r, head_r, head_c), 2.0, 0.0,
                ((0.0, "SAT"), (sat * ranges.limb_sat_ratio, "LEAN"))),
        Segment("torso", (0.0, 0.0, torso_z), (torso_a, torso_b, torso_c), torso_n, 0.0,
                _trunk_layers(sat, muscle)),
        Segment("pelvis", (0.0, 0.0, pelvis_z), (pelvis_a, pelvis_b, pelvis_c), pelvis_n, 0.0,
                _trunk_layers(sat, muscle)),
    ]
    limb_layers = ((0.0, "SAT"), (limb_sat, "MUSCLE"))
    t = np.radians(abduction)
    for side, sign in (("l", 1.0), ("r", -1.0)):
        # arms hang from the shoulder tip, rolled outward by the abduction angle
        top_x = sign * (torso_a + 0.5 * arm_r)
        center = (top_x + sign * arm_c * np.sin(t), 0.0, shoulder_z - arm_c * np.cos(t))
        segments.append(Segment(f"arm_{side}", center, (arm_r, arm_r, arm_c), ranges.limb_exponent,
                                -sign * abduction, limb_layers))
    for side, sign in (("l", 1.0), ("r", -1.0)):
        segments.append(Segment(f"leg_{side}", (sign * 0.5 * pelvis_a, 0.0, leg_z), (leg_r, leg_r, leg_c),
                                ranges.limb_exponent, 0.0, limb_layers))

    core = np.array([torso_a, torso_b, torso_c]) - (sat + muscle)
    vat_axes = tuple(float(v) for v in vat_scale * core * np.array([0.7, 0.6, 0.45]))
    vat_center = (0.0, float(0.15 * core[1]), float(torso_z - 0.35 * core[2]))

    return BodySpec(seed, h, tuple(segments), sat, muscle, vat_center, vat_axes, abduction)


def vat_fits(spec):
    """
    Whether the visceral blob lies strictly inside the torso core, checked on
    a Fibonacci lattice of its surface.

    :param spec: the body
    :type spec: BodySpec

    :rtype: bool
    """
    if spec.vat_axes is None:
        return True
    torso = spec.segment("torso")
    k = np.arange(_FIBONACCI) + 0.5
    polar = np.arccos(1 - 2 * k / _FIBONACCI)
    azimuth = np.pi * (1 + 5 ** 0.5) * k
    unit = np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=1)
    p = unit * np.asarray(spec.vat_axes) + np.asarray(spec.vat_center)
    inset = torso.layers[-1][0]
    return bool(np.all(torso.level(p[:, 0], p[:, 1], p[:, 2], inset) < 1.0))


def body_fat_percent(v):
    """
    BFP of a rasterized body, from its tissue volumes.

    :param v: the label volume
    :type v: volgrid.LabelVolume

    :rtype: float
    """
    return metrics.derive_bfp(body_volumes(v))


def sample_body(rng, ranges=None, seed=0):
    """
    Draws a valid body. Bodies whose visceral blob leaves the torso core, or
    whose coarsely rasterized BFP is outside ``ranges.bfp_range``, are
    redrawn from the same generator.

    :param rng: the random generator
    :type rng: numpy.random.Generator

    :param ranges: the parameter ranges
    :type ranges: BodyRanges

    :param seed: the seed recorded in the spec
    :type seed: int

    :rtype: BodySpec

    :raises RetryBudgetError: if no valid body is found in
        ``ranges.max_retries`` draws
    """
    ranges = BodyRanges() if ranges is None else ranges
    for attempt in range(ranges.max_retries):
        try:
            spec = _draw(rng, ranges, seed)
        except ValueError as e:
            logger.warning("Body %s, draw %d rejected: %s", seed, attempt, e)
            continue
        if not vat_fits(spec):
            logger.warning("Body %s, draw %d rejected: visceral blob outside the torso core", seed, attempt)
            continue
        if ranges.bfp_range is not None:
            bfp = body_fat_percent(rasterize(spec, ranges.bfp_spacing_mm))
            lo, hi = ranges.bfp_range
            if not lo <= bfp <= hi:
                logger.warning("Body %s, draw %d rejected: BFP %.1f%% outside [%s, %s]", seed, attempt, bfp, lo, hi)
                continue
        return spec
    raise RetryBudgetError(f"no valid body for seed {seed} after {ranges.max_retries} draws")


def sample_profile(rng, ranges):
    """
    Picks the label profile of a body by weight.

    :return: the profile name and the names of the targets it labels
    :rtype: (str, tuple)
    """
    names = sorted(ranges.profiles)
    weights = np.array([ranges.profiles[n]["weight"] for n in names], dtype=np.float64)
    name = names[int(rng.choice(len(names), p=weights / weights.sum()))]
    return name, tuple(ranges.profiles[name]["targets"])


### rasterization ###

def _grid(spec, spacing):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for s in spec.segments:
        a, b = s.bounds()
        lo, hi = np.minimum(lo, a), np.maximum(hi, b)
    origin = (np.floor(lo / spacing) - 1) * spacing
    dims = np.ceil((hi - origin) / spacing).astype(int) + 2
    return origin, tuple(int(d) for d in dims)


def rasterize(spec, spacing_mm=DEFAULT_SPACING_MM):
    """
    Labels every voxel centre by the deepest layer that contains it over all
    segments: SAT in the outer layers, MUSCLE in the muscle layers and limb
    cores, LEAN in the head core, and in the trunk core VAT inside the
    visceral blob and LEAN elsewhere. Voxels outside every segment are
    background.

    :param spec: the body
    :type spec: BodySpec

    :param spacing_mm: the isotropic voxel size
    :type spacing_mm: float

    :rtype: volgrid.LabelVolume
    """
    if spacing_mm <= 0:
        raise ValueError(f"spacing must be > 0, got {spacing_mm}")
    origin, dims = _grid(spec, spacing_mm)
    depth = np.zeros(dims, dtype=np.uint8)
    labels = np.zeros(dims, dtype=np.uint8)
    viscera = len(LAYER_LABELS)

    for s in spec.segments:
        lo, hi = s.bounds()
        start = np.maximum(np.floor((lo - origin) / spacing_mm).astype(int), 0)
        stop = np.minimum(np.ceil((hi - origin) / spacing_mm).astype(int) + 1, dims)
        x, y, z = (origin[k] + spacing_mm * np.arange(start[k], stop[k]) for k in range(3))
        x, y, z = x[:, None, None], y[None, :, None], z[None, None, :]
        block = tuple(slice(start[k], stop[k]) for k in range(3))
        sub_depth, sub_labels = depth[block], labels[block]

        for rank, (inset, label) in enumerate(s.layers, 1):
            inside = (s.level(x, y, z, inset) <= 1.0) & (sub_depth < rank)
            sub_depth[inside] = rank
            sub_labels[inside] = viscera if label == VISCERA else LABELS[label]

    core = labels == viscera
    if core.any():
        i, j, k = np.nonzero(core)
        lab = np.full(len(i), LABELS["LEAN"], dtype=np.uint8)
        if spec.vat_axes is not None:
            fat = spec.vat_level(origin[0] + spacing_mm * i, origin[1] + spacing_mm * j, origin[2] + spacing_mm * k) <= 1.0
            lab[fat] = LABELS["VAT"]
        labels[i, j, k] = lab

    logger.debug("Rasterized body %s into %s voxels of %.2f mm", spec.seed, dims, spacing_mm)
    return volgrid.LabelVolume(labels, (spacing_mm,) * 3, tuple(float(o) for o in origin), LEGEND)


### ground truth ###

def body_volumes(v):
    """
    The six volume targets of a rasterized body in liters. IMVAT equals VAT
    since intramuscular fat is not modeled.

    :param v: the label volume
    :type v: volgrid.LabelVolume

    :rtype: {str : float}
    """
    tissue = volgrid.tissue_volumes(v)
    counts = volgrid.class_counts(v)
    body = float(counts[1:].sum()) * v.voxel_volume_mm3 / volgrid.MM3_PER_LITER
    return {
        "SAT": tissue.get("SAT", 0.0),
        "IMVAT": tissue.get("VAT", 0.0),
        "VAT": tissue.get("VAT", 0.0),
        "body": body,
        "LT": tissue.get("LEAN", 0.0),
        "MV": tissue.get("MUSCLE", 0.0),
    }


def extract_surface(v, iso=0.5, lam=meshkit.SMOOTH_LAMBDA, iters=meshkit.SMOOTH_ITERS):
    """
    The smoothed body surface of a label volume: body mask, cavity filling,
    marching cubes, Laplacian smoothing.

    :rtype: meshkit.TriMesh
    """
    mask = volgrid.fill_cavities(volgrid.body_mask(v))
    mesh = meshkit.marching_cubes(volgrid.sample_signed_field(mask), iso)
    return meshkit.laplacian_smooth(mesh, lam, iters)


def synthesize(spec, spacing_mm=DEFAULT_SPACING_MM, keypoints=anthro.KEYPOINTS,
               lam=meshkit.SMOOTH_LAMBDA, iters=meshkit.SMOOTH_ITERS):
    """
    Rasterizes a body, extracts its surface and measures its ground truth.

    :param spec: the body
    :type spec: BodySpec

    :param spacing_mm: the voxel size
    :type spacing_mm: float

    :param keypoints: chest, waist and hip height fractions
    :type keypoints: tuple

    :return: the label volume, the smoothed surface and the ground truth
    :rtype: (volgrid.LabelVolume, meshkit.TriMesh, GroundTruth)
    """
    v = rasterize(spec, spacing_mm)
    mesh = extract_surface(v, 0.5, lam, iters)
    chest, waist, hip = anthro.measure_circumferences(mesh, keypoints)
    truth = GroundTruth(spec.height_mm / anthro.MM_PER_CM, chest, waist, hip, **body_volumes(v))
    return v, mesh, truth


def ground_truth(spec, spacing_mm=DEFAULT_SPACING_MM, keypoints=anthro.KEYPOINTS):
    """
    The ten targets of a body. Volumes are voxel counts of the rasterized
    labels; circumferences are measured on the extracted surface at the
    keypoint heights; height comes from the spec.

    :param spec: the body
    :type spec: BodySpec

    :param spacing_mm: the voxel size
    :type spacing_mm: float

    :rtype: GroundTruth
    """
    return synthesize(spec, spacing_mm, keypoints)[2]
