"""
This module loads, validates, and processes volumetric label grids. A label
volume is a voxel grid of tissue class ids with a physical spacing; from it the
pipeline derives the binary body mask, fills internal air cavities slice by
slice, and counts tissue volumes.

On disk a volume is a pair of files: a JSON header ``<name>.lvol.json`` and a
raw little-endian ``uint8`` payload ``<name>.lvol.raw`` in x-fastest order.

>>> v = load_label_volume("body_0001.lvol.json")
>>> tissue_volumes(v)
{'SAT': 4.218, 'VAT': 1.904, ...}
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from errors import FormatError

logger = logging.getLogger(__name__)

HEADER_SUFFIX = ".lvol.json"
PAYLOAD_SUFFIX = ".lvol.raw"

# Canonical legend names. Unknown names are allowed but ignored downstream.
CLASS_NAMES = ("background", "SAT", "IMVAT", "VAT", "MUSCLE", "BONE", "LEAN", "BODY")

MM3_PER_LITER = 1e6


def _check_geometry(shape, spacing_mm, origin_mm, height_axis):
    if len(shape) != 3:
        raise FormatError(f"volume must be 3-dimensional, got shape {shape}")
    if len(spacing_mm) != 3 or not all(s > 0 for s in spacing_mm):
        raise FormatError(f"spacing must be three positive values, got {spacing_mm}")
    if len(origin_mm) != 3:
        raise FormatError(f"origin must have three components, got {origin_mm}")
    if height_axis not in (0, 1, 2):
        raise FormatError(f"height_axis must be 0, 1 or 2, got {height_axis}")


@dataclass
class LabelVolume:
    """
    A voxel grid of tissue class ids.

    ``voxels`` is indexed ``[x, y, z]`` with shape ``dims``; the on-disk order
    is x-fastest. ``legend`` maps class id to class name and always maps 0 to
    ``"background"``.
    """
    voxels: np.ndarray
    spacing_mm: tuple
    origin_mm: tuple = (0.0, 0.0, 0.0)
    legend: dict = field(default_factory=lambda: {0: "background"})
    height_axis: int = 2

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        self.legend = {int(k): str(v) for k, v in self.legend.items()}
        _check_geometry(self.voxels.shape, self.spacing_mm, self.origin_mm, self.height_axis)

        if self.legend.get(0) != "background":
            raise FormatError("class id 0 must be 'background'")
        present = np.flatnonzero(np.bincount(self.voxels.ravel(), minlength=256))
        missing = [int(c) for c in present if int(c) not in self.legend]
        if missing:
            raise FormatError(f"voxel class ids {missing} are not in the legend")

    @property
    def dims(self):
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def class_id(self, name):
        """
        Looks up the class id of a legend name.

        :param name: the class name, e.g. ``"SAT"``
        :type name: str

        :return: the class id, or ``None`` if the legend does not contain it
        :rtype: int
        """
        for k, v in self.legend.items():
            if v == name:
                return k
        return None


@dataclass
class BinaryMask:
    """
    One boolean per voxel, sharing the geometry of the volume it came from.
    """
    bits: np.ndarray
    spacing_mm: tuple
    origin_mm: tuple = (0.0, 0.0, 0.0)
    height_axis: int = 2

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        _check_geometry(self.bits.shape, self.spacing_mm, self.origin_mm, self.height_axis)

    @property
    def dims(self):
        return tuple(int(d) for d in self.bits.shape)


@dataclass
class ScalarGrid:
    """
    Scalar samples on a regular grid, the input of marching cubes.
    """
    values: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_geometry(self.values.shape, self.spacing_mm, self.origin_mm, 2)


def volume_paths(path):
    """
    Resolves the header and payload paths of a volume. ``path`` may name the
    header, the payload, or the common stem.

    :param path: any of the three names
    :type path: str

    :return: header path and payload path
    :rtype: (str, str)
    """
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if path.endswith(suffix):
            path = path[:-len(suffix)]
            break
    return path + HEADER_SUFFIX, path + PAYLOAD_SUFFIX


def load_label_volume(path):
    """
    Reads a label volume from its header/payload pair.

    :param path: header path, payload path, or their common stem
    :type path: str

    :return: the validated volume
    :rtype: LabelVolume

    :raises FormatError: if the payload size disagrees with the header, or a
        voxel value is missing from the legend
    """
    header_path, payload_path = volume_paths(path)
    try:
        with open(header_path, "r") as f:
            header = json.load(f)
        with open(payload_path, "rb") as f:
            payload = f.read()
    except FileNotFoundError as e:
        raise FormatError(f"missing volume file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path} is not valid JSON: {e}") from e

    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(header["spacing_mm"])
        origin = tuple(header.get("origin_mm", (0.0, 0.0, 0.0)))
        height_axis = int(header.get("height_axis", 2))
        legend = {int(k): v for k, v in header["labels"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed volume header {header_path}: {e}") from e

    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, header dims {dims} need {expected}")

    voxels = np.frombuffer(payload, dtype="<u1").reshape(dims, order="F")
    logger.debug("Loaded %s with dims %s", header_path, dims)
    return LabelVolume(voxels.copy(), spacing, origin, legend, height_axis)


def save_label_volume(v, path):
    """
    Writes a label volume as a header/payload pair.

    :param v: the volume
    :type v: LabelVolume

    :param path: header path, payload path, or their common stem
    :type path: str

    :return: the header path that was written
    :rtype: str
    """
    header_path, payload_path = volume_paths(path)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "height_axis": v.height_axis,
        "labels": {str(k): v.legend[k] for k in sorted(v.legend)},
    }
    with open(header_path, "w") as f:
        json.dump(header, f, indent=4)
        f.write("\n")
    with open(payload_path, "wb") as f:
        f.write(v.voxels.astype("<u1").tobytes(order="F"))
    return header_path


def body_mask(v):
    """
    Binary body volume: every voxel with a label greater than 0.

    :param v: the label volume
    :type v: LabelVolume

    :rtype: BinaryMask
    """
    return BinaryMask(v.voxels > 0, v.spacing_mm, v.origin_mm, v.height_axis)


def slice_structure(height_axis):
    """
    3x3x3 structuring element that connects 4-neighbours within an axial slice
    and nothing across slices.
    """
    structure = np.zeros((3, 3, 3), dtype=bool)
    for axis in range(3):
        if axis == height_axis:
            continue
        for offset in (0, 2):
            index = [1, 1, 1]
            index[axis] = offset
            structure[tuple(index)] = True
    structure[1, 1, 1] = True
    return structure


def fill_cavities(m):
    """
    Fills enclosed background per axial slice. A background voxel stays
    background iff it is 4-connected, within its slice, to the slice border.

    A single 3D hole filling pass with a structuring element that has no
    neighbours along the height axis is equivalent to filling every slice on
    its own.

    :param m: the body mask
    :type m: BinaryMask

    :return: the filled mask, a superset of ``m``
    :rtype: BinaryMask
    """
    filled = ndimage.binary_fill_holes(m.bits, structure=slice_structure(m.height_axis))
    filled |= m.bits
    return BinaryMask(filled, m.spacing_mm, m.origin_mm, m.height_axis)


def class_counts(v):
    """
    Number of voxels per class id.

    :param v: the label volume
    :type v: LabelVolume

    :return: counts indexed by class id
    :rtype: numpy.ndarray
    """
    return np.bincount(v.voxels.ravel(), minlength=256)


def tissue_volumes(v):
    """
    Volume of every non-background class in liters: voxel count times voxel
    volume, divided by 10^6.

    :param v: the label volume
    :type v: LabelVolume

    :return: liters keyed by class name
    :rtype: {str : float}

    >>> v = LabelVolume(np.ones((1, 1, 1)), (2, 2, 2), legend={0: "background", 1: "SAT"})
    >>> tissue_volumes(v)
    {'SAT': 8e-06}
    """
    counts = class_counts(v)
    voxel = v.voxel_volume_mm3
    volumes = {}
    for class_id in sorted(v.legend):
        if class_id == 0:
            continue
        name = v.legend[class_id]
        volumes[name] = volumes.get(name, 0.0) + float(counts[class_id]) * voxel / MM3_PER_LITER
    return volumes


def sample_signed_field(m):
    """
    Scalar field for marching cubes: 1.0 inside the mask, 0.0 outside.

    :param m: the mask
    :type m: BinaryMask

    :rtype: ScalarGrid
    """
    return ScalarGrid(m.bits.astype(np.float64), m.spacing_mm, m.origin_mm)
