"""
This module reads and writes the dataset directory shared by the command line
subcommands::

    DIR/
    |____volumes/<id>.lvol.json, <id>.lvol.raw
    |____meshes/<id>.obj
    |____scans/<id>.ply
    |____targets.csv
    |____split.json

``targets.csv`` has one row per sample: its id, the name of the dataset
(label profile) it belongs to, and the ten targets, empty where unlabeled.
``split.json`` lists the train, validation and test sample ids.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

import meshkit
from errors import EmptyInputError, FormatError
from targets import TARGET_NAMES, MaskedTargetVector

logger = logging.getLogger(__name__)

VOLUMES_DIR = "volumes"
MESHES_DIR = "meshes"
SCANS_DIR = "scans"
TARGETS_FILE = "targets.csv"
SPLIT_FILE = "split.json"

SPLITS = ("train", "val", "test")

COLUMNS = ("sample_id", "dataset") + TARGET_NAMES


@dataclass
class Sample:
    """
    One scan with its targets.
    """
    sample_id: str
    dataset: str
    cloud: meshkit.OrientedPointCloud
    target: MaskedTargetVector


def sample_id(i):
    """
    >>> sample_id(7)
    'body_00007'
    """
    return f"body_{i:05d}"


def make_dirs(root):
    for sub in (VOLUMES_DIR, MESHES_DIR, SCANS_DIR):
        os.makedirs(os.path.join(root, sub), exist_ok=True)


def volume_path(root, sid):
    return os.path.join(root, VOLUMES_DIR, sid)


def mesh_path(root, sid):
    return os.path.join(root, MESHES_DIR, sid + ".obj")


def scan_path(root, sid):
    return os.path.join(root, SCANS_DIR, sid + ".ply")


### targets.csv ###

def write_targets(path, rows):
    """
    Writes ``targets.csv``, sorted by sample id.

    :param path: the output path
    :type path: str

    :param rows: ``(dataset, vector)`` pairs
    :type rows: list
    """
    records = []
    for dataset, vector in sorted(rows, key=lambda r: r[1].sample_id):
        records.append({"sample_id": vector.sample_id, "dataset": dataset, **vector.as_dict()})
    frame = pd.DataFrame.from_records(records, columns=list(COLUMNS))
    frame[list(TARGET_NAMES)] = frame[list(TARGET_NAMES)].astype(np.float64)
    frame.to_csv(path, index=False, na_rep="")


def read_targets(path):
    """
    Reads ``targets.csv``.

    :param path: the file
    :type path: str

    :return: ``(dataset, vector)`` pairs in file order
    :rtype: list

    :raises FormatError: for missing columns or duplicate sample ids
    """
    try:
        frame = pd.read_csv(path, dtype={"sample_id": str, "dataset": str},
                            keep_default_na=False, na_values=[""], float_precision="round_trip")
    except FileNotFoundError as e:
        raise FormatError(f"targets file not found: {path}") from e

    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{path} is missing columns {missing}")
    if frame["sample_id"].duplicated().any():
        raise FormatError(f"{path} has duplicate sample ids")

    rows = []
    for record in frame.to_dict("records"):
        values = {name: (None if pd.isna(record[name]) else float(record[name])) for name in TARGET_NAMES}
        rows.append((record["dataset"], MaskedTargetVector.from_values(record["sample_id"], values)))
    return rows


### split.json ###

def make_split(ids, seed):
    """
    Shuffles the ids and cuts them 8/1/1 into train, validation and test.
    With at least three samples, validation and test get at least one each.

    :param ids: the sample ids
    :type ids: list

    :param seed: the shuffle seed
    :type seed: int

    :rtype: {str : list}
    """
    ids = sorted(ids)
    order = [ids[k] for k in np.random.default_rng(seed).permutation(len(ids))]
    n = len(order)
    held = max(1, n // 10) if n >= 3 else 0
    return {
        "train": sorted(order[2 * held:]),
        "val": sorted(order[:held]),
        "test": sorted(order[held:2 * held]),
    }


def write_split(path, split):
    with open(path, "w") as f:
        json.dump({k: list(split[k]) for k in SPLITS}, f, indent=4)
        f.write("\n")


def read_split(path):
    try:
        with open(path, "r") as f:
            split = json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"split file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(split, dict) or any(not isinstance(split.get(k), list) for k in SPLITS):
        raise FormatError(f"{path} must map {SPLITS} to lists of sample ids")
    return split


### samples ###

def load_samples(root, split=None):
    """
    Loads the scans and targets of one split, or of every sample.

    :param root: the dataset directory
    :type root: str

    :param split: ``"train"``, ``"val"``, ``"test"`` or None for all samples
    :type split: str

    :return: the samples, sorted by id
    :rtype: list

    :raises FormatError: if a listed sample has no targets row or no scan
    """
    rows = {vector.sample_id: (dataset, vector) for dataset, vector in read_targets(os.path.join(root, TARGETS_FILE))}
    if split is None:
        ids = sorted(rows)
    else:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got '{split}'")
        ids = sorted(read_split(os.path.join(root, SPLIT_FILE))[split])

    samples = []
    for sid in ids:
        if sid not in rows:
            raise FormatError(f"sample '{sid}' has no row in {TARGETS_FILE}")
        path = scan_path(root, sid)
        if not os.path.isfile(path):
            raise FormatError(f"sample '{sid}' has no scan at {path}")
        dataset, vector = rows[sid]
        samples.append(Sample(sid, dataset, meshkit.load_ply(path), vector))
    logger.info("Loaded %d samples from %s%s", len(samples), root, f" ({split})" if split else "")
    return samples


def split_targets(root, split):
    """
    The target vectors of one split, sorted by id, without loading scans.

    :raises FormatError: if a listed sample has no targets row
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got '{split}'")
    rows = {vector.sample_id: vector for _, vector in read_targets(os.path.join(root, TARGETS_FILE))}
    ids = sorted(read_split(os.path.join(root, SPLIT_FILE))[split])
    missing = [sid for sid in ids if sid not in rows]
    if missing:
        raise FormatError(f"samples {missing} have no row in {TARGETS_FILE}")
    return [rows[sid] for sid in ids]


def require_samples(samples, what):
    if not samples:
        raise EmptyInputError(f"no samples for {what}")
    return samples
