"""
File for testing the ``dataset.py`` module.
"""
import os

import numpy as np
import pytest

import dataset
import meshkit
from errors import EmptyInputError, FormatError
from targets import TARGET_NAMES, MaskedTargetVector


def vector(i, labeled=TARGET_NAMES):
    values = {name: 100.0 / 3 + i + k * 0.1 for k, name in enumerate(TARGET_NAMES) if name in labeled}
    return MaskedTargetVector.from_values(dataset.sample_id(i), values)


def small_cloud(n=20, seed=0):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return meshkit.OrientedPointCloud(rng.uniform(0, 1000, size=(n, 3)), normals)


def make_dataset(root, count, scans=True):
    dataset.make_dirs(root)
    rows = [("full", vector(i)) for i in range(count)]
    dataset.write_targets(os.path.join(root, dataset.TARGETS_FILE), rows)
    dataset.write_split(os.path.join(root, dataset.SPLIT_FILE),
                        dataset.make_split([v.sample_id for _, v in rows], seed=0))
    if scans:
        for i in range(count):
            meshkit.save_ply(small_cloud(seed=i), dataset.scan_path(root, dataset.sample_id(i)))
    return rows


### targets.csv ###

def test_sample_id():
    assert dataset.sample_id(0) == "body_00000"
    assert dataset.sample_id(123) == "body_00123"


def test_targets_round_trip(tmp_path):
    path = str(tmp_path / dataset.TARGETS_FILE)
    rows = [("full", vector(2)), ("lab", vector(1, labeled=("height", "waist"))), ("full", vector(0))]
    dataset.write_targets(path, rows)
    loaded = dataset.read_targets(path)

    assert [v.sample_id for _, v in loaded] == ["body_00000", "body_00001", "body_00002"]
    assert [name for name, _ in loaded] == ["full", "lab", "full"]
    expected = {v.sample_id: v for _, v in rows}
    for _, v in loaded:
        assert np.array_equal(v.mask, expected[v.sample_id].mask)
        assert np.array_equal(v.y, expected[v.sample_id].y, equal_nan=True)


def test_targets_header(tmp_path):
    path = str(tmp_path / dataset.TARGETS_FILE)
    dataset.write_targets(path, [("lab", vector(0, labeled=("height",)))])
    with open(path) as f:
        header, row = f.read().splitlines()
    assert header.split(",") == list(dataset.COLUMNS)
    assert row.split(",")[2:] == [repr(100.0 / 3)] + [""] * 9


@pytest.mark.parametrize("text", [
    "sample_id,dataset,height\nbody_00000,full,170.0\n",
    "sample_id,dataset," + ",".join(TARGET_NAMES) + "\n"
    + "body_00000,full" + ",1.0" * 10 + "\n" + "body_00000,full" + ",2.0" * 10 + "\n",
])
def test_bad_targets(tmp_path, text):
    path = tmp_path / dataset.TARGETS_FILE
    path.write_text(text)
    with pytest.raises(FormatError):
        dataset.read_targets(str(path))


def test_missing_targets(tmp_path):
    with pytest.raises(FormatError):
        dataset.read_targets(str(tmp_path / dataset.TARGETS_FILE))


### split.json ###

@pytest.mark.parametrize("n, sizes", [
    (10, (8, 1, 1)),
    (200, (160, 20, 20)),
    (25, (21, 2, 2)),
    (3, (1, 1, 1)),
    (2, (2, 0, 0)),
])
def test_make_split_sizes(n, sizes):
    ids = [dataset.sample_id(i) for i in range(n)]
    split = dataset.make_split(ids, seed=0)
    assert tuple(len(split[k]) for k in dataset.SPLITS) == sizes
    assert sorted(split["train"] + split["val"] + split["test"]) == ids


def test_make_split_deterministic():
    ids = [dataset.sample_id(i) for i in range(50)]
    assert dataset.make_split(ids, 4) == dataset.make_split(ids[::-1], 4)
    assert dataset.make_split(ids, 4) != dataset.make_split(ids, 5)


def test_split_round_trip(tmp_path):
    path = str(tmp_path / dataset.SPLIT_FILE)
    split = dataset.make_split([dataset.sample_id(i) for i in range(10)], seed=1)
    dataset.write_split(path, split)
    assert dataset.read_split(path) == split


@pytest.mark.parametrize("text", ["[]", '{"train": []}', '{"train": [], "val": [], "test": 3}', "{"])
def test_bad_split(tmp_path, text):
    path = tmp_path / dataset.SPLIT_FILE
    path.write_text(text)
    with pytest.raises(FormatError):
        dataset.read_split(str(path))


### samples ###

def test_load_samples(tmp_path):
    root = str(tmp_path)
    make_dataset(root, 10)
    split = dataset.read_split(os.path.join(root, dataset.SPLIT_FILE))

    train = dataset.load_samples(root, "train")
    assert [s.sample_id for s in train] == split["train"]
    assert len(dataset.load_samples(root)) == 10

    sample = dataset.load_samples(root, "test")[0]
    i = int(sample.sample_id.split("_")[1])
    assert np.allclose(sample.cloud.points, small_cloud(seed=i).points)
    assert np.array_equal(sample.target.y, vector(i).y)
    assert sample.dataset == "full"


def test_load_samples_missing_scan(tmp_path):
    root = str(tmp_path)
    make_dataset(root, 4, scans=False)
    with pytest.raises(FormatError):
        dataset.load_samples(root)


def test_load_samples_bad_split(tmp_path):
    root = str(tmp_path)
    make_dataset(root, 4)
    with pytest.raises(ValueError):
        dataset.load_samples(root, "holdout")


def test_split_targets(tmp_path):
    root = str(tmp_path)
    make_dataset(root, 10, scans=False)
    split = dataset.read_split(os.path.join(root, dataset.SPLIT_FILE))
    vectors = dataset.split_targets(root, "train")
    assert [v.sample_id for v in vectors] == split["train"]
    assert np.array_equal(vectors[0].y, vector(int(split["train"][0].split("_")[1])).y)
    with pytest.raises(ValueError):
        dataset.split_targets(root, "holdout")


def test_require_samples():
    with pytest.raises(EmptyInputError):
        dataset.require_samples([], "training")
    assert dataset.require_samples([1], "training") == [1]
