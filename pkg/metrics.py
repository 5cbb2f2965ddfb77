"""
This module scores predictions against reference targets: mean absolute error
with the standard deviation of the absolute errors, Pearson correlation, and
body fat percentage derived from the predicted tissue volumes. Reports are
produced per dataset, mirroring a table with one row per target, together
with ``(target, prediction)`` scatter files for correlation plots.

>>> reports = evaluate("ckpt", "data")
>>> reports["all"]["per_target"]["height"]["mae"]
1.93
"""

import json
import logging
import math
import os

import numpy as np
import pandas as pd

import dataset
import trainer
from errors import FormatError, UndefinedMetricError
from targets import HEADS, TARGET_NAMES, TARGET_UNITS, target_index

logger = logging.getLogger(__name__)

ALL = "all"
REPORT_FILE = "report.json"

BFP_UNIT = "%"

# Keys of one per-target entry of a report
ENTRY_KEYS = ("unit", "n", "mae", "std", "pearson", "baseline_mae")


def mae(pred, target):
    """
    Mean and population standard deviation of ``|pred - target|``.

    :param pred: predictions
    :type pred: numpy.ndarray

    :param target: reference values
    :type target: numpy.ndarray

    :rtype: (float, float)

    >>> mae([1.0, 2.0, 4.0], [1.0, 3.0, 2.0])
    (1.0, 0.816496580927726)
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError(f"need two non-empty vectors of equal length, got {pred.shape} and {target.shape}")
    errors = np.abs(pred - target)
    return float(errors.mean()), float(errors.std())


def pearson(pred, target):
    """
    Product-moment correlation, clamped to ``[-1, 1]``.

    :raises UndefinedMetricError: for fewer than two pairs or zero variance
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} and {target.shape}")
    if pred.size < 2:
        raise UndefinedMetricError("Pearson r needs at least two pairs")
    dp, dt = pred - pred.mean(), target - target.mean()
    sp, st = np.sqrt(np.sum(dp * dp)), np.sqrt(np.sum(dt * dt))
    if sp == 0 or st == 0:
        raise UndefinedMetricError("Pearson r is undefined for zero variance")
    return float(np.clip(np.sum(dp * dt) / (sp * st), -1.0, 1.0))


def _present(volumes, name):
    v = volumes.get(name)
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def derive_bfp(volumes):
    """
    Body fat percentage: IMVAT (or VAT when IMVAT is unavailable) plus SAT,
    over the body volume.

    :param volumes: tissue volumes in liters keyed by class name; missing or
        None entries are unavailable
    :type volumes: {str : float}

    :return: the percentage
    :rtype: float

    :raises UndefinedMetricError: if a needed volume is missing, the body
        volume is not positive, or the fat exceeds the body volume

    >>> derive_bfp({"IMVAT": 2.0, "SAT": 3.0, "body": 50.0})
    10.0
    """
    visceral = "IMVAT" if _present(volumes, "IMVAT") else "VAT"
    for name in ("SAT", visceral, "body"):
        if not _present(volumes, name):
            raise UndefinedMetricError(f"body fat percentage needs {name}")
    body = volumes["body"]
    if not body > 0:
        raise UndefinedMetricError(f"body volume must be > 0, got {body}")
    if volumes[visceral] < 0 or volumes["SAT"] < 0:
        raise UndefinedMetricError(f"fat volumes must be >= 0, got SAT {volumes['SAT']}, {visceral} {volumes[visceral]}")
    fat = volumes[visceral] + volumes["SAT"]
    if fat > body:
        raise UndefinedMetricError(f"fat volume {fat} exceeds body volume {body}")
    return 100.0 * fat / body


def bfp_vector(y, mask=None):
    """
    Derived body fat percentage of each row of a ``B x 10`` target array,
    NaN where it cannot be computed.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    mask = ~np.isnan(y) if mask is None else np.atleast_2d(mask)
    result = np.full(len(y), np.nan)
    for i in range(len(y)):
        volumes = {name: y[i, target_index(name)] if mask[i, target_index(name)] else None
                   for name in ("SAT", "IMVAT", "VAT", "body")}
        try:
            result[i] = derive_bfp(volumes)
        except UndefinedMetricError as e:
            logger.debug("No body fat percentage for row %d: %s", i, e)
    return result


### reports ###

def score(pred, target, unit, baseline=None):
    """
    One report entry. Pearson r is None when it is undefined, and so is
    ``baseline_mae`` when there is no finite baseline value.

    :param baseline: the constant prediction of the training-mean baseline
    :type baseline: float
    """
    mean, std = mae(pred, target)
    try:
        r = pearson(pred, target)
    except UndefinedMetricError:
        r = None
    if baseline is None or not np.isfinite(baseline):
        baseline_mae = None
    else:
        baseline_mae = mae(np.full(len(target), baseline), target)[0]
    return {"unit": unit, "n": int(len(target)), "mae": mean, "std": std, "pearson": r,
            "baseline_mae": baseline_mae}


def report(name, pred, y, mask, predicted, baseline=None):
    """
    The report of one dataset. Samples with a reference body fat percentage
    but no defined predicted one are counted under ``omitted["BFP"]``.

    :param name: the dataset name
    :type name: str

    :param pred: predictions, ``B x 10`` in target units
    :type pred: numpy.ndarray

    :param y: reference targets, ``B x 10``
    :type y: numpy.ndarray

    :param mask: presence bits of ``y``
    :type mask: numpy.ndarray

    :param predicted: which targets the model predicts
    :type predicted: numpy.ndarray

    :param baseline: the training-mean prediction, ``10`` values, or None
    :type baseline: numpy.ndarray

    :return: the report and the scatter pairs of every scored target
    :rtype: (dict, {str : (numpy.ndarray, numpy.ndarray)})
    """
    per_target, omitted, pairs = {}, {}, {}
    for j, target in enumerate(TARGET_NAMES):
        keep = mask[:, j]
        if not predicted[j]:
            omitted[target] = "no head predicts this target"
        elif not keep.any():
            omitted[target] = "no labeled samples"
        else:
            per_target[target] = score(pred[keep, j], y[keep, j], TARGET_UNITS[target],
                                       None if baseline is None else baseline[j])
            pairs[target] = (y[keep, j], pred[keep, j])

    true_bfp, pred_bfp = bfp_vector(y, mask), bfp_vector(pred)
    keep = ~np.isnan(true_bfp) & ~np.isnan(pred_bfp)
    dropped = int(np.sum(~np.isnan(true_bfp) & np.isnan(pred_bfp)))
    if keep.any():
        baseline_bfp = None if baseline is None else bfp_vector(baseline)[0]
        bfp = score(pred_bfp[keep], true_bfp[keep], BFP_UNIT, baseline_bfp)
        pairs["BFP"] = (true_bfp[keep], pred_bfp[keep])
        if dropped:
            omitted["BFP"] = f"{dropped} samples have no defined predicted body fat percentage"
    else:
        bfp = None
        omitted["BFP"] = "no sample with both reference and predicted fat volumes"
    if dropped:
        logger.warning("%s: %d samples dropped from the body fat percentage score", name, dropped)

    return {"dataset": name, "n_samples": int(len(y)), "per_target": per_target,
            "bfp": bfp, "omitted": omitted}, pairs


def build_reports(samples, pred, predicted, baseline=None):
    """
    One report over all samples plus one per dataset name when the samples
    come from more than one dataset. ``baseline`` is the training-mean
    prediction scored next to the model, see :func:`mean_predictor`.

    :return: reports and scatter pairs keyed by dataset name
    :rtype: ({str : dict}, {str : dict})
    """
    y = np.stack([s.target.y for s in samples])
    mask = np.stack([s.target.mask for s in samples])
    names = np.array([s.dataset for s in samples])

    groups = [ALL] + (sorted(set(names)) if len(set(names)) > 1 else [])
    reports, scatter = {}, {}
    for group in groups:
        keep = np.ones(len(samples), dtype=bool) if group == ALL else names == group
        reports[group], scatter[group] = report(group, pred[keep], y[keep], mask[keep], predicted, baseline)
    return reports, scatter


def mean_predictor(train_targets):
    """
    Predict-the-training-mean baseline: the mean of each target over its
    labeled training values (NaN if never labeled).

    :param train_targets: the target vectors of the training split
    :type train_targets: list

    :rtype: numpy.ndarray
    """
    if not train_targets:
        return np.full(len(TARGET_NAMES), np.nan)
    y = np.stack([v.y for v in train_targets])
    mask = np.stack([v.mask for v in train_targets])
    counts = mask.sum(axis=0)
    sums = np.where(mask, y, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def evaluate(checkpoint_dir, data_dir, split="test"):
    """
    Scores a checkpoint on one split of a dataset directory, next to the
    mean of the training targets as a baseline.

    :param checkpoint_dir: the checkpoint written by training
    :type checkpoint_dir: str

    :param data_dir: the dataset directory
    :type data_dir: str

    :param split: the split to score
    :type split: str

    :return: reports and scatter pairs keyed by dataset name
    :rtype: ({str : dict}, {str : dict})
    """
    model, params, normalizer, cfg = trainer.load(checkpoint_dir)
    samples = dataset.require_samples(dataset.load_samples(data_dir, split), f"the {split} split")
    pred = trainer.predict(model, params, normalizer, samples, cfg)
    predicted = np.zeros(len(TARGET_NAMES), dtype=bool)
    for name in model.head_names:
        predicted[list(HEADS[name].targets)] = True
    baseline = mean_predictor(dataset.split_targets(data_dir, "train"))
    return build_reports(samples, pred, predicted, baseline)


### files ###

def validate_report(data):
    """
    Checks the structure of one report.

    :raises FormatError: if a key is missing or has the wrong type
    """
    def fail(message):
        raise FormatError(f"invalid report: {message}")

    if not isinstance(data, dict):
        fail("not an object")
    for key, kind in (("dataset", str), ("n_samples", int), ("per_target", dict), ("omitted", dict)):
        if not isinstance(data.get(key), kind):
            fail(f"'{key}' must be {kind.__name__}")
    entries = dict(data["per_target"])
    if data.get("bfp") is not None:
        entries["BFP"] = data["bfp"]
    for name, entry in entries.items():
        if name != "BFP" and name not in TARGET_NAMES:
            fail(f"unknown target '{name}'")
        if not isinstance(entry, dict) or set(entry) != set(ENTRY_KEYS):
            fail(f"entry '{name}' must have keys {ENTRY_KEYS}")
        if not isinstance(entry["n"], int) or entry["n"] < 1:
            fail(f"entry '{name}' needs a positive count")
        for key in ("mae", "std"):
            if not isinstance(entry[key], float) or entry[key] < 0:
                fail(f"entry '{name}' needs a non-negative {key}")
        base = entry["baseline_mae"]
        if base is not None and not (isinstance(base, float) and base >= 0):
            fail(f"entry '{name}' needs a non-negative or null baseline_mae")
        r = entry["pearson"]
        if r is not None and not (isinstance(r, float) and -1.0 <= r <= 1.0):
            fail(f"entry '{name}' has pearson {r} outside [-1, 1]")
    return data


def report_path(out, name):
    """
    ``report.json`` for the overall report, ``report_<dataset>.json`` next to
    it for the others.
    """
    if name == ALL:
        return out
    stem, ext = os.path.splitext(out)
    return f"{stem}_{name}{ext}"


def write_reports(reports, scatter, out):
    """
    Writes every report and the scatter files of the overall report
    (``scatter_<target>.csv`` in the same directory).

    :return: the written paths
    :rtype: list
    """
    directory = os.path.dirname(os.path.abspath(out))
    os.makedirs(directory, exist_ok=True)
    written = []
    for name, data in reports.items():
        path = report_path(out, name)
        with open(path, "w") as f:
            json.dump(validate_report(data), f, indent=4, sort_keys=True)
            f.write("\n")
        written.append(path)

    for target, (truth, pred) in scatter[ALL].items():
        path = os.path.join(directory, f"scatter_{target}.csv")
        pd.DataFrame({"target": truth, "prediction": pred}).to_csv(path, index=False)
        written.append(path)
    logger.info("Wrote %d report files to %s", len(written), directory)
    return written


def load_report(path):
    try:
        with open(path, "r") as f:
            return validate_report(json.load(f))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
