"""
Command line interface of the pipeline. Every subcommand is a thin adapter
over library functions: it parses flags, loads the JSON configs, calls the
library, and writes the output files.

Malformed input makes a subcommand exit with status 1 after printing one JSON
line ``{"error": ..., "message": ..., "command": ...}`` on stderr.

    $ python main.py synth-bodies --count 200 --seed 0 --out data
    $ python main.py simulate-scan --data data --config scan.json --seed 0
    $ python main.py train --data data --config train.json --out ckpt
    $ python main.py eval --checkpoint ckpt --data data --out report.json
    $ python main.py compare --data data --config train.json --seeds 0,1,2 --out compare
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

import anthro
import config
import dataset
import meshkit
import metrics
import procgen
import scansim
import trainer
import volgrid
from errors import BodyCompError
from targets import HEAD_ORDER

logger = logging.getLogger(__name__)

COMPARE_FILE = "compare.json"


def _map(fn, items, jobs):
    """
    ``fn`` over ``items`` in order, on ``jobs`` threads.
    """
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_json(data, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=4, sort_keys=True)
        f.write("\n")


### library entry points ###

def synth_body(i, root, seed, ranges, spacing_mm, keypoints=anthro.KEYPOINTS):
    """
    Generates body ``i`` of a dataset: its label profile, volume, mesh and
    targets. Body ``i`` only depends on ``(seed, i)``.

    :return: the dataset name and the target vector
    :rtype: (str, targets.MaskedTargetVector)
    """
    sid = dataset.sample_id(i)
    rng = np.random.default_rng([seed, i])
    profile, labeled = procgen.sample_profile(rng, ranges)
    spec = procgen.sample_body(rng, ranges, seed=i)
    volume, mesh, truth = procgen.synthesize(spec, spacing_mm, keypoints)
    volgrid.save_label_volume(volume, dataset.volume_path(root, sid))
    meshkit.save_obj(mesh, dataset.mesh_path(root, sid))
    logger.debug("Body %s: %s profile, height %.1f cm", sid, profile, truth.height)
    return profile, truth.as_target_vector(sid, labeled)


def synth_bodies(root, count, seed, ranges, spacing_mm, jobs=1):
    """
    Writes ``count`` procedural bodies, ``targets.csv`` and ``split.json``
    to ``root``.

    :return: the ``(dataset, vector)`` rows
    :rtype: list
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    dataset.make_dirs(root)
    logger.info("Synthesizing %d bodies...", count)
    rows = _map(lambda i: synth_body(i, root, seed, ranges, spacing_mm), range(count), jobs)
    dataset.write_targets(os.path.join(root, dataset.TARGETS_FILE), rows)
    split = dataset.make_split([v.sample_id for _, v in rows], seed)
    dataset.write_split(os.path.join(root, dataset.SPLIT_FILE), split)
    logger.info("...Done")
    return rows


def scan_mesh(mesh, cfg, rng):
    """
    Samples the dense oriented cloud of a mesh and simulates its scan with
    the same generator.
    """
    dense = meshkit.sample_surface(mesh, cfg.dense_points, rng)
    return scansim.simulate_scan(dense, cfg, rng)


def scan_file(path, out, cfg, seed, sample_id=None):
    """
    Simulates the scan of an OBJ mesh or a PLY cloud. The scan generator is
    derived from ``seed`` and the sample id (by default the file stem).
    """
    sid = sample_id or os.path.basename(path).split(".")[0]
    rng = scansim.scan_rng(seed, sid)
    if path.lower().endswith(".obj"):
        scan = scan_mesh(meshkit.load_obj(path), cfg, rng)
    else:
        scan = scansim.simulate_scan(meshkit.load_ply(path), cfg, rng)
    meshkit.save_ply(scan, out)
    return scan


def scan_dataset(root, cfg, seed, jobs=1):
    """
    Simulates the scan of every mesh listed in ``targets.csv``.
    """
    ids = sorted(v.sample_id for _, v in dataset.read_targets(os.path.join(root, dataset.TARGETS_FILE)))
    os.makedirs(os.path.join(root, dataset.SCANS_DIR), exist_ok=True)
    logger.info("Simulating %d scans...", len(ids))
    _map(lambda sid: scan_file(dataset.mesh_path(root, sid), dataset.scan_path(root, sid), cfg, seed, sid), ids, jobs)
    logger.info("...Done")


def train_dataset(root, cfg, out):
    train_samples = dataset.require_samples(dataset.load_samples(root, "train"), "training")
    val_samples = dataset.load_samples(root, "val")
    return trainer.train(train_samples, val_samples, cfg, out)


def evaluate_dataset(checkpoint, root, out, split="test"):
    reports, scatter = metrics.evaluate(checkpoint, root, split)
    metrics.write_reports(reports, scatter, out)
    for target, entry in reports[metrics.ALL]["per_target"].items():
        logger.info("%s: MAE %.3f %s, training-mean baseline %s", target, entry["mae"], entry["unit"],
                    "-" if entry["baseline_mae"] is None else f"{entry['baseline_mae']:.3f}")
    return reports


def compare_heads(root, cfg, out, seeds, variant=("BC",)):
    """
    Trains the configured heads and the ``variant`` subset once per seed on
    the same split and scores both on the test split. The summary holds the
    derived body fat percentage correlation and MAE of every run and their
    medians over seeds.

    :param cfg: the training settings of the full model
    :type cfg: trainer.TrainConfig

    :param out: directory of the checkpoints and ``compare.json``
    :type out: str

    :param seeds: the training seeds
    :type seeds: list

    :param variant: the heads of the reduced model
    :type variant: tuple

    :return: the summary keyed by run name
    :rtype: dict
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    runs = {"+".join(cfg.heads): tuple(cfg.heads), "+".join(variant): tuple(variant)}
    if len(runs) == 1:
        raise ValueError(f"the variant {variant} equals the configured heads")
    summary = {}
    for name, heads in runs.items():
        pearsons, maes = [], []
        for seed in seeds:
            ckpt = os.path.join(out, name, f"seed_{seed}")
            logger.info("Training %s with seed %d...", name, seed)
            train_dataset(root, replace(cfg, heads=heads, seed=seed), ckpt)
            bfp = metrics.evaluate(ckpt, root)[0][metrics.ALL]["bfp"]
            pearsons.append(None if bfp is None else bfp["pearson"])
            maes.append(None if bfp is None else bfp["mae"])
        summary[name] = {"heads": list(heads), "seeds": list(seeds), "bfp_pearson": pearsons, "bfp_mae": maes,
                         "median_bfp_pearson": _median(pearsons), "median_bfp_mae": _median(maes)}
        logger.info("%s: median BFP r %s", name, summary[name]["median_bfp_pearson"])
    write_json(summary, os.path.join(out, COMPARE_FILE))
    return summary


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


### subcommands ###

def cmd_synth_bodies(args):
    ranges = config.load_config(args.ranges, procgen.BodyRanges)
    synth_bodies(args.out, args.count, args.seed, ranges, args.spacing_mm, args.jobs)


def cmd_extract_surface(args):
    v = volgrid.load_label_volume(args.volume)
    mesh = procgen.extract_surface(v, args.iso, args.smooth_lambda, args.smooth_iters)
    meshkit.save_obj(mesh, args.out)
    logger.info("Surface with %d vertices and %d triangles written to %s",
                len(mesh.vertices), len(mesh.triangles), args.out)


def cmd_tissue_volumes(args):
    write_json(volgrid.tissue_volumes(volgrid.load_label_volume(args.volume)), args.out)


def cmd_measure(args):
    mesh = meshkit.load_obj(args.mesh)
    chest, waist, hip = anthro.measure_circumferences(mesh, args.keypoints)
    write_json({"height_cm": anthro.measure_height(mesh), "chest_cm": chest,
                "waist_cm": waist, "hip_cm": hip}, args.out)


def cmd_simulate_scan(args):
    cfg = config.load_config(args.config, scansim.ScanConfig)
    seed = cfg.seed if args.seed is None else args.seed
    if args.data:
        scan_dataset(args.data, cfg, seed, args.jobs)
    else:
        if not args.out:
            raise ValueError("--out is required with --mesh or --cloud")
        scan = scan_file(args.mesh or args.cloud, args.out, cfg, seed)
        logger.info("Scan with %d points written to %s", len(scan), args.out)


def cmd_extract_real(args):
    volumes = [scansim.load_intensity_volume(path) for path in args.intensity]
    cloud = scansim.merge_clouds(scansim.extract_from_intensity(v, args.min_intensity) for v in volumes)
    meshkit.save_ply(cloud, args.out)
    logger.info("Extracted %d points to %s", len(cloud), args.out)


def cmd_train(args):
    cfg = config.load_config(args.config, trainer.TrainConfig)
    train_dataset(args.data, cfg, args.out)


def cmd_eval(args):
    evaluate_dataset(args.checkpoint, args.data, args.out, args.split)


def cmd_pipeline(args):
    ranges = config.load_config(args.ranges, procgen.BodyRanges)
    scan_cfg = config.load_config(args.scan, scansim.ScanConfig)
    train_cfg = config.load_config(args.train, trainer.TrainConfig)
    data = os.path.join(args.out, "data")
    ckpt = os.path.join(args.out, "ckpt")

    synth_bodies(data, args.count, args.seed, ranges, args.spacing_mm, args.jobs)
    scan_dataset(data, scan_cfg, args.seed, args.jobs)
    train_dataset(data, train_cfg, ckpt)
    evaluate_dataset(ckpt, data, os.path.join(args.out, metrics.REPORT_FILE))


def cmd_compare(args):
    cfg = config.load_config(args.config, trainer.TrainConfig)
    compare_heads(args.data, cfg, args.out, args.seeds, tuple(args.variant))


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _ints(text):
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser():
    parser = argparse.ArgumentParser(prog="bodycomp", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-bodies", help="generate procedural bodies with ground truth")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing-mm", type=float, default=procgen.DEFAULT_SPACING_MM)
    p.add_argument("--ranges", default="procgen.json")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_bodies)

    p = sub.add_parser("extract-surface", help="mesh the body surface of a label volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--iso", type=float, default=0.5)
    p.add_argument("--smooth-lambda", type=float, default=meshkit.SMOOTH_LAMBDA)
    p.add_argument("--smooth-iters", type=int, default=meshkit.SMOOTH_ITERS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_surface)

    p = sub.add_parser("tissue-volumes", help="tissue volumes of a label volume in liters")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tissue_volumes)

    p = sub.add_parser("measure", help="height and circumferences of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--keypoints", type=_floats, default=anthro.KEYPOINTS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("simulate-scan", help="simulate millimeter wave scans")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--mesh")
    source.add_argument("--cloud")
    source.add_argument("--data", help="scan every mesh of a dataset directory")
    p.add_argument("--config", default="scan.json")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate_scan)

    p = sub.add_parser("extract-real", help="extract a cloud from scanner intensity volumes")
    p.add_argument("--intensity", nargs="+", required=True)
    p.add_argument("--min-intensity", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_real)

    p = sub.add_parser("train", help="train the multi-headed network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default="train.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=dataset.SPLITS, default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="synthesize, scan, train and evaluate")
    p.add_argument("--ranges", default="procgen.json")
    p.add_argument("--scan", default="scan.json")
    p.add_argument("--train", default="train.json")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing-mm", type=float, default=procgen.DEFAULT_SPACING_MM)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare", help="train all heads and a head subset over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default="train.json")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--variant", nargs="+", choices=HEAD_ORDER, default=["BC"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    """
    Parses the command line and runs one subcommand.

    :return: the exit status
    :rtype: int
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        args.func(args)
    except BodyCompError as e:
        error = e.to_json()
    except (OSError, ValueError) as e:
        error = {"error": "io_error" if isinstance(e, OSError) else "invalid_input", "message": str(e)}
    else:
        return 0
    error["command"] = args.command
    print(json.dumps(error, sort_keys=True), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
