#!/usr/bin/env python3
"""
Command-line entry point for conditioned descriptor matching.

Commands:
  gen-data         synthetic homography pairs or two-view scenes
  train            train the network on a homography dataset
  match            match two images with a trained checkpoint
  eval-homography  correct-match curve of a match file under a homography
  eval-pose        relative pose accuracy over a directory of match files
  invariance       descriptor L1 distance over ground-truth correspondences
"""

import argparse
import glob
import logging
import math
import os
import sys
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from coam_net import CoAMNet
from config import ConfigError, RunConfig, load_run_config, save_run_config
from geometry import (
    CheiralityError, DegenerateConfigurationError, estimate_relative_pose, evaluate_homography_matches, pose_accuracy,
    pose_errors, read_homography_file, read_pose_file, write_curve_file,
)
from matcher import descriptor_invariance, match_pair, read_match_file, write_match_file
from reporting import print_table, save_report
from synthdata import (
    HomographyPairSpec, TwoViewSceneSpec, homography_correspondences, load_image, read_manifest,
    write_homography_dataset, write_two_view_dataset,
)
from training import Trainer, TrainingSample
from visualize import save_attention_map, save_match_overlay

logger = logging.getLogger(__name__)

# === Constants ===
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DEFAULT_THRESHOLDS = "1,2,3,4,5,6,7,8,9,10"
DEFAULT_TRAIN_STEPS = 200
DEFAULT_INVARIANCE_POINTS = 500
FAILED_POSE_ERROR = 180.0  # recorded for pairs where no pose could be estimated

# argparse destination -> run config key
OVERRIDE_FLAGS = {
    "seed": "seed",
    "output_dir": "paths.output_dir",
    "grid": "grid_size",
    "topk": "top_k",
    "refine": "refine",
    "use_distinctiveness": "use_distinctiveness",
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "loss": "train.loss_kind",
    "log_wall_clock": "train.log_wall_clock",
    "coam_enabled": "network.coam_enabled",
}


def setup_logging(level: str, log_path: str):
    parent = os.path.dirname(log_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level),
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(log_path),
        ],
        force=True,
    )


def parse_thresholds(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"thresholds must be comma-separated numbers, got {text!r}") from None


def parse_point(text: str) -> Tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"query point must be 'x,y', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ValueError(f"query point must be 'x,y', got {text!r}") from None


def load_image_pair(path1: str, path2: str) -> Tuple[np.ndarray, np.ndarray]:
    image1, image2 = load_image(path1), load_image(path2)
    if image1.shape != image2.shape:
        raise ValueError(f"image sizes differ: {path1} is {image1.shape[:2]}, {path2} is {image2.shape[:2]}")
    return image1, image2


def load_training_samples(data_dir: str) -> List[TrainingSample]:
    """Homography dataset -> supervised samples with dense ground-truth maps."""
    manifest_path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}; run gen-data first")
    manifest = read_manifest(manifest_path)
    samples = []
    for name in manifest["pair_id"]:
        image1, image2 = load_image_pair(os.path.join(data_dir, f"{name}_1.png"),
                                         os.path.join(data_dir, f"{name}_2.png"))
        H = read_homography_file(os.path.join(data_dir, f"{name}.H"))
        gt_map, valid = homography_correspondences(H, image1.shape[0])
        samples.append(TrainingSample(image1=image1, image2=image2, gt_map=gt_map, valid=valid))
    logger.info(f"Loaded {len(samples)} training pairs from {data_dir}")
    return samples


def _prepare_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# === Commands ===
def cmd_gen_data(args, cfg: RunConfig) -> int:
    out_dir = args.out or cfg.paths.data_dir
    if args.kind == "homography":
        spec = HomographyPairSpec(image_size=cfg.network.image_size)
        manifest = write_homography_dataset(out_dir, args.count, cfg.seed, spec)
    else:
        spec = TwoViewSceneSpec(pixel_noise=args.pixel_noise, outlier_fraction=args.outlier_fraction)
        manifest = write_two_view_dataset(out_dir, args.count, cfg.seed, spec)
    print(f"Wrote {len(manifest)} {args.kind} pairs to {out_dir} (spec {spec.spec_hash()})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg.paths.data_dir
    out_dir = args.out or cfg.paths.output_dir
    samples = load_training_samples(data_dir)
    os.makedirs(out_dir, exist_ok=True)
    save_run_config(cfg, os.path.join(out_dir, "run.yaml"))

    net = CoAMNet(cfg.network)
    trainer = Trainer(net, cfg.train)
    logger.info(f"Training {net.parameter_count()} parameters for {args.steps} steps on {len(samples)} pairs")
    loss_log = os.path.join(out_dir, "loss.log")
    # each run starts a fresh curve; fit appends to it
    open(loss_log, "w").close()
    history = trainer.fit(samples, args.steps, log_path=loss_log)
    checkpoint = trainer.save_checkpoint(os.path.join(out_dir, "coam.ckpt"))

    if history:
        print(f"first step: {history[0].log_line()}")
        print(f"last step:  {history[-1].log_line()}")
    print(f"Checkpoint saved to {checkpoint}")
    return 0


def cmd_match(args, cfg: RunConfig) -> int:
    net = CoAMNet.load(args.ckpt, cfg.network)
    image1, image2 = load_image_pair(args.img1, args.img2)
    description = net.describe_pair(image1, image2)
    matches = match_pair(
        description.D1.D, description.r1.r, description.D2.D, description.r2.r,
        grid_size=cfg.grid_size, k=cfg.top_k, refine=cfg.refine, use_distinctiveness=cfg.use_distinctiveness,
    )
    _prepare_parent(args.out)
    write_match_file(args.out, matches, cfg.grid_size, cfg.top_k)
    print(f"Wrote {len(matches)} matches to {args.out}")

    if args.viz:
        stem = os.path.splitext(args.out)[0]
        save_match_overlay(f"{stem}_matches.png", image1, image2, matches)
        if description.attention1:
            height, width = image1.shape[:2]
            point = parse_point(args.query_point) if args.query_point else ((width - 1) / 2, (height - 1) / 2)
            scale = "fine" if "fine" in description.attention1 else "coarse"
            A = description.attention1[scale].A
            side = int(round(math.sqrt(A.shape[1])))
            save_attention_map(f"{stem}_attention.png", image1, image2, A, point, (side, side))
        else:
            logger.warning("Network has co-attention disabled; no attention map written")
    return 0


def cmd_eval_homography(args, cfg: RunConfig) -> int:
    matches, header = read_match_file(args.matches)
    H = read_homography_file(args.H)
    curve = evaluate_homography_matches(matches, H, parse_thresholds(args.thresholds))
    print_table(f"Correct matches under the ground-truth homography ({args.matches}, G={header['G']}, "
                f"K={header['K']})", curve)

    curve_path = args.curve or f"{os.path.splitext(args.matches)[0]}.curve"
    _prepare_parent(curve_path)
    write_curve_file(curve_path, curve)
    logger.info(f"Wrote curve to {curve_path}")
    if args.xlsx:
        save_report({"curve": curve}, args.xlsx)
    return 0


def cmd_eval_pose(args, cfg: RunConfig) -> int:
    match_files = sorted(glob.glob(os.path.join(args.matches_dir, "*.matches")))
    if not match_files:
        raise FileNotFoundError(f"no .matches files in {args.matches_dir}")
    pair_ids = [os.path.splitext(os.path.basename(path))[0] for path in match_files]
    missing = [pid for pid in pair_ids if not os.path.exists(os.path.join(args.gt_dir, f"{pid}.pose"))]
    if missing:
        raise FileNotFoundError(f"missing ground truth in {args.gt_dir} for pair(s): {', '.join(missing)}")

    rows: List[Dict[str, Any]] = []
    for pid, path in zip(pair_ids, match_files):
        matches, _ = read_match_file(path)
        intrinsics, gt_pose = read_pose_file(os.path.join(args.gt_dir, f"{pid}.pose"))
        try:
            pose, estimate = estimate_relative_pose(matches.p1, matches.p2, intrinsics, cfg.ransac)
            rotation_error, translation_error = pose_errors(pose, gt_pose)
            inliers = estimate.inlier_count
        except (DegenerateConfigurationError, CheiralityError) as e:
            logger.warning(f"{pid}: pose estimation failed: {e}")
            rotation_error = translation_error = FAILED_POSE_ERROR
            inliers = 0
        rows.append({
            "pair_id": pid,
            "matches": len(matches),
            "inliers": inliers,
            "rotation_error": rotation_error,
            "translation_error": translation_error,
            "joint_correct": bool(rotation_error <= args.threshold and translation_error <= args.threshold),
        })

    table = pd.DataFrame(rows)
    summary = pose_accuracy(table, args.threshold)
    print_table("Relative pose errors (degrees)", table)
    print_table("Pose accuracy", summary)
    accuracy = summary.iloc[0]
    print(f"\nAccuracy @ {args.threshold:g} deg (rot / trans): "
          f"{100 * accuracy['rotation']:.1f} / {100 * accuracy['translation']:.1f}")
    if args.xlsx:
        save_report({"pairs": table, "summary": summary}, args.xlsx)
    return 0


def cmd_invariance(args, cfg: RunConfig) -> int:
    net = CoAMNet.load(args.ckpt, cfg.network)
    image1, image2 = load_image_pair(args.img1, args.img2)
    H = read_homography_file(args.H)
    description = net.describe_pair(image1, image2)

    gt_map, valid = homography_correspondences(H, image1.shape[0])
    ys, xs = np.nonzero(valid)
    rng = np.random.default_rng(cfg.seed)
    pick = rng.choice(len(xs), size=min(args.points, len(xs)), replace=False)
    points1 = np.column_stack([xs[pick], ys[pick]]).astype(np.float64)
    points2 = gt_map[ys[pick], xs[pick]]
    stats = descriptor_invariance(description.D1.D, description.D2.D, points1, points2)
    print(f"Descriptor invariance over {stats.count} correspondences: mean L1 {stats.mean:.4f} +- {stats.std:.4f}")
    if args.xlsx:
        save_report({"invariance": pd.DataFrame([vars(stats)])}, args.xlsx)
    return 0


# === Parser ===
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Conditioned descriptor matching: data generation, training, matching and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python coam.py gen-data --kind homography --count 200 --out data/train
  python coam.py --config toy.yaml train --data data/train --steps 2000 --out runs/toy
  python coam.py match --ckpt runs/toy/coam.ckpt --img1 a.png --img2 b.png --topk 500 --refine --out ab.matches --viz
  python coam.py eval-homography --matches ab.matches --H data/test/pair_0000.H --thresholds 1,2,3,5,10
  python coam.py eval-pose --matches-dir data/scenes --gt-dir data/scenes --threshold 10
        """
    )
    parser.add_argument("--config", help="YAML run configuration file")
    parser.add_argument("--seed", type=int, help="Global seed (default: COAM_SEED or 0)")
    parser.add_argument("--log-level", default="INFO", choices=LOG_LEVELS, help="Logging verbosity (default: INFO)")
    parser.add_argument("--output-dir", help="Directory for coam.log and default outputs")
    parser.add_argument("--xlsx", help="Also write an Excel report to this path (evaluation commands)")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a synthetic dataset")
    gen.add_argument("--kind", choices=["homography", "twoview"], default="homography")
    gen.add_argument("--count", type=int, default=10)
    gen.add_argument("--out", help="Output directory (default: paths.data_dir)")
    gen.add_argument("--pixel-noise", type=float, default=0.0, help="Two-view only: pixel noise sigma")
    gen.add_argument("--outlier-fraction", type=float, default=0.0, help="Two-view only: fraction of outliers")
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="Train on a homography dataset")
    train.add_argument("--data", help="Dataset directory (default: paths.data_dir)")
    train.add_argument("--steps", type=int, default=DEFAULT_TRAIN_STEPS)
    train.add_argument("--out", help="Run directory for coam.ckpt, loss.log and run.yaml (default: paths.output_dir)")
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--loss", choices=["hinge", "infonce"])
    train.add_argument("--no-coam", dest="coam_enabled", action="store_false", default=None,
                       help="Zero the attended features (ablation)")
    train.add_argument("--no-wall-clock", dest="log_wall_clock", action="store_false", default=None,
                       help="Write 0.000 seconds in the loss log so reruns are byte-identical")
    train.set_defaults(handler=cmd_train)

    match = commands.add_parser("match", help="Match two images")
    match.add_argument("--ckpt", required=True)
    match.add_argument("--img1", required=True)
    match.add_argument("--img2", required=True)
    match.add_argument("--grid", type=int, help="Grid size G (default: 128)")
    match.add_argument("--topk", type=int, help="Keep the K best matches (default: 2000)")
    match.add_argument("--refine", action="store_true", default=None, help="Subpixel refinement of p2")
    match.add_argument("--no-distinctiveness", dest="use_distinctiveness", action="store_false", default=None,
                       help="Score with the descriptor dot product only")
    match.add_argument("--no-coam", dest="coam_enabled", action="store_false", default=None)
    match.add_argument("--out", required=True, help="Match file to write")
    match.add_argument("--viz", action="store_true", help="Also write <out>_matches.png and <out>_attention.png")
    match.add_argument("--query-point", help="Attention query pixel 'x,y' in image 1 (default: center)")
    match.set_defaults(handler=cmd_match)

    hom = commands.add_parser("eval-homography", help="Correct-match curve under a homography")
    hom.add_argument("--matches", required=True)
    hom.add_argument("--H", required=True, help="3x3 homography file mapping image 1 to image 2")
    hom.add_argument("--thresholds", default=DEFAULT_THRESHOLDS, help="Ascending pixel thresholds 'a,b,c'")
    hom.add_argument("--curve", help="Curve file to write (default: <matches>.curve)")
    hom.set_defaults(handler=cmd_eval_homography)

    pose = commands.add_parser("eval-pose", help="Relative pose accuracy")
    pose.add_argument("--matches-dir", required=True)
    pose.add_argument("--gt-dir", required=True)
    pose.add_argument("--threshold", type=float, default=10.0, help="Angular threshold in degrees (default: 10)")
    pose.set_defaults(handler=cmd_eval_pose)

    inv = commands.add_parser("invariance", help="Descriptor invariance over ground-truth correspondences")
    inv.add_argument("--ckpt", required=True)
    inv.add_argument("--img1", required=True)
    inv.add_argument("--img2", required=True)
    inv.add_argument("--H", required=True)
    inv.add_argument("--points", type=int, default=DEFAULT_INVARIANCE_POINTS)
    inv.add_argument("--no-coam", dest="coam_enabled", action="store_false", default=None)
    inv.set_defaults(handler=cmd_invariance)
    return parser


def command_overrides(args) -> Dict[str, Any]:
    return {key: getattr(args, dest) for dest, key in OVERRIDE_FLAGS.items() if getattr(args, dest, None) is not None}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, command_overrides(args))
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1

    try:
        setup_logging(args.log_level, cfg.paths.log_path)
    except OSError as e:
        print(f"Error: cannot open log file {cfg.paths.log_path}: {e}", file=sys.stderr)
        return 1

    logger.debug(f"Running {args.command} with seed {cfg.seed}")
    try:
        return args.handler(args, cfg)
    except KeyboardInterrupt:
        logger.error("Interrupted by user")
        return 130
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
