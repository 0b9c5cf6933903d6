#!/usr/bin/env python3
"""
Desk-scale acceptance checks. These train small networks and take minutes,
so they live here rather than in the unit tests.

  learning       toy network reaches >= 90% correct at 3 px on held-out homography pairs
  conditioning   conditioned descriptors are more invariant than the no-CoAM ablation
  pose           essential matrix pipeline on noiseless and noisy synthetic scenes
  refinement     subpixel refinement lowers the localization error
  determinism    repeated command runs give byte-identical files

Usage: python verify_desk_scale.py [--only pose,refinement] [--steps 2000]
"""

import argparse
import logging
import os
import sys
import tempfile
import time

import numpy as np

import coam
from coam_net import CoAMNet, NetworkConfig
from geometry import (
    decompose_essential, estimate_essential_ransac, estimate_relative_pose, evaluate_homography_matches,
    pixels_to_normalized, pose_accuracy, pose_errors,
)
from matcher import bilinear_sample, descriptor_invariance, match_pair
from synthdata import (
    HomographyPairSpec, TwoViewSceneSpec, generate_homography_pair, generate_texture, generate_two_view_scene,
)
from training import TrainConfig, Trainer, TrainingSample

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler(sys.stderr)]
)
logger = logging.getLogger(__name__)

TOY_NETWORK = dict(image_size=64, descriptor_dim=16, encoder_widths=(8, 16, 32, 32), projection_dims=(16, 16),
                   dtype="float32")
TOY_TRAINING = dict(batch_size=2, learning_rate=1e-4, positives_per_pair=128, negatives_per_positive=128,
                    log_wall_clock=False)
TRAIN_PAIRS = 200
HELD_OUT_PAIRS = 20
HELD_OUT_SEED_OFFSET = 1_000_000
CHECKS = ["learning", "conditioning", "pose", "refinement", "determinism"]


def _samples(spec, count, seed_offset=0):
    samples = []
    for i in range(count):
        pair = generate_homography_pair(spec, seed_offset + i)
        samples.append(TrainingSample(pair.image1, pair.image2, pair.correspondences, pair.mask))
    return samples


def _train(steps, coam_enabled=True, seed=0):
    net = CoAMNet(NetworkConfig(coam_enabled=coam_enabled, seed=seed, **TOY_NETWORK))
    trainer = Trainer(net, TrainConfig(seed=seed, **TOY_TRAINING))
    start = time.time()
    trainer.fit(_samples(HomographyPairSpec(), TRAIN_PAIRS), steps, log_every=100)
    logger.info(f"Trained ({'CoAM' if coam_enabled else 'no CoAM'}) for {steps} steps in {time.time() - start:.0f}s")
    return net


def check_learning(steps):
    net = _train(steps)
    fractions = []
    for i in range(HELD_OUT_PAIRS):
        pair = generate_homography_pair(HomographyPairSpec(), HELD_OUT_SEED_OFFSET + i)
        out = net.describe_pair(pair.image1, pair.image2)
        matches = match_pair(out.D1.D, out.r1.r, out.D2.D, out.r2.r, grid_size=64, k=500)
        curve = evaluate_homography_matches(matches, pair.homography, [3])
        fractions.append(curve["fraction"].iloc[0])
    mean = float(np.mean(fractions))
    print(f"  mean fraction correct at 3 px over {HELD_OUT_PAIRS} held-out pairs: {mean:.3f}")
    return mean >= 0.9


def check_conditioning(steps):
    strong = HomographyPairSpec(brightness_offset=0.3, contrast_min=0.5, contrast_max=1.5, tint=0.3)
    means = {}
    for enabled in (True, False):
        net = _train(steps, coam_enabled=enabled)
        values = []
        for i in range(HELD_OUT_PAIRS):
            pair = generate_homography_pair(strong, HELD_OUT_SEED_OFFSET + i)
            out = net.describe_pair(pair.image1, pair.image2)
            ys, xs = np.nonzero(pair.mask)
            points1 = np.column_stack([xs, ys]).astype(np.float64)
            points2 = pair.correspondences[ys, xs]
            values.append(descriptor_invariance(out.D1.D, out.D2.D, points1, points2).mean)
        means[enabled] = float(np.mean(values))
    print(f"  mean L1 with CoAM {means[True]:.4f}, without {means[False]:.4f}")
    return means[True] < means[False]


def check_pose():
    noiseless = TwoViewSceneSpec()
    worst_rot = worst_trans = 0.0
    for seed in range(50):
        scene = generate_two_view_scene(noiseless, seed)
        x1 = pixels_to_normalized(scene.points1, scene.intrinsics)
        x2 = pixels_to_normalized(scene.points2, scene.intrinsics)
        estimate = estimate_essential_ransac(x1, x2)
        pose = decompose_essential(estimate.E, x1[estimate.inliers], x2[estimate.inliers])
        rot, trans = pose_errors(pose, scene.pose)
        worst_rot, worst_trans = max(worst_rot, rot), max(worst_trans, trans)
    print(f"  noiseless: worst rotation error {worst_rot:.2e} deg, worst translation error {worst_trans:.2e} deg")

    noisy = TwoViewSceneSpec(outlier_fraction=0.25, pixel_noise=0.5)
    errors = []
    for seed in range(50):
        scene = generate_two_view_scene(noisy, seed)
        pose, _ = estimate_relative_pose(scene.points1, scene.points2, scene.intrinsics)
        errors.append(pose_errors(pose, scene.pose))
    joint = pose_accuracy(errors, 10.0)["joint"].iloc[0]
    print(f"  25% outliers, 0.5 px noise: accuracy at 10 deg {joint:.2f}")
    return worst_rot < 0.1 and worst_trans < 0.5 and joint >= 0.95


def check_refinement(pairs=10, size=64, channels=16):
    """Descriptor fields shifted by a known subpixel offset; compare matched p2 against p1 + offset."""
    coarse, refined = [], []
    rng = np.random.default_rng(0)
    for i in range(pairs):
        field = generate_texture(i, 2 * size, channels=channels) - 0.5
        offset = rng.uniform(0.2, 0.8, size=2)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        pad = size // 2
        D1 = bilinear_sample(field, xs + pad, ys + pad)
        D2 = bilinear_sample(field, xs + pad - offset[0], ys + pad - offset[1])
        D1 /= np.linalg.norm(D1, axis=-1, keepdims=True)
        D2 /= np.linalg.norm(D2, axis=-1, keepdims=True)
        ones = np.ones((size, size))
        for refine, bucket in ((False, coarse), (True, refined)):
            matches = match_pair(D1, ones, D2, ones, grid_size=size // 2, k=200, refine=refine)
            bucket.extend(np.linalg.norm(matches.p2 - (matches.p1 + offset), axis=1))
    print(f"  mean localization error: unrefined {np.mean(coarse):.3f} px, refined {np.mean(refined):.3f} px")
    return np.mean(refined) < np.mean(coarse)


def check_determinism(steps=5):
    def run_all_commands(root):
        config = os.path.join(root, "toy.yaml")
        with open(config, "w") as f:
            f.write("network:\n  image_size: 32\n  descriptor_dim: 8\n  encoder_widths: [4, 4, 4, 4]\n"
                    "  projection_dims: [4, 4]\ntrain:\n  batch_size: 2\n  positives_per_pair: 16\n"
                    "  negatives_per_positive: 16\n  log_wall_clock: false\n")
        base = ["--config", config, "--seed", "11", "--output-dir", os.path.join(root, "logs")]
        data, scenes = os.path.join(root, "data"), os.path.join(root, "scenes")
        commands = [
            ["gen-data", "--count", "2", "--out", data],
            ["gen-data", "--kind", "twoview", "--count", "2", "--out", scenes],
            ["train", "--data", data, "--steps", str(steps), "--out", os.path.join(root, "run")],
            ["match", "--ckpt", os.path.join(root, "run", "coam.ckpt"), "--img1", os.path.join(data, "pair_0000_1.png"),
             "--img2", os.path.join(data, "pair_0000_2.png"), "--grid", "16", "--topk", "50", "--refine",
             "--out", os.path.join(root, "pair.matches")],
            ["eval-homography", "--matches", os.path.join(root, "pair.matches"), "--H", os.path.join(data, "pair_0000.H")],
            ["eval-pose", "--matches-dir", scenes, "--gt-dir", scenes],
        ]
        for command in commands:
            if coam.main(base + command) != 0:
                raise RuntimeError(f"command failed: {' '.join(command)}")

    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        run_all_commands(first)
        run_all_commands(second)
        compared = 0
        for dirpath, _, filenames in os.walk(first):
            if os.path.basename(dirpath) == "logs":
                continue
            for name in filenames:
                if name == "toy.yaml":
                    continue
                path = os.path.join(dirpath, name)
                other = os.path.join(second, os.path.relpath(path, first))
                with open(path, "rb") as f, open(other, "rb") as g:
                    a, b = f.read(), g.read()
                if name == "run.yaml":
                    # holds the run's own absolute paths
                    a, b = a.replace(first.encode(), b""), b.replace(second.encode(), b"")
                if a != b:
                    print(f"  {os.path.relpath(path, first)} differs")
                    return False
                compared += 1
    print(f"  {compared} output files byte-identical across two runs")
    return True


def main():
    parser = argparse.ArgumentParser(description="Desk-scale acceptance checks")
    parser.add_argument("--only", help=f"Comma-separated subset of {','.join(CHECKS)}")
    parser.add_argument("--steps", type=int, default=2000, help="Training steps for learning/conditioning")
    args = parser.parse_args()
    selected = args.only.split(",") if args.only else CHECKS

    runners = {
        "learning": lambda: check_learning(args.steps),
        "conditioning": lambda: check_conditioning(args.steps),
        "pose": check_pose,
        "refinement": check_refinement,
        "determinism": check_determinism,
    }
    results = {}
    for name in selected:
        if name not in runners:
            print(f"Unknown check '{name}'; choose from {CHECKS}")
            sys.exit(1)
        print("=" * 80)
        print(f"{name.upper()}")
        print("=" * 80)
        start = time.time()
        results[name] = bool(runners[name]())
        print(f"  {'✓' if results[name] else '✗'} {name} ({time.time() - start:.0f}s)")

    print("\n" + "=" * 80)
    for name, passed in results.items():
        print(f"{name:<15} {'PASS' if passed else 'FAIL'}")
    if not all(results.values()):
        sys.exit(1)


if __name__ == "__main__":
    main()
