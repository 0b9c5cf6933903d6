#!/usr/bin/env python3
"""
Tests for the synthetic texture, homography pair and two-view scene
generators and the dataset writers.
"""

import os
import sys
import tempfile

import numpy as np

from geometry import Homography, essential_from_pose, pixels_to_normalized, read_homography_file, read_pose_file
from matcher import bilinear_sample, read_match_file
from synthdata import (
    DegenerateWarpError, HomographyPairSpec, TwoViewSceneSpec, generate_homography_pair, generate_texture,
    generate_two_view_scene, load_image, read_manifest, save_image, write_homography_dataset,
    write_two_view_dataset,
)
from test_diffcore import run_all


def test_texture_determinism_and_range():
    """Same seed, same texture; different seeds differ; values stay in [0, 1]."""
    a = generate_texture(1, 64)
    np.testing.assert_array_equal(a, generate_texture(1, 64))
    assert np.abs(a - generate_texture(2, 64)).mean() > 0.01
    assert a.min() >= 0.0 and a.max() <= 1.0 and a.shape == (64, 64, 3)
    try:
        generate_texture(0, 8)
        raise AssertionError("8 px texture accepted")
    except ValueError:
        pass
    print("✓ texture determinism and range")


def test_identity_pair():
    """No warp and no jitter: identical images and a full mask."""
    pair = generate_homography_pair(HomographyPairSpec.identity(), seed=3)
    np.testing.assert_array_equal(pair.image1, pair.image2)
    assert pair.mask.all()
    print("✓ identity pair")


def test_translation_mask():
    """A +10 px x-translation masks out the rightmost 10 columns."""
    pair = generate_homography_pair(HomographyPairSpec.identity(), seed=4, homography=Homography.translation(10, 0))
    assert pair.mask[:, :54].all()
    assert not pair.mask[:, 54:].any()
    np.testing.assert_array_equal(pair.image2[:, 10:], pair.image1[:, :54])
    print("✓ translation mask")


def test_warp_consistency():
    """I2 at H(p) matches the photometric transform of I1 at p; the map equals H applied directly."""
    spec = HomographyPairSpec(noise_sigma=0.0)
    for seed in range(3):
        pair = generate_homography_pair(spec, seed)
        ys, xs = np.nonzero(pair.mask)
        pick = np.random.default_rng(seed).choice(len(xs), size=100, replace=False)
        points = np.column_stack([xs[pick], ys[pick]]).astype(np.float64)
        mapped = pair.homography.apply(points)
        np.testing.assert_array_equal(pair.correspondences[ys[pick], xs[pick]], mapped)

        sampled = bilinear_sample(pair.image2, mapped[:, 0], mapped[:, 1])
        expected = pair.photometric.apply_noiseless(pair.image1[ys[pick], xs[pick]])
        assert np.abs(sampled - expected).max() < 0.05
    print("✓ warp consistency")


def test_photometric_jitter_keeps_geometry():
    """Changing only the photometric ranges leaves H and the correspondence map unchanged."""
    calm = generate_homography_pair(HomographyPairSpec(brightness_offset=0.0, tint=0.0), seed=5)
    loud = generate_homography_pair(HomographyPairSpec(brightness_offset=0.3, tint=0.3), seed=5)
    np.testing.assert_array_equal(calm.homography.matrix, loud.homography.matrix)
    np.testing.assert_array_equal(calm.correspondences, loud.correspondences)
    assert not np.array_equal(calm.image2, loud.image2)
    print("✓ photometric jitter keeps geometry")


def test_degenerate_warp():
    """Warps that pull from outside the padded canvas are rejected."""
    try:
        generate_homography_pair(HomographyPairSpec.identity(), seed=0, homography=Homography.translation(100, 0))
        raise AssertionError("out-of-canvas warp accepted")
    except DegenerateWarpError:
        pass
    print("✓ degenerate warp rejected")


def test_two_view_scene_epipolar_consistency():
    """Noiseless scenes satisfy x2^T E x1 = 0; points lie inside both images."""
    spec = TwoViewSceneSpec()
    scene = generate_two_view_scene(spec, seed=1)
    E = essential_from_pose(scene.pose)
    x1 = pixels_to_normalized(scene.points1, scene.intrinsics)
    x2 = pixels_to_normalized(scene.points2, scene.intrinsics)
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    residual = np.einsum("ni,ij,nj->n", h2, E, h1)
    assert np.abs(residual).max() < 1e-10
    for points in (scene.points1, scene.points2):
        assert points[:, 0].min() >= 0 and points[:, 0].max() <= spec.width - 1
        assert points[:, 1].min() >= 0 and points[:, 1].max() <= spec.height - 1
    print("✓ two-view epipolar consistency")


def test_two_view_outliers_and_determinism():
    """A 0.25 outlier fraction on 100 points flags exactly 25; seeds reproduce scenes."""
    spec = TwoViewSceneSpec(outlier_fraction=0.25, pixel_noise=0.5)
    scene = generate_two_view_scene(spec, seed=2)
    assert scene.outlier_mask.sum() == 25
    again = generate_two_view_scene(spec, seed=2)
    np.testing.assert_array_equal(scene.points1, again.points1)
    np.testing.assert_array_equal(scene.points2, again.points2)
    np.testing.assert_array_equal(scene.pose.R, again.pose.R)
    print("✓ two-view outliers and determinism")


def test_image_round_trip():
    """PNG save/load keeps 8-bit quantized values."""
    image = generate_texture(3, 32)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_image(os.path.join(tmp, "texture.png"), image)
        loaded = load_image(path)
    assert loaded.shape == image.shape
    assert np.abs(loaded - image).max() <= 0.5 / 255 + 1e-12
    print("✓ image round trip")


def test_homography_dataset():
    """Manifest lines, per-pair files, and byte-identical manifests for the same seed."""
    with tempfile.TemporaryDirectory() as tmp:
        first, second = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        spec = HomographyPairSpec(image_size=32)
        write_homography_dataset(first, count=3, seed=7, spec=spec)
        write_homography_dataset(second, count=3, seed=7, spec=spec)
        manifest = read_manifest(os.path.join(first, "manifest.txt"))
        assert list(manifest["pair_id"]) == ["pair_0000", "pair_0001", "pair_0002"]
        assert set(manifest["spec_hash"]) == {spec.spec_hash()}
        for name in manifest["pair_id"]:
            for suffix in ("_1.png", "_2.png", ".H"):
                assert os.path.exists(os.path.join(first, name + suffix))
            read_homography_file(os.path.join(first, f"{name}.H"))
        for name in ("manifest.txt", "pair_0001_2.png", "pair_0002.H"):
            with open(os.path.join(first, name), "rb") as f, open(os.path.join(second, name), "rb") as g:
                assert f.read() == g.read(), f"{name} differs between identical runs"
    print("✓ homography dataset")


def test_two_view_dataset():
    """Every scene gets a readable pose file and match file."""
    with tempfile.TemporaryDirectory() as tmp:
        manifest = write_two_view_dataset(tmp, count=2, seed=1, spec=TwoViewSceneSpec(point_count=30))
        assert len(manifest) == 2
        for name in manifest["pair_id"]:
            intrinsics, _ = read_pose_file(os.path.join(tmp, f"{name}.pose"))
            assert intrinsics.fx == 500.0
            matches, header = read_match_file(os.path.join(tmp, f"{name}.matches"))
            assert len(matches) == 30 and header["K"] == 30
    print("✓ two-view dataset")


if __name__ == "__main__":
    print("Testing synthdata...")
    failed = run_all(dict(globals()))
    if failed:
        print(f"\n✗ {failed} test(s) failed.")
        sys.exit(1)
    print("\n✓ All synthdata tests passed!")
