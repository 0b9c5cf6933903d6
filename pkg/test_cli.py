#!/usr/bin/env python3
"""
End-to-end tests of the coam.py commands, run as subprocesses on a toy
configuration.
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

import numpy as np
from PIL import Image

from coam_net import CoAMNet
from config import load_run_config
from diffcore import load_tensors
from geometry import Homography, read_curve_file, write_homography_file
from matcher import CorrespondenceSet, read_match_file, write_match_file
from synthdata import read_manifest
from test_diffcore import run_all

REPO_DIR = os.path.dirname(os.path.abspath(__file__))
SCRIPT = os.path.join(REPO_DIR, "coam.py")
TOY_CONFIG = """\
seed: 0
network:
  image_size: 32
  descriptor_dim: 8
  encoder_widths: [4, 4, 4, 4]
  projection_dims: [4, 4]
train:
  batch_size: 2
  positives_per_pair: 16
  negatives_per_positive: 16
  hardest_count: 3
  learning_rate: 0.001
  log_wall_clock: false
"""


def _run(tmp, *args):
    env = {k: v for k, v in os.environ.items() if k != "COAM_SEED"}
    return subprocess.run([sys.executable, SCRIPT, "--output-dir", os.path.join(tmp, "logs"), *args],
                          cwd=tmp, env=env, capture_output=True, text=True, timeout=600)


def _ok(result):
    assert result.returncode == 0, f"exit {result.returncode}\nstdout:\n{result.stdout}\nstderr:\n{result.stderr}"
    return result


def _toy_config(tmp):
    path = os.path.join(tmp, "toy.yaml")
    with open(path, "w") as f:
        f.write(TOY_CONFIG)
    return path


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def test_gen_data():
    """Manifest per pair, byte-identical reruns, pose files for two-view scenes."""
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        for name in ("a", "b"):
            _ok(_run(tmp, "--config", config, "--seed", "3", "gen-data", "--count", "3", "--out", name))
        assert len(read_manifest(os.path.join(tmp, "a", "manifest.txt"))) == 3
        for name in ("manifest.txt", "pair_0002_1.png", "pair_0002.H"):
            assert _read(os.path.join(tmp, "a", name)) == _read(os.path.join(tmp, "b", name))
        assert os.path.exists(os.path.join(tmp, "logs", "coam.log"))

        _ok(_run(tmp, "gen-data", "--kind", "twoview", "--count", "2", "--out", "scenes"))
        for pid in ("pair_0000", "pair_0001"):
            assert os.path.exists(os.path.join(tmp, "scenes", f"{pid}.pose"))
    print("✓ gen-data")


def test_train_and_match():
    """Zero-step checkpoints equal initialization; reruns are identical; match respects K and refinement."""
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        _ok(_run(tmp, "--config", config, "gen-data", "--count", "2", "--out", "data"))

        _ok(_run(tmp, "--config", config, "train", "--data", "data", "--steps", "0", "--out", "init"))
        cfg = load_run_config(config)
        initial = CoAMNet(cfg.network).state_dict()
        saved = load_tensors(os.path.join(tmp, "init", "coam.ckpt"))
        for name, value in initial.items():
            np.testing.assert_array_equal(saved[name], value.astype(np.float32))
        assert os.path.exists(os.path.join(tmp, "init", "run.yaml"))

        for run in ("r1", "r2"):
            _ok(_run(tmp, "--config", config, "train", "--data", "data", "--steps", "3", "--out", run))
        log1 = _read(os.path.join(tmp, "r1", "loss.log"))
        assert log1 == _read(os.path.join(tmp, "r2", "loss.log"))
        assert len(log1.decode().splitlines()) == 3
        assert _read(os.path.join(tmp, "r1", "coam.ckpt")) == _read(os.path.join(tmp, "r2", "coam.ckpt"))
        _ok(_run(tmp, "--config", config, "train", "--data", "data", "--steps", "3", "--out", "r2"))
        assert _read(os.path.join(tmp, "r2", "loss.log")) == log1

        ckpt = os.path.join("r1", "coam.ckpt")
        image = os.path.join("data", "pair_0000_1.png")
        common = ["--config", config, "match", "--ckpt", ckpt, "--img1", image, "--img2", image,
                  "--grid", "8", "--topk", "10"]
        _ok(_run(tmp, *common, "--out", "plain.matches", "--viz", "--query-point", "5,20"))
        _ok(_run(tmp, *common, "--refine", "--out", "refined.matches"))
        plain, header = read_match_file(os.path.join(tmp, "plain.matches"))
        refined, _ = read_match_file(os.path.join(tmp, "refined.matches"))
        assert header == {"G": 8, "K": 10}
        assert 0 < len(plain) <= 10
        np.testing.assert_array_equal(plain.p1, refined.p1)
        assert np.linalg.norm(plain.p2 - refined.p2, axis=1).max() <= math.sqrt(2) + 1e-5
        assert os.path.exists(os.path.join(tmp, "plain_matches.png"))
        assert os.path.exists(os.path.join(tmp, "plain_attention.png"))

        other = os.path.join(tmp, "small.png")
        Image.new("RGB", (16, 16)).save(other)
        result = _run(tmp, "--config", config, "match", "--ckpt", ckpt, "--img1", image, "--img2", other,
                      "--out", "bad.matches")
        assert result.returncode == 1 and "differ" in result.stderr
        result = _run(tmp, "--config", config, "match", "--ckpt", image, "--img1", image, "--img2", image,
                      "--out", "bad.matches")
        assert result.returncode == 1
    print("✓ train and match")


def test_eval_homography():
    """Perfect matches score 1.0 everywhere; unsorted thresholds fail; empty files give zero counts."""
    with tempfile.TemporaryDirectory() as tmp:
        points = np.array([[1.0, 2.0], [10.0, 5.0], [30.0, 30.0]])
        write_match_file(os.path.join(tmp, "perfect.matches"), CorrespondenceSet(points, points, np.ones(3)), 8, 3)
        write_homography_file(os.path.join(tmp, "identity.H"), Homography.identity())

        result = _ok(_run(tmp, "eval-homography", "--matches", "perfect.matches", "--H", "identity.H"))
        assert "threshold" in result.stdout and "=" * 100 in result.stdout
        curve = read_curve_file(os.path.join(tmp, "perfect.curve"))
        assert list(curve["threshold"]) == [float(t) for t in range(1, 11)]
        assert (curve["fraction"] == 1.0).all() and (curve["correct"] == 3).all()

        result = _run(tmp, "eval-homography", "--matches", "perfect.matches", "--H", "identity.H",
                      "--thresholds", "3,1")
        assert result.returncode == 1 and "ascending" in result.stderr

        empty = CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
        write_match_file(os.path.join(tmp, "empty.matches"), empty, 8, 3)
        _ok(_run(tmp, "--xlsx", "report.xlsx", "eval-homography", "--matches", "empty.matches", "--H", "identity.H",
                 "--thresholds", "1,2"))
        curve = read_curve_file(os.path.join(tmp, "empty.curve"))
        assert list(curve["correct"]) == [0, 0] and list(curve["total"]) == [0, 0]
        assert os.path.exists(os.path.join(tmp, "report.xlsx"))

        with open(os.path.join(tmp, "broken.matches"), "w") as f:
            f.write("# coam-match v1 G=8 K=3\n1 2 3\n")
        result = _run(tmp, "eval-homography", "--matches", "broken.matches", "--H", "identity.H")
        assert result.returncode == 1 and "broken.matches:2:" in result.stderr
    print("✓ eval-homography")


def test_eval_pose():
    """Noiseless scenes are 100 / 100; a missing ground-truth file is named and fails."""
    with tempfile.TemporaryDirectory() as tmp:
        _ok(_run(tmp, "gen-data", "--kind", "twoview", "--count", "3", "--out", "scenes"))
        result = _ok(_run(tmp, "eval-pose", "--matches-dir", "scenes", "--gt-dir", "scenes"))
        assert "(rot / trans): 100.0 / 100.0" in result.stdout

        os.makedirs(os.path.join(tmp, "more"))
        for pid in ("pair_0000", "pair_0007"):
            shutil.copy(os.path.join(tmp, "scenes", "pair_0000.matches"), os.path.join(tmp, "more", f"{pid}.matches"))
        result = _run(tmp, "eval-pose", "--matches-dir", "more", "--gt-dir", "scenes")
        assert result.returncode == 1 and "pair_0007" in result.stderr and "pair_0000," not in result.stderr
    print("✓ eval-pose")


def test_config_errors_exit_nonzero():
    """Unknown configuration keys stop the command before it runs."""
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "bad.yaml")
        with open(path, "w") as f:
            f.write("train:\n  speed: 3\n")
        result = _run(tmp, "--config", path, "gen-data", "--count", "1", "--out", "data")
        assert result.returncode == 1 and "speed" in result.stderr
        assert not os.path.exists(os.path.join(tmp, "data"))
    print("✓ configuration errors exit nonzero")


if __name__ == "__main__":
    print("Testing coam.py commands...")
    failed = run_all(dict(globals()))
    if failed:
        print(f"\n✗ {failed} test(s) failed.")
        sys.exit(1)
    print("\n✓ All command tests passed!")
