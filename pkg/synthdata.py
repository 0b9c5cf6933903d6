"""
Deterministic synthetic data with exact ground truth.

Homography pairs (a value-noise texture and a warped, photometrically
jittered copy) supervise training and the homography benchmark. Two-view
scenes (random 3D points seen by two calibrated cameras) feed the pose
evaluation. Every generator is a pure function of its spec and seed.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from geometry import (
    CameraIntrinsics, Homography, PointAtInfinityError, RelativePose, rotation_matrix,
    write_homography_file, write_pose_file,
)
from matcher import CorrespondenceSet, bilinear_sample, write_match_file

logger = logging.getLogger(__name__)

# === Constants ===
MIN_TEXTURE_SIZE = 16
TEXTURE_BASE_CELLS = 4
TEXTURE_OCTAVES = 4
MAX_SCENE_ATTEMPTS = 1000
MANIFEST_COLUMNS = ["pair_id", "seed", "spec_hash"]


class DegenerateWarpError(ValueError):
    pass


class ResamplingError(RuntimeError):
    pass


# === Specs ===
@dataclass
class HomographyPairSpec:
    """Ranges for the random warp and photometric jitter of a homography pair."""

    base_seed: int = 0
    image_size: int = 64
    rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    anisotropy: float = 0.05
    perspective: float = 2e-4
    translation_px: float = 4.0
    brightness_offset: float = 0.1
    contrast_min: float = 0.8
    contrast_max: float = 1.2
    tint: float = 0.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.image_size < MIN_TEXTURE_SIZE:
            raise ValueError(f"image_size must be >= {MIN_TEXTURE_SIZE}, got {self.image_size}")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"Invalid scale range [{self.scale_min}, {self.scale_max}]")
        if not 0 < self.contrast_min <= self.contrast_max:
            raise ValueError(f"Invalid contrast range [{self.contrast_min}, {self.contrast_max}]")
        for name in ("rotation_deg", "anisotropy", "perspective", "translation_px",
                     "brightness_offset", "tint", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.anisotropy >= 1:
            raise ValueError(f"anisotropy must be < 1, got {self.anisotropy}")

    @classmethod
    def identity(cls, image_size: int = 64, base_seed: int = 0) -> "HomographyPairSpec":
        """No warp and no jitter."""
        return cls(base_seed=base_seed, image_size=image_size, rotation_deg=0.0, scale_min=1.0, scale_max=1.0,
                   anisotropy=0.0, perspective=0.0, translation_px=0.0, brightness_offset=0.0,
                   contrast_min=1.0, contrast_max=1.0, tint=0.0, noise_sigma=0.0)

    def spec_hash(self) -> str:
        return _spec_hash(self)


@dataclass
class TwoViewSceneSpec:
    point_count: int = 100
    depth_min: float = 4.0
    depth_max: float = 8.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    rotation_deg: float = 15.0
    baseline: float = 1.0
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.point_count < 1:
            raise ValueError(f"point_count must be >= 1, got {self.point_count}")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError(f"Invalid depth range [{self.depth_min}, {self.depth_max}]")
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError(f"outlier_fraction must be in [0, 1], got {self.outlier_fraction}")
        if self.pixel_noise < 0 or self.baseline <= 0:
            raise ValueError("pixel_noise must be >= 0 and baseline > 0")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def spec_hash(self) -> str:
        return _spec_hash(self)


def _spec_hash(spec) -> str:
    encoded = json.dumps(asdict(spec), sort_keys=True).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:16]


@dataclass
class PhotometricJitter:
    """out = clip(gain * (1 + tint_c) * image + offset + noise, 0, 1)."""

    gain: float = 1.0
    offset: float = 0.0
    tint: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_sigma: float = 0.0

    def apply_noiseless(self, image: np.ndarray) -> np.ndarray:
        return np.clip(self.gain * (1.0 + self.tint) * image + self.offset, 0.0, 1.0)


@dataclass
class HomographyPair:
    image1: np.ndarray
    image2: np.ndarray
    homography: Homography
    mask: np.ndarray
    correspondences: np.ndarray
    photometric: PhotometricJitter


@dataclass
class TwoViewScene:
    points1: np.ndarray
    points2: np.ndarray
    intrinsics: CameraIntrinsics
    pose: RelativePose
    outlier_mask: np.ndarray


# === Sampling helpers ===
def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def generate_texture(seed: int, size: int, channels: int = 3, octaves: int = TEXTURE_OCTAVES) -> np.ndarray:
    """Multi-octave value noise in [0, 1], shape (size, size, channels)."""
    if size < MIN_TEXTURE_SIZE:
        raise ValueError(f"Texture size must be >= {MIN_TEXTURE_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    image = np.zeros((size, size, channels))
    amplitude = 1.0
    for octave in range(octaves):
        cells = min(TEXTURE_BASE_CELLS * 2 ** octave, size // 8)
        lattice = rng.random((cells + 1, cells + 1, channels))
        u = (np.arange(size) + 0.5) / size * cells
        i0 = np.minimum(np.floor(u).astype(int), cells - 1)
        t = _smoothstep(u - i0)
        ty, tx = t[:, None, None], t[None, :, None]
        rows0, rows1 = i0[:, None], i0[:, None] + 1
        cols0, cols1 = i0[None, :], i0[None, :] + 1
        layer = (lattice[rows0, cols0] * (1 - tx) * (1 - ty) + lattice[rows0, cols1] * tx * (1 - ty)
                 + lattice[rows1, cols0] * (1 - tx) * ty + lattice[rows1, cols1] * tx * ty)
        image += amplitude * layer
        amplitude *= 0.5
    low, high = image.min(), image.max()
    return (image - low) / max(high - low, 1e-12)


def apply_photometric(image: np.ndarray, jitter: PhotometricJitter, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    out = jitter.gain * (1.0 + jitter.tint) * image + jitter.offset
    if jitter.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + rng.normal(0.0, jitter.noise_sigma, size=image.shape)
    return np.clip(out, 0.0, 1.0)


def sample_homography(spec: HomographyPairSpec, rng: np.random.Generator) -> np.ndarray:
    """Similarity + anisotropy + perspective about the image center, then translation."""
    size = spec.image_size
    c = (size - 1) / 2.0
    angle = np.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    scale = rng.uniform(spec.scale_min, spec.scale_max)
    aniso = rng.uniform(-spec.anisotropy, spec.anisotropy)
    px, py = rng.uniform(-spec.perspective, spec.perspective, size=2)
    tx, ty = rng.uniform(-spec.translation_px, spec.translation_px, size=2)

    rotation = np.array([[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0], [0.0, 0.0, 1.0]])
    stretch = np.diag([scale * (1.0 + aniso), scale / (1.0 + aniso), 1.0])
    perspective = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    to_center = np.array([[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, c + tx], [0.0, 1.0, c + ty], [0.0, 0.0, 1.0]])
    return back @ rotation @ stretch @ perspective @ to_center


def homography_correspondences(H: Homography, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth map (size, size, 2) of H(p) in (x, y) order, and the mask of H(p) inside image 2."""
    ys, xs = np.mgrid[0:size, 0:size]
    points = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    projected = points @ H.matrix[:, :2].T + H.matrix[:, 2]
    w = projected[:, 2]
    valid_w = w > 1e-12
    safe_w = np.where(valid_w, w, 1.0)
    mapped = projected[:, :2] / safe_w[:, None]
    inside = valid_w & (mapped[:, 0] >= 0) & (mapped[:, 0] <= size - 1) & (mapped[:, 1] >= 0) & (mapped[:, 1] <= size - 1)
    return mapped.reshape(size, size, 2), inside.reshape(size, size)


def generate_homography_pair(spec: HomographyPairSpec, seed: int, homography: Optional[Homography] = None) -> HomographyPair:
    """I1 is the center crop of a 2x canvas; I2 samples the canvas through H^-1 and gets jittered.

    Passing `homography` fixes the warp instead of sampling it.
    """
    rng = np.random.default_rng([spec.base_seed, seed])
    size = spec.image_size
    pad = size // 2
    canvas = generate_texture(int(rng.integers(0, 2 ** 31 - 1)), 2 * size)
    image1 = canvas[pad:pad + size, pad:pad + size]

    if homography is None:
        try:
            homography = Homography(sample_homography(spec, rng))
        except ValueError as e:
            raise DegenerateWarpError(f"Sampled homography is degenerate: {e}") from e

    # every pixel of I2 must pull from inside the canvas
    corners = np.array([[0.0, 0.0], [size - 1, 0.0], [0.0, size - 1], [size - 1, size - 1]])
    try:
        inverse = homography.inverse()
        back = inverse.apply(corners)
    except (ValueError, PointAtInfinityError) as e:
        raise DegenerateWarpError(f"Homography cannot be inverted at the image corners: {e}") from e
    if np.any(back < -pad) or np.any(back > size - 1 + pad):
        raise DegenerateWarpError(f"Warped corners {back.round(2).tolist()} leave the padded canvas")

    ys, xs = np.mgrid[0:size, 0:size]
    pulled = inverse.apply(np.column_stack([xs.ravel(), ys.ravel()]))
    warped = bilinear_sample(canvas, pulled[:, 0] + pad, pulled[:, 1] + pad).reshape(size, size, -1)

    jitter = PhotometricJitter(
        gain=float(rng.uniform(spec.contrast_min, spec.contrast_max)),
        offset=float(rng.uniform(-spec.brightness_offset, spec.brightness_offset)),
        tint=rng.uniform(-spec.tint, spec.tint, size=3),
        noise_sigma=spec.noise_sigma,
    )
    image2 = apply_photometric(warped, jitter, rng)
    correspondences, mask = homography_correspondences(homography, size)
    return HomographyPair(image1=image1, image2=image2, homography=homography, mask=mask,
                          correspondences=correspondences, photometric=jitter)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    return rotation_matrix(axis, rng.uniform(-max_deg, max_deg))


def generate_two_view_scene(spec: TwoViewSceneSpec, seed: int) -> TwoViewScene:
    """Random points visible in both cameras with optional pixel noise and replaced outliers."""
    rng = np.random.default_rng(seed)
    K = spec.intrinsics.matrix
    K_inv = np.linalg.inv(K)
    R = _random_rotation(rng, spec.rotation_deg)
    direction = rng.normal(size=3)
    t = spec.baseline * direction / np.linalg.norm(direction)

    kept1, kept2 = [], []
    remaining = spec.point_count
    for attempt in range(MAX_SCENE_ATTEMPTS):
        if remaining == 0:
            break
        pixels = np.column_stack([rng.uniform(0, spec.width - 1, remaining), rng.uniform(0, spec.height - 1, remaining)])
        depth = rng.uniform(spec.depth_min, spec.depth_max, remaining)
        X1 = (np.column_stack([pixels, np.ones(remaining)]) @ K_inv.T) * depth[:, None]
        X2 = X1 @ R.T + t
        ok = X2[:, 2] > 1e-9
        proj = X2[ok] @ K.T
        p2 = proj[:, :2] / proj[:, 2:3]
        inside = (p2[:, 0] >= 0) & (p2[:, 0] <= spec.width - 1) & (p2[:, 1] >= 0) & (p2[:, 1] <= spec.height - 1)
        kept1.append(pixels[ok][inside])
        kept2.append(p2[inside])
        remaining -= int(inside.sum())
    if remaining > 0:
        raise ResamplingError(f"Could not place {spec.point_count} visible points after {MAX_SCENE_ATTEMPTS} attempts")

    points1 = np.concatenate(kept1)[:spec.point_count]
    points2 = np.concatenate(kept2)[:spec.point_count]
    if spec.pixel_noise > 0:
        points1 = points1 + rng.normal(0.0, spec.pixel_noise, points1.shape)
        points2 = points2 + rng.normal(0.0, spec.pixel_noise, points2.shape)

    outlier_mask = np.zeros(spec.point_count, dtype=bool)
    outlier_count = int(round(spec.outlier_fraction * spec.point_count))
    if outlier_count:
        chosen = rng.choice(spec.point_count, size=outlier_count, replace=False)
        outlier_mask[chosen] = True
        points2[chosen] = np.column_stack([rng.uniform(0, spec.width - 1, outlier_count),
                                           rng.uniform(0, spec.height - 1, outlier_count)])
    return TwoViewScene(points1=points1, points2=points2, intrinsics=spec.intrinsics,
                        pose=RelativePose(R=R, t=t), outlier_mask=outlier_mask)


# === Files ===
def save_image(path: str, image: np.ndarray) -> str:
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    return path


def load_image(path: str) -> np.ndarray:
    """PNG -> float (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_manifest(path: str, entries: pd.DataFrame) -> str:
    lines = [f"{row.pair_id} {row.seed} {row.spec_hash}" for row in entries.itertuples(index=False)]
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        f.write("".join(line + "\n" for line in lines))
    os.replace(tmp_path, path)
    return path


def read_manifest(path: str) -> pd.DataFrame:
    rows = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 'pair_id seed spec_hash'")
            rows.append({"pair_id": parts[0], "seed": int(parts[1]), "spec_hash": parts[2]})
    return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


def pair_id(index: int) -> str:
    return f"pair_{index:04d}"


def write_homography_dataset(out_dir: str, count: int, seed: int, spec: Optional[HomographyPairSpec] = None) -> pd.DataFrame:
    """<id>_1.png, <id>_2.png and <id>.H per pair plus manifest.txt."""
    spec = spec or HomographyPairSpec()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for index in range(count):
        pair_seed = seed * 100003 + index
        name = pair_id(index)
        pair = generate_homography_pair(spec, pair_seed)
        save_image(os.path.join(out_dir, f"{name}_1.png"), pair.image1)
        save_image(os.path.join(out_dir, f"{name}_2.png"), pair.image2)
        write_homography_file(os.path.join(out_dir, f"{name}.H"), pair.homography)
        entries.append({"pair_id": name, "seed": pair_seed, "spec_hash": spec.spec_hash()})
        logger.debug(f"Generated {name} (seed {pair_seed})")
    manifest = pd.DataFrame(entries, columns=MANIFEST_COLUMNS)
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    logger.info(f"Wrote {count} homography pairs to {out_dir}")
    return manifest


def write_two_view_dataset(out_dir: str, count: int, seed: int, spec: Optional[TwoViewSceneSpec] = None) -> pd.DataFrame:
    """<id>.pose and <id>.matches (exact correspondences, score 1) per scene plus manifest.txt."""
    spec = spec or TwoViewSceneSpec()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for index in range(count):
        scene_seed = seed * 100003 + index
        name = pair_id(index)
        scene = generate_two_view_scene(spec, scene_seed)
        write_pose_file(os.path.join(out_dir, f"{name}.pose"), scene.intrinsics, scene.pose)
        matches = CorrespondenceSet(p1=scene.points1, p2=scene.points2, scores=np.ones(len(scene.points1)))
        write_match_file(os.path.join(out_dir, f"{name}.matches"), matches, grid_size=0, top_k=len(matches))
        entries.append({"pair_id": name, "seed": scene_seed, "spec_hash": spec.spec_hash()})
    manifest = pd.DataFrame(entries, columns=MANIFEST_COLUMNS)
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    logger.info(f"Wrote {count} two-view scenes to {out_dir}")
    return manifest
