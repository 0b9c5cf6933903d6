"""
Test-time match extraction from conditioned descriptor maps.

Descriptors and distinctiveness scores are sampled on a G x G grid, scored
with c = r1 * r2 * (d1 . d2), and kept when the two cells are mutual nearest
neighbours. The top K matches can then be refined to subpixel positions in
the second image using the full-resolution descriptor map.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from diffcore import Tensor, bilinear_resize, no_grad
from training import InsufficientCorrespondencesError

logger = logging.getLogger(__name__)

# === Constants ===
DEFAULT_GRID_SIZE = 128
DEFAULT_TOP_K = 2000
DEFAULT_BLOCK_ROWS = 256
MIN_INVARIANCE_PAIRS = 10
MATCH_FILE_VERSION = "v1"
UNIT_EPS = 1e-12

__all__ = [
    "CorrespondenceSet", "GridDescriptors", "InsufficientCorrespondencesError", "MatchFileError",
    "attention_heatmap", "bilinear_sample", "dense_resample", "descriptor_invariance", "grid_sample",
    "match_pair", "mutual_nn_matches", "read_match_file", "refine_location", "refine_matches",
    "score_volume", "similarity", "top_k", "write_match_file",
]


class MatchFileError(ValueError):
    pass


@dataclass
class GridDescriptors:
    """Descriptors (G, G, D), scores (G, G) and pixel coordinates (G, G, 2) as (x, y)."""

    grid_size: int
    descriptors: np.ndarray
    scores: np.ndarray
    pixel_coords: np.ndarray

    @property
    def flat_descriptors(self) -> np.ndarray:
        return self.descriptors.reshape(-1, self.descriptors.shape[-1])

    @property
    def flat_scores(self) -> np.ndarray:
        return self.scores.reshape(-1)

    @property
    def flat_coords(self) -> np.ndarray:
        return self.pixel_coords.reshape(-1, 2)


@dataclass
class CorrespondenceSet:
    """Matches p1 (N, 2) <-> p2 (N, 2) with scores (N,); idx1/idx2 are grid cells when known."""

    p1: np.ndarray
    p2: np.ndarray
    scores: np.ndarray
    idx1: Optional[np.ndarray] = None
    idx2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.p1) == len(self.p2) == len(self.scores)):
            raise ValueError(f"Inconsistent match arrays: {len(self.p1)}, {len(self.p2)}, {len(self.scores)}")

    def __len__(self):
        return len(self.scores)

    def subset(self, index) -> "CorrespondenceSet":
        return CorrespondenceSet(
            p1=self.p1[index], p2=self.p2[index], scores=self.scores[index],
            idx1=None if self.idx1 is None else self.idx1[index],
            idx2=None if self.idx2 is None else self.idx2[index],
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "x1": self.p1[:, 0], "y1": self.p1[:, 1],
            "x2": self.p2[:, 0], "y2": self.p2[:, 1],
            "score": self.scores,
        })


# === Sampling ===
def bilinear_sample(array: np.ndarray, xs, ys) -> np.ndarray:
    """Sample an (H, W, ...) array at float pixel coordinates, clamped to the border."""
    h, w = array.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    for _ in range(array.ndim - 2):
        fx, fy = fx[..., None], fy[..., None]
    top = array[y0, x0] * (1 - fx) + array[y0, x1] * fx
    bottom = array[y1, x0] * (1 - fx) + array[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.where(norms > UNIT_EPS, vectors / np.where(norms > UNIT_EPS, norms, 1.0), 0.0)


def grid_coordinates(grid_size: int, height: int, width: int) -> np.ndarray:
    """Cell g sits at pixel (g + 0.5) * size / G - 0.5 on each axis."""
    xs = (np.arange(grid_size) + 0.5) * (width / grid_size) - 0.5
    ys = (np.arange(grid_size) + 0.5) * (height / grid_size) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def grid_sample(D: np.ndarray, r: np.ndarray, grid_size: int = DEFAULT_GRID_SIZE) -> GridDescriptors:
    """Bilinearly sample (H, W, D) descriptors and (H, W) scores on a G x G grid."""
    if grid_size < 2:
        raise ValueError(f"grid size must be >= 2, got {grid_size}")
    D = np.asarray(D, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    height, width = D.shape[:2]
    coords = grid_coordinates(grid_size, height, width)
    descriptors = _unit_rows(bilinear_sample(D, coords[..., 0], coords[..., 1]))
    scores = bilinear_sample(r, coords[..., 0], coords[..., 1])
    return GridDescriptors(grid_size=grid_size, descriptors=descriptors, scores=scores, pixel_coords=coords)


# === Scoring ===
def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-sequential dot products of a (..., D) against b (..., D) with broadcasting.

    Accumulates one channel at a time so every entry is computed identically
    however the rows are blocked.
    """
    total = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        total = total + a[..., k] * b[..., k]
    return total


def similarity(d1, r1: float, d2, r2: float) -> float:
    """c = r1 * r2 * (d1 . d2)."""
    return float((r1 * r2) * _dot(np.asarray(d1, dtype=np.float64), np.asarray(d2, dtype=np.float64)))


def _score_block(desc1: np.ndarray, s1: np.ndarray, desc2: np.ndarray, s2: np.ndarray, use_distinctiveness: bool) -> np.ndarray:
    dots = _dot(desc1[:, None, :], desc2[None, :, :])
    if not use_distinctiveness:
        return dots
    return (s1[:, None] * s2[None, :]) * dots


def score_volume(grid1: GridDescriptors, grid2: GridDescriptors, use_distinctiveness: bool = True) -> np.ndarray:
    """Full (G1^2, G2^2) score matrix; only for small grids and checks."""
    return _score_block(grid1.flat_descriptors, grid1.flat_scores, grid2.flat_descriptors, grid2.flat_scores,
                        use_distinctiveness)


@dataclass
class _ScoreScan:
    row_index: np.ndarray
    row_value: np.ndarray
    col_index: np.ndarray
    col_value: np.ndarray


def _scan_scores(grid1: GridDescriptors, grid2: GridDescriptors, use_distinctiveness: bool = True,
                 block_rows: int = DEFAULT_BLOCK_ROWS) -> _ScoreScan:
    """Row and column argmax of the score volume, evaluated in row blocks (lowest index wins ties)."""
    desc1, s1 = grid1.flat_descriptors, grid1.flat_scores
    desc2, s2 = grid2.flat_descriptors, grid2.flat_scores
    n1, n2 = len(desc1), len(desc2)
    row_index = np.zeros(n1, dtype=np.int64)
    row_value = np.zeros(n1)
    col_index = np.zeros(n2, dtype=np.int64)
    col_value = np.full(n2, -np.inf)
    for start in range(0, n1, block_rows):
        stop = min(start + block_rows, n1)
        block = _score_block(desc1[start:stop], s1[start:stop], desc2, s2, use_distinctiveness)
        best = block.argmax(axis=1)
        row_index[start:stop] = best
        row_value[start:stop] = block[np.arange(stop - start), best]
        block_best = block.argmax(axis=0)
        block_value = block[block_best, np.arange(n2)]
        improved = block_value > col_value
        col_index[improved] = block_best[improved] + start
        col_value[improved] = block_value[improved]
    return _ScoreScan(row_index, row_value, col_index, col_value)


def mutual_nn_matches(grid1: GridDescriptors, grid2: GridDescriptors, use_distinctiveness: bool = True,
                      block_rows: int = DEFAULT_BLOCK_ROWS) -> CorrespondenceSet:
    """Pairs (n, m) where m = argmax_j c[n, j] and n = argmax_i c[i, m]."""
    if grid1.grid_size != grid2.grid_size:
        raise ValueError(f"Grid sizes differ: {grid1.grid_size} vs {grid2.grid_size}")
    scan = _scan_scores(grid1, grid2, use_distinctiveness, block_rows)
    idx1 = np.nonzero(scan.col_index[scan.row_index] == np.arange(len(scan.row_index)))[0]
    idx2 = scan.row_index[idx1]
    assert len(np.unique(idx2)) == len(idx2), "mutual nearest neighbours must be one-to-one"
    return CorrespondenceSet(
        p1=grid1.flat_coords[idx1], p2=grid2.flat_coords[idx2], scores=scan.row_value[idx1],
        idx1=idx1, idx2=idx2,
    )


def top_k(matches: CorrespondenceSet, k: int) -> CorrespondenceSet:
    """Highest-scoring k matches, ties broken by p1 in row-major (y, then x) order."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    order = np.lexsort((matches.p1[:, 0], matches.p1[:, 1], -matches.scores))
    return matches.subset(order[:k])


# === Refinement ===
_NEIGHBOUR_OFFSETS = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


def _weighted_centroid(centers: np.ndarray, locations: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Sum w_i loc_i / sum w_i with w = s - min(s); rows with all-zero weights keep their center."""
    weights = scores - scores.min(axis=1, keepdims=True)
    total = weights.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    refined = (weights[..., None] * locations).sum(axis=1) / safe[:, None]
    return np.where((total > 0)[:, None], refined, centers)


def refine_location(center, scores, spacing: float = 1.0) -> Tuple[float, float]:
    """Refine one location from its 3x3 neighbourhood scores (row-major, scores[dy + 1][dx + 1])."""
    center = np.asarray(center, dtype=np.float64).reshape(1, 2)
    locations = center[:, None, :] + spacing * _NEIGHBOUR_OFFSETS[None]
    refined = _weighted_centroid(center, locations, np.asarray(scores, dtype=np.float64).reshape(1, 9))
    return float(refined[0, 0]), float(refined[0, 1])


def refine_matches(matches: CorrespondenceSet, grid1: GridDescriptors, D2: np.ndarray) -> CorrespondenceSet:
    """Move each p2 to the score-weighted centroid of its 1-px 3x3 neighbourhood in D2."""
    if len(matches) == 0:
        return matches
    D2 = np.asarray(D2, dtype=np.float64)
    height, width = D2.shape[:2]
    if matches.idx1 is not None:
        d1 = grid1.flat_descriptors[matches.idx1]
    else:
        d1 = _unit_rows(bilinear_sample(grid1.descriptors, *_coords_to_grid(matches.p1, grid1)))

    locations = matches.p2[:, None, :] + _NEIGHBOUR_OFFSETS[None]
    locations[..., 0] = np.clip(locations[..., 0], 0, width - 1)
    locations[..., 1] = np.clip(locations[..., 1], 0, height - 1)
    d2 = _unit_rows(bilinear_sample(D2, locations[..., 0], locations[..., 1]))
    scores = _dot(d1[:, None, :], d2)
    refined = _weighted_centroid(matches.p2, locations, scores)
    return CorrespondenceSet(p1=matches.p1.copy(), p2=refined, scores=matches.scores.copy(),
                             idx1=matches.idx1, idx2=matches.idx2)


def _coords_to_grid(points: np.ndarray, grid: GridDescriptors) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel positions to fractional grid indices (inverse of grid_coordinates)."""
    coords = grid.pixel_coords
    step_x = coords[0, 1, 0] - coords[0, 0, 0]
    step_y = coords[1, 0, 1] - coords[0, 0, 1]
    return (points[:, 0] - coords[0, 0, 0]) / step_x, (points[:, 1] - coords[0, 0, 1]) / step_y


def match_pair(D1: np.ndarray, r1: np.ndarray, D2: np.ndarray, r2: np.ndarray, grid_size: int = DEFAULT_GRID_SIZE,
               k: int = DEFAULT_TOP_K, refine: bool = False, use_distinctiveness: bool = True) -> CorrespondenceSet:
    """Grid sample both maps, mutual-NN match, keep the top k, optionally refine p2."""
    grid1 = grid_sample(D1, r1, grid_size)
    grid2 = grid_sample(D2, r2, grid_size)
    matches = top_k(mutual_nn_matches(grid1, grid2, use_distinctiveness), k)
    if refine:
        matches = refine_matches(matches, grid1, D2)
    logger.debug(f"match_pair: {len(matches)} matches (G={grid_size}, K={k}, refine={refine})")
    return matches


# === Dense resampling and analysis ===
def dense_resample(image_s: np.ndarray, grid_v: GridDescriptors, grid_s: GridDescriptors,
                   use_distinctiveness: bool = True, output_shape: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Colour of the best match in I_s for every grid cell of the viewpoint image.

    Returns the (G, G, C) grid image and its bilinear upsampling to output_shape
    (default: the size of image_s).
    """
    image_s = np.asarray(image_s, dtype=np.float64)
    scan = _scan_scores(grid_v, grid_s, use_distinctiveness)
    source = grid_s.flat_coords[scan.row_index]
    colours = bilinear_sample(image_s, source[:, 0], source[:, 1])
    G = grid_v.grid_size
    grid_image = colours.reshape(G, G, -1)
    height, width = output_shape or image_s.shape[:2]
    with no_grad():
        upsampled = bilinear_resize(Tensor(grid_image.transpose(2, 0, 1)[None]), (height, width)).data
    return grid_image, upsampled[0].transpose(1, 2, 0)


@dataclass
class InvarianceStats:
    mean: float
    std: float
    count: int


def descriptor_invariance(D_query: np.ndarray, D_target: np.ndarray, points_query, points_target) -> InvarianceStats:
    """Mean and std of ||D_query[x] - D_target[y]||_1 over ground-truth pairs (x, y)."""
    points_query = np.asarray(points_query, dtype=np.float64).reshape(-1, 2)
    points_target = np.asarray(points_target, dtype=np.float64).reshape(-1, 2)
    if len(points_query) < MIN_INVARIANCE_PAIRS:
        raise InsufficientCorrespondencesError(
            f"descriptor invariance needs at least {MIN_INVARIANCE_PAIRS} correspondences, got {len(points_query)}"
        )
    dq = _unit_rows(bilinear_sample(np.asarray(D_query, dtype=np.float64), points_query[:, 0], points_query[:, 1]))
    dt = _unit_rows(bilinear_sample(np.asarray(D_target, dtype=np.float64), points_target[:, 0], points_target[:, 1]))
    l1 = np.abs(dq - dt).sum(axis=1)
    return InvarianceStats(mean=float(l1.mean()), std=float(l1.std()), count=len(l1))


def attention_heatmap(A: np.ndarray, query_index: int, target_shape: Tuple[int, int]) -> np.ndarray:
    """Row query_index of an attention matrix laid out on the attended feature grid."""
    A = np.asarray(A)
    if not 0 <= query_index < A.shape[0]:
        raise ValueError(f"query index {query_index} outside [0, {A.shape[0]})")
    if target_shape[0] * target_shape[1] != A.shape[1]:
        raise ValueError(f"target shape {target_shape} does not hold {A.shape[1]} locations")
    return A[query_index].reshape(target_shape)


def query_cell(point, image_shape: Tuple[int, int], feature_shape: Tuple[int, int]) -> int:
    """Flattened feature-grid index of the cell containing a pixel (x, y)."""
    x, y = point
    col = int(np.clip(np.floor((x + 0.5) * feature_shape[1] / image_shape[1]), 0, feature_shape[1] - 1))
    row = int(np.clip(np.floor((y + 0.5) * feature_shape[0] / image_shape[0]), 0, feature_shape[0] - 1))
    return row * feature_shape[1] + col


# === Match files ===
def write_match_file(path: str, matches: CorrespondenceSet, grid_size: int, top_k: int) -> str:
    lines = [f"# coam-match {MATCH_FILE_VERSION} G={grid_size} K={top_k}"]
    for (x1, y1), (x2, y2), score in zip(matches.p1, matches.p2, matches.scores):
        lines.append(f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f} {score:.6f}")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp_path, path)
    return path


def read_match_file(path: str) -> Tuple[CorrespondenceSet, Dict[str, Optional[int]]]:
    """Parse a match file; returns the matches and the header fields G and K."""
    try:
        with open(path, "r") as f:
            raw_lines = f.read().splitlines()
    except OSError as e:
        raise MatchFileError(f"{path}: {e}") from e

    header = {"G": None, "K": None}
    rows = []
    for line_no, line in enumerate(raw_lines, start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            parts = text[1:].split()
            if line_no == 1:
                if len(parts) < 2 or parts[0] != "coam-match" or parts[1] != MATCH_FILE_VERSION:
                    raise MatchFileError(f"{path}:{line_no}: unrecognized header {text!r}")
                for part in parts[2:]:
                    key, _, value = part.partition("=")
                    if key in header:
                        try:
                            header[key] = int(value)
                        except ValueError:
                            raise MatchFileError(f"{path}:{line_no}: bad header field {part!r}") from None
            continue
        if line_no == 1:
            raise MatchFileError(f"{path}:1: missing '# coam-match {MATCH_FILE_VERSION}' header")
        parts = text.split()
        if len(parts) != 5:
            raise MatchFileError(f"{path}:{line_no}: expected 5 values 'x1 y1 x2 y2 score', found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise MatchFileError(f"{path}:{line_no}: non-numeric value in {text!r}") from None

    table = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return CorrespondenceSet(p1=table[:, 0:2], p2=table[:, 2:4], scores=table[:, 4]), header
