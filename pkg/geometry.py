"""
Two-view geometry for match evaluation.

Homography-based correct-match counting, essential matrix estimation with
RANSAC (normalized 8-point by default, 5-point optional), pose decomposition
with a cheirality check, and angular pose accuracy.

Pose convention: a point X1 in camera-1 coordinates maps to X2 = R @ X1 + t,
so corresponding normalized points satisfy x2^T E x1 = 0 with E = [t]_x R.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# === Constants ===
W_EPS = 1e-12
DET_EPS = 1e-12
ORTHONORMAL_TOL = 1e-9
DEFAULT_PIXEL_THRESHOLDS = list(range(1, 11))
DEFAULT_POSE_THRESHOLD_DEG = 10.0
SOLVERS = ("8point", "5point")


class PointAtInfinityError(ValueError):
    pass


class DegenerateConfigurationError(RuntimeError):
    pass


class CheiralityError(RuntimeError):
    pass


class GeometryFileError(ValueError):
    pass


# === Types ===
@dataclass
class Homography:
    """3x3 projective map, stored with H[2,2] = 1 when that entry is nonzero."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"Homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > W_EPS:
            m = m / m[2, 2]
        det = np.linalg.det(m)
        if not abs(det) > DET_EPS:
            raise ValueError(f"Homography is not invertible (det={det:.3e})")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, s: float) -> "Homography":
        return cls(np.diag([s, s, 1.0]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points) -> np.ndarray:
        """Map (N, 2) pixel points; raises PointAtInfinityError if any lands at infinity."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        projected = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        w = projected[:, 2]
        if np.any(np.abs(w) <= W_EPS):
            bad = int(np.argmax(np.abs(w) <= W_EPS))
            raise PointAtInfinityError(f"Point {pts[bad].tolist()} maps to infinity (w={w[bad]:.3e})")
        return projected[:, :2] / w[:, None]


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class RelativePose:
    """Rotation and unit translation direction; t is rescaled to unit norm on construction."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"RelativePose needs a 3x3 R and a 3-vector t, got {R.shape} and {t.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("R is not a rotation matrix")
        norm = np.linalg.norm(t)
        if norm <= W_EPS:
            raise ValueError("Translation direction must be nonzero")
        self.R = R
        self.t = t / norm


@dataclass
class RansacConfig:
    iterations: int = 2000
    inlier_threshold: float = 1e-3
    rng_seed: int = 0
    solver: str = "8point"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.inlier_threshold > 0:
            raise ValueError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")


@dataclass
class EssentialEstimate:
    E: np.ndarray
    inliers: np.ndarray
    hypotheses: int = 0

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


# === Homographies ===
def homography_apply(H: Homography, p) -> Tuple[float, float]:
    """Map a single pixel point through H."""
    x, y = H.apply(np.asarray(p, dtype=np.float64).reshape(1, 2))[0]
    return float(x), float(y)


def _validate_thresholds(thresholds: Sequence[float]) -> List[float]:
    values = [float(t) for t in thresholds]
    if not values:
        raise ValueError("At least one threshold is required")
    if any(not v > 0 for v in values):
        raise ValueError(f"Thresholds must be positive, got {values}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"Thresholds must be strictly ascending, got {values}")
    return values


def reprojection_errors(p1, p2, H: Homography) -> np.ndarray:
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 2)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 2)
    if len(p1) == 0:
        return np.zeros(0)
    return np.linalg.norm(H.apply(p1) - p2, axis=1)


def evaluate_homography_matches(matches, H: Homography, thresholds: Sequence[float] = DEFAULT_PIXEL_THRESHOLDS) -> pd.DataFrame:
    """Count matches with ||H(p1) - p2|| <= threshold for each threshold.

    `matches` is anything exposing p1 and p2 as (N, 2) arrays. Returns one row
    per threshold with columns threshold, correct, total, fraction.
    """
    values = _validate_thresholds(thresholds)
    errors = reprojection_errors(matches.p1, matches.p2, H)
    total = len(errors)
    rows = []
    for threshold in values:
        correct = int((errors <= threshold).sum())
        rows.append({
            "threshold": threshold,
            "correct": correct,
            "total": total,
            "fraction": correct / total if total else 0.0,
        })
    return pd.DataFrame(rows, columns=["threshold", "correct", "total", "fraction"])


# === Calibrated coordinates ===
def pixels_to_normalized(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([(pts[:, 0] - intrinsics.cx) / intrinsics.fx, (pts[:, 1] - intrinsics.cy) / intrinsics.fy])


def normalized_to_pixels(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([pts[:, 0] * intrinsics.fx + intrinsics.cx, pts[:, 1] * intrinsics.fy + intrinsics.cy])


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_matrix(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    theta = np.radians(degrees)
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    return skew(pose.t) @ pose.R


def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)


def symmetric_epipolar_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Symmetric point-to-epipolar-line distance in normalized coordinates.

    E may be (3, 3) or a stack (K, 3, 3); the result is (N,) or (K, N).
    """
    h1 = _homogeneous(np.asarray(x1, dtype=np.float64))
    h2 = _homogeneous(np.asarray(x2, dtype=np.float64))
    lines2 = np.einsum("...ij,nj->...ni", E, h1)  # E x1, lines in image 2
    lines1 = np.einsum("...ji,nj->...ni", E, h2)  # E^T x2, lines in image 1
    residual = np.einsum("ni,...ni->...n", h2, lines2)
    norm1 = np.maximum(lines1[..., 0] ** 2 + lines1[..., 1] ** 2, 1e-300)
    norm2 = np.maximum(lines2[..., 0] ** 2 + lines2[..., 1] ** 2, 1e-300)
    return np.sqrt(residual ** 2 * (1.0 / norm1 + 1.0 / norm2))


def project_to_essential(E: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values (1, 1, 0); works on stacks."""
    U, _, Vt = np.linalg.svd(E)
    return U @ (np.array([1.0, 1.0, 0.0])[..., :, None] * Vt)


# === Minimal and least-squares solvers ===
def _hartley_transform(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2); batched over leading axes."""
    centroid = points.mean(axis=-2, keepdims=True)
    mean_dist = np.linalg.norm(points - centroid, axis=-1).mean(axis=-1)
    scale = np.sqrt(2.0) / np.maximum(mean_dist, 1e-12)
    T = np.zeros(points.shape[:-2] + (3, 3))
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 0, 2] = -scale * centroid[..., 0, 0]
    T[..., 1, 2] = -scale * centroid[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _epipolar_rows(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """Rows of the linear system x2^T E x1 = 0 for row-major vec(E)."""
    return (h2[..., :, None] * h1[..., None, :]).reshape(h1.shape[:-1] + (9,))


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate; x1/x2 are (..., N, 2) with N >= 8, result projected to (1, 1, 0)."""
    T1 = _hartley_transform(x1)
    T2 = _hartley_transform(x2)
    h1 = np.einsum("...ij,...nj->...ni", T1, _homogeneous(x1))
    h2 = np.einsum("...ij,...nj->...ni", T2, _homogeneous(x2))
    _, _, Vt = np.linalg.svd(_epipolar_rows(h1, h2), full_matrices=True)
    E_hat = Vt[..., -1, :].reshape(x1.shape[:-2] + (3, 3))
    E = np.swapaxes(T2, -1, -2) @ E_hat @ T1
    return project_to_essential(E)


# Cubic monomials in (x, y, z) first, then the degree <= 2 basis
_MONOMIALS = [
    (3, 0, 0), (2, 1, 0), (1, 2, 0), (0, 3, 0), (2, 0, 1), (1, 1, 1), (0, 2, 1), (1, 0, 2), (0, 1, 2), (0, 0, 3),
    (2, 0, 0), (1, 1, 0), (0, 2, 0), (1, 0, 1), (0, 1, 1), (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]


def _monomial_projection() -> np.ndarray:
    """(64, 20) map from the cubic tensor index (a, b, c) over (x, y, z, 1) to monomial columns."""
    column = {exponents: i for i, exponents in enumerate(_MONOMIALS)}
    projection = np.zeros((64, 20))
    for flat, (a, b, c) in enumerate(np.ndindex(4, 4, 4)):
        exponents = tuple(int(sum(1 for v in (a, b, c) if v == axis)) for axis in range(3))
        projection[flat, column[exponents]] = 1.0
    return projection


_MONOMIAL_PROJECTION = _monomial_projection()
_LEVI_CIVITA = np.zeros((3, 3, 3))
_LEVI_CIVITA[0, 1, 2] = _LEVI_CIVITA[1, 2, 0] = _LEVI_CIVITA[2, 0, 1] = 1.0
_LEVI_CIVITA[0, 2, 1] = _LEVI_CIVITA[2, 1, 0] = _LEVI_CIVITA[1, 0, 2] = -1.0


def five_point(x1: np.ndarray, x2: np.ndarray) -> List[np.ndarray]:
    """Real essential matrices consistent with 5 normalized correspondences (action-matrix method).

    E = x X + y Y + z Z + W spans the null space of the epipolar rows. The
    determinant and trace constraints give 10 cubics in (x, y, z); eliminating
    the cubic monomials leaves multiplication by x acting on
    [x^2, xy, y^2, xz, yz, z^2, x, y, z, 1], whose eigenvectors are the solutions.
    """
    rows = _epipolar_rows(_homogeneous(x1), _homogeneous(x2))
    _, _, Vt = np.linalg.svd(rows, full_matrices=True)
    basis = Vt[5:9].reshape(4, 3, 3)  # X, Y, Z, W

    det_terms = np.einsum("ijk,ai,bj,ck->abc", _LEVI_CIVITA, basis[:, 0, :], basis[:, 1, :], basis[:, 2, :])
    cubic_terms = 2.0 * np.einsum("aij,bkj,ckl->abcil", basis, basis, basis)
    trace_terms = np.einsum("akj,bkj,cil->abcil", basis, basis, basis)
    constraints = np.concatenate([
        det_terms.reshape(1, 64),
        (cubic_terms - trace_terms).reshape(64, 9).T,
    ])
    coefficients = constraints @ _MONOMIAL_PROJECTION

    try:
        reduction = np.linalg.solve(coefficients[:, :10], coefficients[:, 10:])
    except np.linalg.LinAlgError:
        return []

    action = np.zeros((10, 10))
    action[0:6] = -reduction[[0, 1, 2, 4, 5, 7]]
    action[6, 0] = 1.0
    action[7, 1] = 1.0
    action[8, 3] = 1.0
    action[9, 6] = 1.0

    _, vectors = np.linalg.eig(action)
    solutions = []
    for k in range(10):
        v = vectors[:, k]
        if abs(v[9]) < 1e-12:
            continue
        xyz = v[6:9] / v[9]
        if np.abs(xyz.imag).max() > 1e-8 * max(1.0, np.abs(xyz.real).max()):
            continue
        x, y, z = xyz.real
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        solutions.append(project_to_essential(E))
    return solutions


# === RANSAC ===
def _hypothesis_schedule(n: int, sample_size: int, iterations: int, seed: int) -> np.ndarray:
    """Fixed (iterations, sample_size) index schedule drawn up front from the seed."""
    rng = np.random.default_rng(seed)
    return np.argsort(rng.random((iterations, n)), axis=1)[:, :sample_size]


def estimate_essential_ransac(x1, x2, cfg: Optional[RansacConfig] = None) -> EssentialEstimate:
    """Robust essential matrix from normalized correspondences, refit on the final inliers."""
    cfg = cfg or RansacConfig()
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    n = len(x1)
    if n < 8:
        raise DegenerateConfigurationError(f"Need at least 8 correspondences, got {n}")

    sample_size = 8 if cfg.solver == "8point" else 5
    schedule = _hypothesis_schedule(n, sample_size, cfg.iterations, cfg.rng_seed)

    if cfg.solver == "8point":
        candidates = eight_point(x1[schedule], x2[schedule])
    else:
        found = [E for sample in schedule for E in five_point(x1[sample], x2[sample])]
        candidates = np.array(found) if found else np.zeros((0, 3, 3))

    best_E, best_mask = None, np.zeros(n, dtype=bool)
    if len(candidates):
        masks = symmetric_epipolar_distance(candidates, x1, x2) <= cfg.inlier_threshold
        counts = masks.sum(axis=1)
        best = int(np.argmax(counts))
        best_E, best_mask = candidates[best], masks[best]

    if best_mask.sum() < 8:
        raise DegenerateConfigurationError(
            f"No model reached 8 inliers ({int(best_mask.sum())} best of {n} after {cfg.iterations} iterations)"
        )

    refit = eight_point(x1[best_mask], x2[best_mask])
    refit_mask = symmetric_epipolar_distance(refit, x1, x2) <= cfg.inlier_threshold
    if refit_mask.sum() >= best_mask.sum():
        best_E, best_mask = refit, refit_mask

    logger.debug(f"RANSAC ({cfg.solver}): {int(best_mask.sum())}/{n} inliers from {len(candidates)} hypotheses")
    return EssentialEstimate(E=best_E, inliers=best_mask, hypotheses=len(candidates))


# === Pose recovery ===
def triangulate(x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear triangulation with P1 = [I|0], P2 = [R|t]; returns homogeneous (N, 4) points."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    A = np.stack([
        x1[:, 0:1] * P1[2] - P1[0],
        x1[:, 1:2] * P1[2] - P1[1],
        x2[:, 0:1] * P2[2] - P2[0],
        x2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def _count_in_front(x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray) -> int:
    X = triangulate(x1, x2, R, t)
    w = X[:, 3]
    finite = np.abs(w) > W_EPS
    points = X[finite, :3] / w[finite, None]
    depth1 = points[:, 2]
    depth2 = (points @ R.T + t)[:, 2]
    return int(((depth1 > 0) & (depth2 > 0)).sum())


def decompose_essential(E: np.ndarray, x1, x2) -> RelativePose:
    """Pick the (R, t) candidate with the most points in front of both cameras."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    counts = [_count_in_front(x1, x2, R, tc) for R, tc in candidates]
    best = int(np.argmax(counts))
    if counts[best] == 0 or counts.count(counts[best]) > 1:
        raise CheiralityError(f"No decomposition wins the cheirality test strictly (counts {counts})")
    R, tc = candidates[best]
    return RelativePose(R=R, t=tc)


def pose_errors(est: RelativePose, gt: RelativePose) -> Tuple[float, float]:
    """(rotation error, translation direction error) in degrees; translation is sign-invariant."""
    cos_rot = np.clip((np.trace(est.R.T @ gt.R) - 1.0) / 2.0, -1.0, 1.0)
    cos_trans = np.clip(abs(float(est.t @ gt.t)), 0.0, 1.0)
    return float(np.degrees(np.arccos(cos_rot))), float(np.degrees(np.arccos(cos_trans)))


def pose_accuracy(errors, thresholds: Union[float, Sequence[float]] = DEFAULT_POSE_THRESHOLD_DEG) -> pd.DataFrame:
    """Fractions of pairs with rotation, translation and both errors <= threshold.

    `errors` is a sequence of (rotation, translation) degree pairs or a
    DataFrame with rotation_error / translation_error columns.
    """
    if isinstance(errors, pd.DataFrame):
        table = errors[["rotation_error", "translation_error"]].to_numpy(dtype=np.float64)
    else:
        table = np.asarray(list(errors), dtype=np.float64).reshape(-1, 2)
    if len(table) == 0:
        raise ValueError("No pose pairs to evaluate")
    values = [float(thresholds)] if np.isscalar(thresholds) else [float(t) for t in thresholds]
    if any(v < 0 for v in values):
        raise ValueError(f"Pose thresholds must be non-negative, got {values}")

    rows = []
    for threshold in values:
        rot_ok = table[:, 0] <= threshold
        trans_ok = table[:, 1] <= threshold
        rows.append({
            "threshold": threshold,
            "rotation": float(rot_ok.mean()),
            "translation": float(trans_ok.mean()),
            "joint": float((rot_ok & trans_ok).mean()),
            "pairs": len(table),
        })
    return pd.DataFrame(rows, columns=["threshold", "rotation", "translation", "joint", "pairs"])


def estimate_relative_pose(points1, points2, intrinsics: CameraIntrinsics, cfg: Optional[RansacConfig] = None) -> Tuple[RelativePose, EssentialEstimate]:
    """Pixel correspondences -> RANSAC essential matrix -> cheirality-checked pose."""
    x1 = pixels_to_normalized(points1, intrinsics)
    x2 = pixels_to_normalized(points2, intrinsics)
    estimate = estimate_essential_ransac(x1, x2, cfg)
    pose = decompose_essential(estimate.E, x1[estimate.inliers], x2[estimate.inliers])
    return pose, estimate


# === Files ===
def _format_row(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def _write_text(path: str, text: str):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        f.write(text)
    os.replace(tmp_path, path)


def _read_numeric_rows(path: str, expected: List[int]) -> List[List[float]]:
    try:
        with open(path, "r") as f:
            lines = [(i, line.strip()) for i, line in enumerate(f, start=1)]
    except OSError as e:
        raise GeometryFileError(f"{path}: {e}") from e
    lines = [(i, line) for i, line in lines if line and not line.startswith("#")]
    if len(lines) != len(expected):
        raise GeometryFileError(f"{path}: expected {len(expected)} data lines, found {len(lines)}")
    rows = []
    for (line_no, line), width in zip(lines, expected):
        parts = line.split()
        if len(parts) != width:
            raise GeometryFileError(f"{path}:{line_no}: expected {width} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise GeometryFileError(f"{path}:{line_no}: non-numeric value in {line!r}") from None
    return rows


def write_homography_file(path: str, H: Homography) -> str:
    _write_text(path, "".join(_format_row(row) + "\n" for row in H.matrix))
    return path


def read_homography_file(path: str) -> Homography:
    rows = _read_numeric_rows(path, [3, 3, 3])
    try:
        return Homography(np.array(rows))
    except ValueError as e:
        raise GeometryFileError(f"{path}: {e}") from e


def write_pose_file(path: str, intrinsics: CameraIntrinsics, pose: RelativePose) -> str:
    lines = [_format_row([intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy])]
    lines += [_format_row(row) for row in pose.R]
    lines.append(_format_row(pose.t))
    _write_text(path, "\n".join(lines) + "\n")
    return path


def read_pose_file(path: str) -> Tuple[CameraIntrinsics, RelativePose]:
    rows = _read_numeric_rows(path, [4, 3, 3, 3, 3])
    try:
        intrinsics = CameraIntrinsics(*rows[0])
        pose = RelativePose(R=np.array(rows[1:4]), t=np.array(rows[4]))
    except ValueError as e:
        raise GeometryFileError(f"{path}: {e}") from e
    return intrinsics, pose


CURVE_COLUMNS = ["threshold", "correct", "total", "fraction"]


def write_curve_file(path: str, curve: pd.DataFrame) -> str:
    """One 'threshold correct total fraction' line per threshold."""
    lines = ["# " + " ".join(CURVE_COLUMNS)]
    for row in curve.itertuples(index=False):
        lines.append(f"{row.threshold:g} {int(row.correct)} {int(row.total)} {row.fraction:.6f}")
    _write_text(path, "\n".join(lines) + "\n")
    return path


def read_curve_file(path: str) -> pd.DataFrame:
    try:
        with open(path, "r") as f:
            lines = [(i, line.strip()) for i, line in enumerate(f, start=1)]
    except OSError as e:
        raise GeometryFileError(f"{path}: {e}") from e
    rows = []
    for line_no, line in lines:
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(CURVE_COLUMNS):
            raise GeometryFileError(f"{path}:{line_no}: expected {len(CURVE_COLUMNS)} values, found {len(parts)}")
        try:
            rows.append({"threshold": float(parts[0]), "correct": int(parts[1]), "total": int(parts[2]),
                         "fraction": float(parts[3])})
        except ValueError:
            raise GeometryFileError(f"{path}:{line_no}: non-numeric value in {line!r}") from None
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)
