"""Rigid-transform algebra, point-map sampling, and sequence normalization.

Conventions used throughout the toolkit:
  - A pose T maps local coordinates into the world frame: x_w = R x + t.
  - The relative pose between frames i and j is T_i^-1 * T_j, i.e. it
    expresses frame-j coordinates in frame i.
  - Point maps carry a per-pixel validity grid; invalid pixels are ignored
    by sampling and statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ComputationError, ValidationError

ROTATION_TOL = 1e-6


def _as_float(a, shape, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError("shape_mismatch", f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate that r is a proper rotation (orthonormal, det +1)."""
    r = _as_float(r, (3, 3), "rotation")
    if not np.isfinite(r).all():
        raise ValidationError("bad_rotation", "rotation contains non-finite entries")
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise ValidationError("bad_rotation", f"rotation is not orthonormal (max |R R^T - I| = {err:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > 10 * tol:
        raise ValidationError("bad_rotation", f"rotation determinant is {det:.6f}, expected +1")
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = _as_float(self.translation, (3,), "translation")
        if not np.isfinite(t).all():
            raise ValidationError("bad_translation", "translation contains non-finite entries")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = _as_float(m, (4, 4), "pose matrix")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-6:
            raise ValidationError("bad_pose_matrix", "last row of a pose matrix must be [0, 0, 0, 1]")
        return Pose(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Return the pose a * b (apply b first, then a)."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def relative_pose(from_i: Pose, to_j: Pose) -> Pose:
    """Relative transform T_i^-1 * T_j: frame-j coordinates expressed in frame i."""
    return compose(invert(from_i), to_j)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_rotvec(v) -> np.ndarray:
    """Rodrigues formula: rotation matrix for an axis-angle vector."""
    v = _as_float(v, (3,), "rotation vector")
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        k = skew(v)
        return np.eye(3) + k + 0.5 * k @ k
    k = skew(v / angle)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def geodesic_rotation_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation between r1 and r2.

    The arccos argument is clamped to [-1, 1] to absorb round-off of up to
    1e-6; anything further out is rejected.
    """
    r1 = check_rotation(r1)
    r2 = check_rotation(r2)
    trace = float(np.trace(r1.T @ r2))
    if trace < -1.0 - ROTATION_TOL or trace > 3.0 + ROTATION_TOL:
        raise ValidationError("bad_rotation", f"trace {trace:.6f} outside [-1, 3] for a rotation product")
    cos_theta = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    return math.acos(cos_theta)


@dataclass(frozen=True)
class PointMap:
    """Per-pixel 3D points (H, W, 3) in meters with an (H, W) validity grid."""

    points: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValidationError("shape_mismatch", f"points must be (H, W, 3), got {pts.shape}")
        val = np.asarray(self.validity, dtype=bool)
        if val.shape != pts.shape[:2]:
            raise ValidationError("shape_mismatch", f"validity {val.shape} does not match points {pts.shape[:2]}")
        if not np.isfinite(pts[val]).all():
            raise ValidationError("bad_points", "valid point entries must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "validity", val)

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]


def sample_point_map(pm: PointMap, pixel) -> tuple[np.ndarray, bool]:
    """Bilinearly sample a point map at subpixel coordinates (x, y).

    Neighbors with zero interpolation weight do not contribute, so samples
    at grid nodes reproduce the stored point bit-exactly. The returned flag
    is False (and the point is zero) if any contributing neighbor is
    invalid.
    """
    x, y = float(pixel[0]), float(pixel[1])
    h, w = pm.height, pm.width
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValidationError("out_of_bounds", f"pixel ({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0 = min(int(math.floor(x)), w - 1)
    y0 = min(int(math.floor(y)), h - 1)
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    contributing = [
        (yy, xx, wgt)
        for yy, xx, wgt in (
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        )
        if wgt > 0.0
    ]
    for yy, xx, _ in contributing:
        if not pm.validity[yy, xx]:
            return np.zeros(3), False
    yy, xx, wgt = contributing[0]
    out = wgt * pm.points[yy, xx]
    for yy, xx, wgt in contributing[1:]:
        out = out + wgt * pm.points[yy, xx]
    return out, True


@dataclass(frozen=True)
class FrameSequence:
    """A sequence of N observed plus M future frames with optional modalities.

    Each supplied modality list must cover all N+M frames (observed frames
    first). Semantic maps are (H, W, 7) probabilities, confidence and motion
    grids are (H, W) reals; they ride along untouched by geometry ops.
    """

    num_observed: int
    num_future: int
    point_maps: list | None = None
    poses: list | None = None
    semantics: list | None = None
    confidences: list | None = None
    motions: list | None = None

    def __post_init__(self):
        if self.num_observed < 0 or self.num_future < 0:
            raise ValidationError("bad_frame_counts", "frame counts must be non-negative")
        total = self.num_observed + self.num_future
        if total == 0:
            raise ValidationError("bad_frame_counts", "sequence must contain at least one frame")
        for name in ("point_maps", "poses", "semantics", "confidences", "motions"):
            mod = getattr(self, name)
            if mod is not None and len(mod) != total:
                raise ValidationError(
                    "bad_frame_counts", f"{name} has {len(mod)} entries, expected N+M={total}"
                )

    @property
    def num_frames(self) -> int:
        return self.num_observed + self.num_future


def scale_geometry(seq: FrameSequence, factor: float) -> FrameSequence:
    """Divide all point coordinates and pose translations by factor."""
    if not math.isfinite(factor) or factor <= 0.0:
        raise ValidationError("bad_scale", f"scale factor must be positive and finite, got {factor}")
    point_maps = None
    if seq.point_maps is not None:
        point_maps = [PointMap(pm.points / factor, pm.validity) for pm in seq.point_maps]
    poses = None
    if seq.poses is not None:
        poses = [Pose(p.rotation, p.translation / factor) for p in seq.poses]
    return replace(seq, point_maps=point_maps, poses=poses)


def normalize_geometry(seq: FrameSequence) -> tuple[FrameSequence, float]:
    """Rescale a sequence so the mean norm of valid points is 1.

    Returns the normalized sequence and the scale that was divided out;
    multiplying the outputs by the scale recovers the inputs.
    """
    if seq.point_maps is None:
        raise ComputationError("no_valid_points", "sequence has no point maps to normalize")
    norms = [
        np.linalg.norm(pm.points[pm.validity], axis=1)
        for pm in seq.point_maps
        if pm.validity.any()
    ]
    if not norms:
        raise ComputationError("no_valid_points", "sequence has no valid points")
    scale = float(np.mean(np.concatenate(norms)))
    if scale <= 0.0:
        raise ComputationError("no_valid_points", "all valid points sit at the origin")
    return scale_geometry(seq, scale), scale
