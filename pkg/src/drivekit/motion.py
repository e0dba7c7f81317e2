"""Label-free motion-mask generation from instance tracks and point maps.

Tracked 2D keypoints are backprojected through per-frame point maps, the
per-instance mean 3D position is differenced over time, and instances whose
displacement exceeds a threshold often enough are marked dynamic. Dynamic
instances' per-frame masks are unioned into dense motion masks.

Point maps are assumed to live in a shared world frame; pass per-frame
poses to stabilize camera-frame maps first, otherwise ego-motion would make
the entire static scene appear dynamic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ComputationError, DrivekitError, ValidationError
from .geometry import PointMap, Pose, sample_point_map

MOTION_RULES = ("majority", "k_min")


@dataclass(frozen=True)
class MotionConfig:
    """Displacement threshold (normalized space) and the dynamic-decision rule."""

    tau_motion: float = 0.1
    k_min: int = 1
    rule: str = "majority"
    grid_size: int = 80

    def __post_init__(self):
        if not self.tau_motion > 0:
            raise ValidationError("bad_config", f"tau_motion must be positive, got {self.tau_motion}")
        if self.k_min < 1:
            raise ValidationError("bad_config", f"k_min must be >= 1, got {self.k_min}")
        if self.rule not in MOTION_RULES:
            raise ValidationError("bad_config", f"rule must be one of {MOTION_RULES}, got '{self.rule}'")
        if self.grid_size < 1:
            raise ValidationError("bad_config", f"grid_size must be >= 1, got {self.grid_size}")


@dataclass(frozen=True)
class InstanceTrack:
    """One tracked object: per-frame keypoints, visibility, and instance masks."""

    instance_id: int
    keypoints: np.ndarray  # (T, K, 2) subpixel (x, y)
    visibility: np.ndarray  # (T, K) bool
    masks: np.ndarray  # (T, H, W) bool; masks[0] is the first-frame mask

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=bool)
        masks = np.asarray(self.masks, dtype=bool)
        if kp.ndim != 3 or kp.shape[2] != 2:
            raise ValidationError("shape_mismatch", f"keypoints must be (T, K, 2), got {kp.shape}")
        if vis.shape != kp.shape[:2]:
            raise ValidationError("shape_mismatch", f"visibility {vis.shape} does not match keypoints")
        if masks.ndim != 3 or masks.shape[0] != kp.shape[0]:
            raise ValidationError(
                "shape_mismatch", f"masks must cover all {kp.shape[0]} frames, got shape {masks.shape}"
            )
        if not vis[0].any():
            raise ValidationError("bad_track", f"instance {self.instance_id} has no visible keypoint in frame 1")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "masks", masks)

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def first_frame_mask(self) -> np.ndarray:
        return self.masks[0]


@dataclass(frozen=True)
class MotionMask:
    """Per-pixel dynamic-region values in [0, 1] (binary for pseudo ground truth)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("shape_mismatch", f"motion mask must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise ValidationError("bad_mask", "motion mask values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class InstanceMotion:
    """Per-instance pipeline result used for summaries and rasterization."""

    instance_id: int
    displacements: np.ndarray
    dynamic: bool


def instance_centroids(
    track: InstanceTrack, point_maps: list[PointMap], poses: list[Pose] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame mean 3D position over visible, validly-sampled keypoints.

    Keypoints falling outside the image or on invalid point-map pixels are
    skipped; a frame with no usable keypoint is flagged invalid. With poses
    given, centroids are mapped into the world frame.
    """
    if len(point_maps) != track.num_frames:
        raise ValidationError(
            "length_mismatch",
            f"track has {track.num_frames} frames but {len(point_maps)} point maps were given",
        )
    if poses is not None and len(poses) != track.num_frames:
        raise ValidationError("length_mismatch", "poses must cover every track frame")
    centroids = np.zeros((track.num_frames, 3))
    valid = np.zeros(track.num_frames, dtype=bool)
    for t, pm in enumerate(point_maps):
        pts = []
        for k in range(track.keypoints.shape[1]):
            if not track.visibility[t, k]:
                continue
            x, y = track.keypoints[t, k]
            if not (0.0 <= x <= pm.width - 1 and 0.0 <= y <= pm.height - 1):
                continue
            point, ok = sample_point_map(pm, (x, y))
            if ok:
                pts.append(point)
        if pts:
            centroid = np.mean(pts, axis=0)
            if poses is not None:
                centroid = poses[t].transform(centroid)
            centroids[t] = centroid
            valid[t] = True
    if not valid.any():
        raise ComputationError("unusable_track", f"instance {track.instance_id} has no valid frame")
    return centroids, valid


def displacement_series(centroids: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Euclidean displacements between consecutive valid centroids.

    Invalid frames create gaps: no entry is emitted across them, so
    occlusion never fakes motion.
    """
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValidationError("shape_mismatch", f"centroids must be (T, 3), got {c.shape}")
    v = np.ones(c.shape[0], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if v.shape != (c.shape[0],):
        raise ValidationError("shape_mismatch", "validity must have one flag per frame")
    out = [
        float(np.linalg.norm(c[t + 1] - c[t]))
        for t in range(c.shape[0] - 1)
        if v[t] and v[t + 1]
    ]
    if not out:
        raise ComputationError("insufficient_frames", "need at least 2 consecutive valid frames")
    return np.array(out)


def classify_dynamic(displacements: np.ndarray, cfg: MotionConfig) -> bool:
    """Dynamic decision: threshold exceedances counted under the configured rule.

    The comparison is strict, so zero motion stays static even at tau = 0+.
    """
    d = np.asarray(displacements, dtype=np.float64)
    if d.size == 0:
        raise ValidationError("empty_series", "displacement series is empty")
    count = int((d > cfg.tau_motion).sum())
    if cfg.rule == "k_min":
        return count >= cfg.k_min
    return 2 * count > d.size


def rasterize_motion_masks(
    tracks: list[InstanceTrack], labels: list[bool], num_frames: int, shape: tuple[int, int]
) -> list[MotionMask]:
    """Union the per-frame masks of dynamic instances into dense motion masks."""
    if len(tracks) != len(labels):
        raise ValidationError("length_mismatch", "one dynamic label per track is required")
    out = []
    for t in range(num_frames):
        acc = np.zeros(shape, dtype=bool)
        for track, dynamic in zip(tracks, labels):
            if not dynamic:
                continue
            if track.masks.shape[1:] != shape:
                raise ValidationError(
                    "shape_mismatch",
                    f"instance {track.instance_id} masks have shape {track.masks.shape[1:]}, expected {shape}",
                )
            acc |= track.masks[t]
        out.append(MotionMask(acc.astype(np.float64)))
    return out


def analyze_tracks(
    tracks: list[InstanceTrack],
    point_maps: list[PointMap],
    cfg: MotionConfig,
    poses: list[Pose] | None = None,
) -> list[InstanceMotion]:
    """Centroid, displacement, and dynamic classification for every track.

    Tracks are processed in instance-id order; errors are re-raised with the
    offending instance id attached.
    """
    results = []
    for track in sorted(tracks, key=lambda tr: tr.instance_id):
        try:
            centroids, valid = instance_centroids(track, point_maps, poses)
            d = displacement_series(centroids, valid)
            dynamic = classify_dynamic(d, cfg)
        except DrivekitError as e:
            raise type(e)(e.code, f"instance {track.instance_id}: {e.message}") from e
        results.append(InstanceMotion(instance_id=track.instance_id, displacements=d, dynamic=dynamic))
    return results


def generate_pseudo_gt(
    tracks: list[InstanceTrack],
    point_maps: list[PointMap],
    cfg: MotionConfig,
    poses: list[Pose] | None = None,
) -> list[MotionMask]:
    """End-to-end pseudo ground truth: dense binary motion masks per frame."""
    if not point_maps:
        raise ValidationError("bad_frame_counts", "at least one point map is required")
    shape = (point_maps[0].height, point_maps[0].width)
    num_frames = len(point_maps)
    for track in tracks:
        if track.num_frames != num_frames:
            raise ValidationError(
                "length_mismatch",
                f"instance {track.instance_id} covers {track.num_frames} frames, expected {num_frames}",
            )
    motions = analyze_tracks(tracks, point_maps, cfg, poses)
    order = {m.instance_id: m.dynamic for m in motions}
    ordered_tracks = sorted(tracks, key=lambda tr: tr.instance_id)
    labels = [order[tr.instance_id] for tr in ordered_tracks]
    return rasterize_motion_masks(ordered_tracks, labels, num_frames, shape)


def motion_summary(motions: list[InstanceMotion], cfg: MotionConfig) -> dict:
    """JSON-ready per-instance displacement statistics and dynamic labels."""
    return {
        "tau_motion": cfg.tau_motion,
        "rule": cfg.rule,
        "instances": [
            {
                "instance_id": m.instance_id,
                "dynamic": m.dynamic,
                "num_displacements": int(m.displacements.size),
                "mean_displacement": float(m.displacements.mean()),
                "max_displacement": float(m.displacements.max()),
                "exceed_count": int((m.displacements > cfg.tau_motion).sum()),
            }
            for m in motions
        ],
    }
