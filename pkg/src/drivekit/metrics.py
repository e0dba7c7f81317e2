"""Evaluation protocols: depth, trajectory, and semantic segmentation.

Depth metrics are computed after a closed-form scale-and-shift alignment,
trajectory metrics after a (by default similarity) Umeyama alignment, and
segmentation metrics from a pooled 7-class confusion matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ComputationError, ValidationError
from .geometry import Pose, geodesic_rotation_distance, relative_pose

NUM_CLASSES = 7


@dataclass(frozen=True)
class DepthMap:
    """Metric depth grid (H, W) with a validity grid of the same shape."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2:
            raise ValidationError("shape_mismatch", f"depth must be 2-D, got shape {d.shape}")
        if v.shape != d.shape:
            raise ValidationError("shape_mismatch", f"validity {v.shape} does not match depth {d.shape}")
        if not np.isfinite(d[v]).all():
            raise ValidationError("bad_depth", "valid depth entries must be finite")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)

    def require_positive(self) -> "DepthMap":
        """Reject maps whose valid depths are not strictly positive."""
        if (self.depth[self.valid] <= 0).any():
            raise ValidationError("bad_depth", "valid depths must be strictly positive")
        return self


@dataclass(frozen=True)
class LabelMap:
    """Grid of semantic class indices in [0, 7)."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError("shape_mismatch", f"labels must be 2-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValidationError("bad_labels", f"labels must be integers, got dtype {lab.dtype}")
        if lab.size and (lab.min() < 0 or lab.max() >= NUM_CLASSES):
            raise ValidationError("bad_labels", f"label indices must lie in [0, {NUM_CLASSES})")
        object.__setattr__(self, "labels", lab.astype(np.int64))


@dataclass(frozen=True)
class SegScores:
    pixel_accuracy: float
    mean_iou: float
    mean_dice: float
    fw_iou: float

    def to_json_dict(self) -> dict:
        return {
            "pa": self.pixel_accuracy,
            "miou": self.mean_iou,
            "mdice": self.mean_dice,
            "fwiou": self.fw_iou,
        }


@dataclass(frozen=True)
class TrajScores:
    ate: float
    rot: float
    trans: float

    def to_json_dict(self) -> dict:
        return {"ate_m": self.ate, "rot_deg": self.rot, "trans_m": self.trans}


def align_depth_scale_shift(pred: DepthMap, gt: DepthMap) -> tuple[float, float, DepthMap]:
    """Least-squares (s, t) minimizing sum((s*pred + t - gt)^2) over joint-valid pixels.

    Returns (s, t, aligned) where aligned applies s*pred + t to the whole
    prediction and keeps the joint validity mask.
    """
    if pred.depth.shape != gt.depth.shape:
        raise ValidationError("shape_mismatch", "pred and gt depth maps differ in shape")
    joint = pred.valid & gt.valid
    n = int(joint.sum())
    if n < 2:
        raise ComputationError("insufficient_valid", f"need >= 2 jointly-valid pixels, got {n}")
    p = pred.depth[joint]
    g = gt.depth[joint]
    p_mean = p.mean()
    g_mean = g.mean()
    pc = p - p_mean
    var = float(pc @ pc)
    if np.all(p == p[0]) or var <= 1e-15 * n * (1.0 + p_mean * p_mean):
        raise ComputationError("singular_system", "prediction is constant over the valid set")
    s = float(pc @ (g - g_mean)) / var
    t = float(g_mean - s * p_mean)
    aligned = DepthMap(s * pred.depth + t, joint)
    return s, t, aligned


def depth_metrics(aligned: DepthMap, gt: DepthMap) -> tuple[float, float]:
    """AbsRel and RMSE (meters) over jointly-valid pixels."""
    if aligned.depth.shape != gt.depth.shape:
        raise ValidationError("shape_mismatch", "aligned and gt depth maps differ in shape")
    joint = aligned.valid & gt.valid
    if not joint.any():
        raise ComputationError("empty_valid_set", "no jointly-valid pixels")
    a = aligned.depth[joint]
    g = gt.depth[joint]
    if (g <= 0).any():
        raise ValidationError("bad_depth", "ground-truth depths must be positive on the valid set")
    abs_rel = float(np.mean(np.abs(a - g) / g))
    rmse = float(np.sqrt(np.mean((a - g) ** 2)))
    return abs_rel, rmse


def umeyama_align(
    pred: np.ndarray, gt: np.ndarray, with_scale: bool = True
) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form similarity (or rigid) transform minimizing sum ||s R p + t - g||^2.

    Returns (s, R, t) with det(R) = +1; s is 1 when with_scale is False.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValidationError("shape_mismatch", f"expected matching (N, 3) arrays, got {p.shape} and {g.shape}")
    n = p.shape[0]
    if n < 3:
        raise ValidationError("too_few_points", f"need >= 3 points, got {n}")
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    cov = gc.T @ pc / n
    u, d, vt = np.linalg.svd(cov)
    sgn = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2] = -1.0
    rot = u @ np.diag(sgn) @ vt
    if with_scale:
        var_p = float((pc * pc).sum()) / n
        if var_p <= 0:
            raise ComputationError("singular_system", "source points are all identical")
        s = float(d @ sgn) / var_p
    else:
        s = 1.0
    t = mu_g - s * rot @ mu_p
    return s, rot, t


def trajectory_scores(pred: list[Pose], gt: list[Pose], with_scale: bool = True) -> TrajScores:
    """ATE after Umeyama position alignment plus consecutive relative-pose errors.

    Rot is the mean geodesic error (degrees) between consecutive relative
    rotations; Trans the mean Euclidean error (meters) between consecutive
    relative translations with the alignment scale applied to the prediction.
    """
    if len(pred) != len(gt):
        raise ValidationError("length_mismatch", f"pose lists differ in length: {len(pred)} vs {len(gt)}")
    pred_pos = np.array([p.translation for p in pred])
    gt_pos = np.array([p.translation for p in gt])
    s, rot, t = umeyama_align(pred_pos, gt_pos, with_scale=with_scale)
    residuals = pred_pos @ (s * rot).T + t - gt_pos
    ate = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))

    rot_errs = []
    trans_errs = []
    for i in range(len(pred) - 1):
        rel_p = relative_pose(pred[i], pred[i + 1])
        rel_g = relative_pose(gt[i], gt[i + 1])
        rot_errs.append(math.degrees(geodesic_rotation_distance(rel_p.rotation, rel_g.rotation)))
        trans_errs.append(float(np.linalg.norm(s * rel_p.translation - rel_g.translation)))
    return TrajScores(ate=ate, rot=float(np.mean(rot_errs)), trans=float(np.mean(trans_errs)))


def confusion_matrix(pred: LabelMap, gt: LabelMap) -> np.ndarray:
    """7x7 confusion counts, rows ground truth, columns prediction."""
    if pred.labels.shape != gt.labels.shape:
        raise ValidationError("shape_mismatch", "pred and gt label maps differ in shape")
    idx = NUM_CLASSES * gt.labels.ravel() + pred.labels.ravel()
    return np.bincount(idx, minlength=NUM_CLASSES**2).reshape(NUM_CLASSES, NUM_CLASSES)


def scores_from_confusion(cm: np.ndarray, absent_classes: str = "exclude") -> SegScores:
    """Segmentation scores from a confusion matrix.

    ``absent_classes`` picks how classes missing from both prediction and
    ground truth enter the mIoU/mDice means: "exclude" drops them (default),
    "zero" and "one" count them at that score. FW-IoU weights per-class IoU
    by ground-truth frequency.
    """
    if absent_classes not in ("exclude", "zero", "one"):
        raise ValidationError("bad_config", f"absent_classes must be exclude/zero/one, got '{absent_classes}'")
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ComputationError("empty_valid_set", "confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    pa = float(tp.sum() / total)

    union = tp + fp + fn
    present = union > 0
    fill = 1.0 if absent_classes == "one" else 0.0
    iou = np.full(NUM_CLASSES, fill)
    dice = np.full(NUM_CLASSES, fill)
    iou[present] = tp[present] / union[present]
    dice[present] = 2 * tp[present] / (2 * tp[present] + fp[present] + fn[present])
    if absent_classes == "exclude":
        miou = float(iou[present].mean())
        mdice = float(dice[present].mean())
    else:
        miou = float(iou.mean())
        mdice = float(dice.mean())

    # single final division keeps fw_iou exactly 1.0 for a perfect prediction
    gt_counts = cm.sum(axis=1)
    in_gt = gt_counts > 0
    fwiou = float((gt_counts[in_gt] * iou[in_gt]).sum() / total)
    return SegScores(pixel_accuracy=pa, mean_iou=miou, mean_dice=mdice, fw_iou=fwiou)


def seg_scores(pred: LabelMap, gt: LabelMap, absent_classes: str = "exclude") -> SegScores:
    return scores_from_confusion(confusion_matrix(pred, gt), absent_classes=absent_classes)


def static_baseline(seq_gt: list[LabelMap], split_index: int) -> SegScores:
    """Score the last observed ground-truth map as the prediction for all later frames.

    Confusion matrices of the future frames are pooled before scoring.
    """
    if not (1 <= split_index < len(seq_gt)):
        raise ValidationError(
            "bad_split", f"split_index must be in [1, {len(seq_gt) - 1}], got {split_index}"
        )
    frozen = seq_gt[split_index - 1]
    pooled = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for future in seq_gt[split_index:]:
        pooled += confusion_matrix(frozen, future)
    return scores_from_confusion(pooled)
