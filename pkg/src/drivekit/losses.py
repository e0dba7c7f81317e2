"""Training losses as pure value-plus-gradient functions.

All per-pixel losses use mean reduction so values are resolution
independent. Gradients are taken with respect to the prediction tensors;
rotation gradients use the left-perturbation convention
R(eps) = exp(skew(eps)) @ R, so a finite-difference check perturbs eps
around zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputationError, ValidationError
from .geometry import PointMap, Pose, skew
from .metrics import NUM_CLASSES, LabelMap

PROB_EPS = 1e-7

CLASS_NAMES = ("road", "vehicle", "person", "traffic_light", "traffic_sign", "sky", "background")
DEFAULT_CLASS_WEIGHTS = (0.5, 1.2, 1.6, 1.8, 1.8, 0.3, 0.2)


@dataclass(frozen=True)
class ClassWeightTable:
    """Per-class BCE weights for the 7 semantic categories."""

    weights: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_CLASS_WEIGHTS))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (NUM_CLASSES,):
            raise ValidationError("shape_mismatch", f"class weights must have length {NUM_CLASSES}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValidationError("bad_weights", "class weights must be finite and non-negative")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class LossWeights:
    """Term weights and loss hyperparameters.

    Defaults: point/seg/motion at 1.0, confidence at 0.05, translation
    sub-weight 0.1 inside the pose term, future weighting omega = 10 on top
    of lambda_future = 1.
    """

    lambda_seg: float = 1.0
    lambda_pose: float = 1.0
    lambda_point: float = 1.0
    lambda_motion: float = 1.0
    lambda_conf: float = 0.05
    lambda_trans: float = 0.1
    lambda_future: float = 1.0
    omega: float = 10.0
    alpha: float = 1.0
    huber_delta: float = 1.0
    conf_threshold: float = 0.1

    def __post_init__(self):
        for name in (
            "lambda_seg",
            "lambda_pose",
            "lambda_point",
            "lambda_motion",
            "lambda_conf",
            "lambda_trans",
            "lambda_future",
        ):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError("bad_weights", f"{name} must be finite and non-negative")
        if not self.omega > 1.0:
            raise ValidationError("bad_weights", f"omega must be > 1, got {self.omega}")
        for name in ("alpha", "huber_delta", "conf_threshold"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ValidationError("bad_weights", f"{name} must be positive and finite")


@dataclass(frozen=True)
class PoseLossGrad:
    """Per-pose gradients: translations (N, 3) and rotation perturbations (N, 3)."""

    d_translation: np.ndarray
    d_rotation: np.ndarray


@dataclass
class LossReport:
    """Composed loss with its current/future split and per-term values."""

    total: float
    current: float
    future: float
    terms: dict[str, tuple[float, float]]
    gradients: dict[str, np.ndarray] | None = None

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "current": self.current,
            "future": self.future,
            "terms": {k: {"current": c, "future": f} for k, (c, f) in self.terms.items()},
        }


def _clamp_probs(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    active = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
    return clamped, active


def seg_loss(
    pred_probs: np.ndarray, target: LabelMap, weights: ClassWeightTable | None = None
) -> tuple[float, np.ndarray]:
    """Class-weighted multi-label BCE against a one-hot target.

    Mean over H*W*7 entries; each channel's BCE is scaled by that channel's
    class weight.
    """
    weights = weights or ClassWeightTable()
    p_raw = np.asarray(pred_probs, dtype=np.float64)
    if p_raw.ndim != 3 or p_raw.shape[2] != NUM_CLASSES:
        raise ValidationError("shape_mismatch", f"pred_probs must be (H, W, {NUM_CLASSES}), got {p_raw.shape}")
    if p_raw.shape[:2] != target.labels.shape:
        raise ValidationError("shape_mismatch", "pred_probs and target label map differ in shape")
    if np.isnan(p_raw).any():
        raise ValidationError("nan_input", "pred_probs contains NaN")
    p, active = _clamp_probs(p_raw)
    y = np.zeros_like(p)
    h, w = target.labels.shape
    y[np.arange(h)[:, None], np.arange(w)[None, :], target.labels] = 1.0
    wc = weights.weights[None, None, :]
    count = p.size
    value = float(np.sum(-wc * (y * np.log(p) + (1.0 - y) * np.log1p(-p))) / count)
    grad = np.where(active, wc * (p - y) / (p * (1.0 - p)) / count, 0.0)
    return value, grad


def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _huber_deriv(r: np.ndarray, delta: float) -> np.ndarray:
    return np.where(np.abs(r) <= delta, r, delta * np.sign(r))


def _pair_set(n: int, pairs: str) -> list[tuple[int, int]]:
    if pairs == "consecutive":
        return [(i, i + 1) for i in range(n - 1)]
    if pairs == "all":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    raise ValidationError("bad_pairs", f"pair set must be 'consecutive' or 'all', got '{pairs}'")


def pose_loss(
    pred: list[Pose],
    target: list[Pose],
    pairs: str = "consecutive",
    delta: float = 1.0,
    lambda_trans: float = 0.1,
) -> tuple[float, PoseLossGrad]:
    """Relative-pose consistency: geodesic rotation error plus Huber translation error.

    Relative transforms T_i^-1 T_j are built for every pair in the pair set
    and compared against the targets; the value is
    mean(theta) + lambda_trans * mean(huber(residual components)).
    """
    n = len(pred)
    if n != len(target):
        raise ValidationError("length_mismatch", f"pose lists differ in length: {n} vs {len(target)}")
    if n < 2:
        raise ValidationError("too_few_points", "pose loss needs at least 2 poses")
    pair_list = _pair_set(n, pairs)
    n_pairs = len(pair_list)
    n_comp = 3 * n_pairs

    rot_sum = 0.0
    trans_sum = 0.0
    grad_t = np.zeros((n, 3))
    grad_r = np.zeros((n, 3))
    for i, j in pair_list:
        ri, rj = pred[i].rotation, pred[j].rotation
        drel_t = target[i].rotation.T @ target[j].rotation
        a = (ri.T @ rj).T @ drel_t
        cos_theta = min(1.0, max(-1.0, 0.5 * (float(np.trace(a)) - 1.0)))
        theta = math.acos(cos_theta)
        rot_sum += theta
        sin_theta = math.sin(theta)
        if sin_theta > 1e-9:
            b = ri @ drel_t @ rj.T
            wvec = np.array([b[1, 2] - b[2, 1], b[2, 0] - b[0, 2], b[0, 1] - b[1, 0]])
            dtheta = wvec / (2.0 * sin_theta * n_pairs)
            grad_r[i] -= dtheta
            grad_r[j] += dtheta
        # else: theta at 0 or pi, not differentiable; subgradient 0

        d = pred[j].translation - pred[i].translation
        resid = ri.T @ d - (target[i].rotation.T @ (target[j].translation - target[i].translation))
        trans_sum += float(_huber(resid, delta).sum())
        hp = _huber_deriv(resid, delta) / n_comp
        grad_t[j] += lambda_trans * (ri @ hp)
        grad_t[i] -= lambda_trans * (ri @ hp)
        grad_r[i] += lambda_trans * (-skew(d) @ (ri @ hp))

    value = rot_sum / n_pairs + lambda_trans * trans_sum / n_comp
    return value, PoseLossGrad(d_translation=grad_t, d_rotation=grad_r)


def point_loss(pred: PointMap, target: PointMap, alpha: float = 1.0) -> tuple[float, np.ndarray]:
    """Scaled L1: alpha * mean |pred - target| over jointly-valid pixel coordinates."""
    if pred.points.shape != target.points.shape:
        raise ValidationError("shape_mismatch", "point maps differ in shape")
    joint = pred.validity & target.validity
    count = int(joint.sum()) * 3
    if count == 0:
        raise ComputationError("empty_valid_set", "no jointly-valid pixels")
    diff = np.where(joint[..., None], pred.points - target.points, 0.0)
    value = alpha * float(np.abs(diff).sum()) / count
    grad = alpha * np.sign(diff) / count
    return value, grad


def confidence_target(
    pred_points: PointMap, target_points: PointMap, threshold: float
) -> np.ndarray:
    """Binary high-confidence grid: 1 where the point error is strictly below threshold.

    Pixels invalid in either map are 0; exclude them downstream via the
    joint validity mask.
    """
    if pred_points.points.shape != target_points.points.shape:
        raise ValidationError("shape_mismatch", "point maps differ in shape")
    joint = pred_points.validity & target_points.validity
    err = np.linalg.norm(
        np.where(joint[..., None], pred_points.points - target_points.points, 0.0), axis=2
    )
    return ((err < threshold) & joint).astype(np.float64)


def binary_ce(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over masked pixels, with gradient."""
    p_raw = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if p_raw.shape != y.shape or p_raw.shape != m.shape:
        raise ValidationError("shape_mismatch", "pred, target, and mask must share a shape")
    if np.isnan(p_raw).any():
        raise ValidationError("nan_input", "pred contains NaN")
    count = int(m.sum())
    if count == 0:
        raise ComputationError("empty_mask", "mask selects no pixels")
    p, active = _clamp_probs(p_raw)
    bce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    value = float(bce[m].sum() / count)
    grad = np.where(m & active, (p - y) / (p * (1.0 - p)) / count, 0.0)
    return value, grad


LOSS_TERM_NAMES = ("seg", "pose", "point", "motion", "conf")


def _weighted_sum(terms: dict, weights: LossWeights, side: str) -> float:
    lam = {
        "seg": weights.lambda_seg,
        "pose": weights.lambda_pose,
        "point": weights.lambda_point,
        "motion": weights.lambda_motion,
        "conf": weights.lambda_conf,
    }
    total = 0.0
    for name, v in terms.items():
        if name not in lam:
            raise ValidationError("unknown_term", f"unknown loss term '{name}'")
        if not math.isfinite(v):
            raise ComputationError("nonfinite_term", f"loss term '{name}' ({side}) is {v}")
        total += lam[name] * v
    return total


def total_loss(current_terms: dict, future_terms: dict, weights: LossWeights) -> LossReport:
    """Compose per-term losses into the training objective.

    total = current + lambda_future * future, where the future side is the
    weighted term sum additionally scaled by omega.
    """
    current = _weighted_sum(current_terms, weights, "current")
    future = weights.omega * _weighted_sum(future_terms, weights, "future")
    names = sorted(set(current_terms) | set(future_terms))
    terms = {
        name: (float(current_terms.get(name, 0.0)), float(future_terms.get(name, 0.0)))
        for name in names
    }
    return LossReport(
        total=current + weights.lambda_future * future,
        current=current,
        future=future,
        terms=terms,
    )


def gradient_check_report(seed: int, trials: int = 10, step: float = 1e-5, rel_tol: float = 1e-4) -> dict:
    """Finite-difference verification of every analytic gradient in this module.

    Random instances are drawn away from L1/Huber kinks and BCE clamps.
    Returns a JSON-ready report; overall "pass" is False if any loss
    exceeds rel_tol.
    """
    rng = np.random.default_rng(seed)
    report: dict = {"seed": int(seed), "step": step, "rel_tol": rel_tol, "losses": {}}

    def entry(worst: float) -> dict:
        return {"max_rel_err": float(worst), "pass": bool(worst < rel_tol)}

    def fd_max_rel_err(fn, x0: np.ndarray, grad: np.ndarray, n_coords: int) -> float:
        flat = x0.reshape(-1)
        gflat = grad.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = fn(x0)
            flat[c] = orig - step
            f_minus = fn(x0)
            flat[c] = orig
            num = (f_plus - f_minus) / (2 * step)
            denom = max(abs(num), abs(gflat[c]), 1e-8)
            worst = max(worst, abs(num - gflat[c]) / denom)
        return worst

    # segmentation BCE
    worst = 0.0
    for _ in range(trials):
        h, w = 4, 5
        probs = rng.uniform(0.05, 0.95, size=(h, w, NUM_CLASSES))
        target = LabelMap(rng.integers(0, NUM_CLASSES, size=(h, w)))
        _, grad = seg_loss(probs, target)
        worst = max(worst, fd_max_rel_err(lambda p: seg_loss(p, target)[0], probs, grad, 8))
    report["losses"]["seg"] = entry(worst)

    # pose loss: perturb translations and rotation parameters
    from .geometry import rotation_from_rotvec

    worst = 0.0
    for _ in range(trials):
        n = 4
        pred = [
            Pose(rotation_from_rotvec(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3)) for _ in range(n)
        ]
        target = [
            Pose(rotation_from_rotvec(rng.uniform(-1, 1, 3)), rng.uniform(-2, 2, 3)) for _ in range(n)
        ]
        _, grad = pose_loss(pred, target)
        for k in range(n):
            for axis in range(3):
                t_plus = [p for p in pred]
                t_minus = [p for p in pred]
                shift = np.zeros(3)
                shift[axis] = step
                t_plus[k] = Pose(pred[k].rotation, pred[k].translation + shift)
                t_minus[k] = Pose(pred[k].rotation, pred[k].translation - shift)
                num = (pose_loss(t_plus, target)[0] - pose_loss(t_minus, target)[0]) / (2 * step)
                denom = max(abs(num), abs(grad.d_translation[k, axis]), 1e-8)
                worst = max(worst, abs(num - grad.d_translation[k, axis]) / denom)

                eps = np.zeros(3)
                eps[axis] = step
                r_plus = [p for p in pred]
                r_minus = [p for p in pred]
                r_plus[k] = Pose(rotation_from_rotvec(eps) @ pred[k].rotation, pred[k].translation)
                r_minus[k] = Pose(rotation_from_rotvec(-eps) @ pred[k].rotation, pred[k].translation)
                num = (pose_loss(r_plus, target)[0] - pose_loss(r_minus, target)[0]) / (2 * step)
                denom = max(abs(num), abs(grad.d_rotation[k, axis]), 1e-8)
                worst = max(worst, abs(num - grad.d_rotation[k, axis]) / denom)
    report["losses"]["pose"] = entry(worst)

    # scaled L1 point loss, away from zero residuals
    worst = 0.0
    for _ in range(trials):
        h, w = 4, 4
        base = rng.uniform(-1, 1, size=(h, w, 3))
        offset = rng.uniform(0.1, 0.5, size=(h, w, 3)) * np.where(rng.random((h, w, 3)) < 0.5, -1, 1)
        valid = rng.random((h, w)) < 0.8
        valid[0, 0] = True
        pred_pm = PointMap(base + offset, valid)
        target_pm = PointMap(base, valid)
        _, grad = point_loss(pred_pm, target_pm, alpha=1.0)

        def f(pts, v=valid, tgt=target_pm):
            return point_loss(PointMap(pts, v), tgt, alpha=1.0)[0]

        worst = max(worst, fd_max_rel_err(f, pred_pm.points.copy(), grad, 8))
    report["losses"]["point"] = entry(worst)

    # binary cross-entropy (confidence and motion supervision)
    worst = 0.0
    for _ in range(trials):
        h, w = 5, 5
        p = rng.uniform(0.05, 0.95, size=(h, w))
        y = (rng.random((h, w)) < 0.5).astype(np.float64)
        m = rng.random((h, w)) < 0.8
        m[0, 0] = True
        _, grad = binary_ce(p, y, m)
        worst = max(worst, fd_max_rel_err(lambda q: binary_ce(q, y, m)[0], p, grad, 8))
    report["losses"]["binary_ce"] = entry(worst)

    report["pass"] = all(e["pass"] for e in report["losses"].values())
    return report
