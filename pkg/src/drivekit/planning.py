"""Anchor-based plan decoding and scenario scoring.

Plans are 8 planar waypoints at 0.5 s spacing (a 4 s horizon) in the ego
frame at t = 0. Anchors come from seeded k-means over ground-truth futures;
a prediction supplies per-mode confidences and waypoint offsets, and the
argmax mode decodes to the final plan.

Scenario scoring sweeps the ego footprint along the plan at 0.1 s sub-steps
and composes the driver-model score from five subscores: the no-collision
and drivable-area terms gate (multiply) a weighted mean of ego progress,
time-to-collision, and comfort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LineString, Point, Polygon

from .errors import ComputationError, ValidationError

NUM_WAYPOINTS = 8
WAYPOINT_DT_S = 0.5
SUBSTEP_S = 0.1  # sweep resolution; waypoint spacing alone would tunnel through thin agents

PDMS_EP_WEIGHT = 5.0
PDMS_TTC_WEIGHT = 5.0
PDMS_COMFORT_WEIGHT = 2.0


@dataclass(frozen=True)
class PlanTrajectory:
    """8 planar waypoints (meters) at 0.5 s intervals in the ego frame."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.shape != (NUM_WAYPOINTS, 2):
            raise ValidationError("shape_mismatch", f"plan must have shape ({NUM_WAYPOINTS}, 2), got {w.shape}")
        if not np.isfinite(w).all():
            raise ValidationError("bad_plan", "waypoints must be finite")
        object.__setattr__(self, "waypoints", w)

    def headings(self) -> np.ndarray:
        """Heading at waypoint i is the direction of segment i -> i+1.

        The last waypoint inherits its predecessor's heading; degenerate
        zero-length segments carry the previous heading forward (0 if the
        very first segment is degenerate, i.e. pointing along +x).
        """
        h = np.zeros(NUM_WAYPOINTS)
        prev = 0.0
        for i in range(NUM_WAYPOINTS - 1):
            d = self.waypoints[i + 1] - self.waypoints[i]
            if d[0] != 0.0 or d[1] != 0.0:
                prev = math.atan2(d[1], d[0])
            h[i] = prev
        h[NUM_WAYPOINTS - 1] = h[NUM_WAYPOINTS - 2]
        return h


@dataclass(frozen=True)
class AnchorSet:
    """K reference trajectories plus the seed they were clustered with."""

    anchors: np.ndarray  # (K, 8, 2)
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 3 or a.shape[1:] != (NUM_WAYPOINTS, 2) or a.shape[0] < 1:
            raise ValidationError("shape_mismatch", f"anchors must be (K>=1, {NUM_WAYPOINTS}, 2), got {a.shape}")
        object.__setattr__(self, "anchors", a)

    @property
    def k(self) -> int:
        return self.anchors.shape[0]


@dataclass(frozen=True)
class ModePrediction:
    """Per-mode confidence scores and waypoint coordinate offsets."""

    confidence: np.ndarray  # (K,)
    offsets: np.ndarray  # (K, 8, 2)

    def __post_init__(self):
        c = np.asarray(self.confidence, dtype=np.float64)
        o = np.asarray(self.offsets, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise ValidationError("shape_mismatch", f"confidence must be a non-empty vector, got {c.shape}")
        if o.shape != (c.size, NUM_WAYPOINTS, 2):
            raise ValidationError(
                "shape_mismatch", f"offsets must be ({c.size}, {NUM_WAYPOINTS}, 2), got {o.shape}"
            )
        object.__setattr__(self, "confidence", c)
        object.__setattr__(self, "offsets", o)


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float]


def kmeans_fit(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Stops when assignments stop changing or after max_iter rounds. An empty
    cluster is re-seeded from the point farthest from its assigned centroid.
    The recorded objective (sum of squared distances) never increases.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("shape_mismatch", f"points must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ValidationError("bad_config", f"k must be >= 1, got {k}")
    if n < k:
        raise ValidationError("too_few_points", f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[c] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[c]) ** 2).sum(axis=1))

    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                farthest = int(dists[np.arange(n), labels].argmax())
                centroids[c] = x[farthest]
    return KMeansResult(centroids=centroids, labels=labels, objective_history=history)


def kmeans_anchors(futures, k: int = 20, seed: int = 0) -> AnchorSet:
    """Cluster ground-truth future trajectories into K anchors."""
    arr = np.asarray(
        [f.waypoints if isinstance(f, PlanTrajectory) else f for f in futures], dtype=np.float64
    )
    if arr.ndim != 3 or arr.shape[1:] != (NUM_WAYPOINTS, 2):
        raise ValidationError("shape_mismatch", f"futures must be (N, {NUM_WAYPOINTS}, 2), got {arr.shape}")
    result = kmeans_fit(arr.reshape(arr.shape[0], -1), k, seed)
    return AnchorSet(anchors=result.centroids.reshape(k, NUM_WAYPOINTS, 2), seed=seed)


def decode_plan(anchors: AnchorSet, pred: ModePrediction) -> tuple[PlanTrajectory, int]:
    """Select the highest-confidence mode (lowest index on ties) and add its offsets."""
    if pred.confidence.size != anchors.k:
        raise ValidationError(
            "shape_mismatch", f"prediction has {pred.confidence.size} modes, anchors have {anchors.k}"
        )
    chosen = int(np.argmax(pred.confidence))
    return PlanTrajectory(anchors.anchors[chosen] + pred.offsets[chosen]), chosen


@dataclass(frozen=True)
class PlanningLosses:
    focal: float
    l1: float
    grad_confidence: np.ndarray
    grad_offsets: np.ndarray
    target_mode: int


def planning_losses(
    anchors: AnchorSet, pred: ModePrediction, gt: PlanTrajectory, gamma: float = 2.0
) -> PlanningLosses:
    """Focal classification over modes plus L1 regression on the target mode.

    The target mode is the anchor nearest to the ground truth in mean
    per-waypoint L2 distance; confidences go through a softmax before the
    focal term.
    """
    if pred.confidence.size != anchors.k:
        raise ValidationError("shape_mismatch", "prediction and anchors disagree on mode count")
    if gamma < 0:
        raise ValidationError("bad_config", f"gamma must be >= 0, got {gamma}")
    dists = np.linalg.norm(anchors.anchors - gt.waypoints[None], axis=2).mean(axis=1)
    target = int(np.argmin(dists))

    z = pred.confidence - pred.confidence.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    pt = float(p[target])
    one_minus = 1.0 - pt
    focal = -(one_minus**gamma) * math.log(pt)
    if gamma > 0:
        dfocal_dpt = gamma * one_minus ** (gamma - 1.0) * math.log(pt) - one_minus**gamma / pt
    else:
        dfocal_dpt = -1.0 / pt
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    grad_conf = dfocal_dpt * pt * (onehot - p)

    decoded = anchors.anchors[target] + pred.offsets[target]
    resid = decoded - gt.waypoints
    l1 = float(np.abs(resid).mean())
    grad_offsets = np.zeros_like(pred.offsets)
    grad_offsets[target] = np.sign(resid) / resid.size
    return PlanningLosses(
        focal=focal, l1=l1, grad_confidence=grad_conf, grad_offsets=grad_offsets, target_mode=target
    )


@dataclass(frozen=True)
class Agent:
    """Oriented rectangle with a constant planar velocity.

    category "vehicle" marks a dynamic agent; "static" a static obstacle.
    """

    center: np.ndarray  # (2,)
    heading: float
    length: float
    width: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    category: str = "vehicle"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        v = np.asarray(self.velocity, dtype=np.float64)
        if c.shape != (2,) or v.shape != (2,):
            raise ValidationError("shape_mismatch", "agent center and velocity must be 2-vectors")
        if self.length <= 0 or self.width <= 0:
            raise ValidationError("bad_scene", "agent extents must be positive")
        if self.category not in ("vehicle", "static"):
            raise ValidationError("bad_scene", f"agent category must be 'vehicle' or 'static', got '{self.category}'")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "velocity", v)

    @property
    def dynamic(self) -> bool:
        return self.category == "vehicle"


@dataclass(frozen=True)
class SceneSpec:
    """Desk-scale scenario: drivable polygon, agents, ego footprint, route centerline."""

    drivable_area: np.ndarray  # (N, 2) simple polygon
    agents: list
    ego_length: float
    ego_width: float
    centerline: np.ndarray  # (M, 2) polyline

    def __post_init__(self):
        poly = np.asarray(self.drivable_area, dtype=np.float64)
        line = np.asarray(self.centerline, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise ValidationError("bad_scene", "drivable area must be a polygon with >= 3 vertices")
        if line.ndim != 2 or line.shape[1] != 2 or line.shape[0] < 2:
            raise ValidationError("bad_scene", "centerline must be a polyline with >= 2 vertices")
        if self.ego_length <= 0 or self.ego_width <= 0:
            raise ValidationError("bad_scene", "ego extents must be positive")
        if not Polygon(poly).is_valid:
            raise ValidationError("bad_scene", "drivable area polygon is self-intersecting or degenerate")
        object.__setattr__(self, "drivable_area", poly)
        object.__setattr__(self, "centerline", line)


@dataclass(frozen=True)
class RolloutConfig:
    """Scoring thresholds. The progress upper bound is a per-scenario input."""

    safe_progress_upper_bound: float
    ttc_threshold_s: float = 1.5
    max_accel: float = 4.0
    max_jerk: float = 8.0

    def __post_init__(self):
        if self.safe_progress_upper_bound <= 0:
            raise ValidationError("bad_config", "safe_progress_upper_bound must be positive")
        if self.ttc_threshold_s <= 0 or self.max_accel <= 0 or self.max_jerk <= 0:
            raise ValidationError("bad_config", "rollout thresholds must be positive")


@dataclass(frozen=True)
class PdmsBreakdown:
    nc: float
    dac: float
    ep: float
    ttc: float
    comfort: float
    pdms: float

    @staticmethod
    def from_subscores(nc: float, dac: float, ep: float, ttc: float, comfort: float) -> "PdmsBreakdown":
        if nc not in (0.0, 0.5, 1.0):
            raise ValidationError("bad_subscore", f"nc must be 0, 0.5, or 1, got {nc}")
        for name, v in (("dac", dac), ("ttc", ttc), ("comfort", comfort)):
            if v not in (0.0, 1.0):
                raise ValidationError("bad_subscore", f"{name} must be 0 or 1, got {v}")
        if not 0.0 <= ep <= 1.0:
            raise ValidationError("bad_subscore", f"ep must lie in [0, 1], got {ep}")
        weight_sum = PDMS_EP_WEIGHT + PDMS_TTC_WEIGHT + PDMS_COMFORT_WEIGHT
        pdms = (nc * dac) * (
            (PDMS_EP_WEIGHT * ep + PDMS_TTC_WEIGHT * ttc + PDMS_COMFORT_WEIGHT * comfort) / weight_sum
        )
        return PdmsBreakdown(nc=nc, dac=dac, ep=ep, ttc=ttc, comfort=comfort, pdms=pdms)

    def to_json_dict(self) -> dict:
        return {
            "nc": self.nc,
            "dac": self.dac,
            "ep": self.ep,
            "ttc": self.ttc,
            "comfort": self.comfort,
            "pdms": self.pdms,
        }


def oriented_rectangle(center: np.ndarray, heading: float, length: float, width: float) -> Polygon:
    c, s = math.cos(heading), math.sin(heading)
    axis = np.array([c, s])
    normal = np.array([-s, c])
    half_l, half_w = 0.5 * length, 0.5 * width
    corners = [
        center + half_l * axis + half_w * normal,
        center - half_l * axis + half_w * normal,
        center - half_l * axis - half_w * normal,
        center + half_l * axis - half_w * normal,
    ]
    return Polygon(corners)


def _substep_states(plan: PlanTrajectory) -> list[tuple[float, np.ndarray, float, np.ndarray]]:
    """(time, position, heading, velocity) at 0.1 s sub-steps along the waypoint polyline."""
    headings = plan.headings()
    per_segment = int(round(WAYPOINT_DT_S / SUBSTEP_S))
    states = []
    for i in range(NUM_WAYPOINTS - 1):
        seg_v = (plan.waypoints[i + 1] - plan.waypoints[i]) / WAYPOINT_DT_S
        for step in range(per_segment):
            frac = step / per_segment
            t = WAYPOINT_DT_S * (i + 1) + SUBSTEP_S * step
            pos = (1.0 - frac) * plan.waypoints[i] + frac * plan.waypoints[i + 1]
            states.append((t, pos, headings[i], seg_v))
    last_v = (plan.waypoints[-1] - plan.waypoints[-2]) / WAYPOINT_DT_S
    states.append((WAYPOINT_DT_S * NUM_WAYPOINTS, plan.waypoints[-1], headings[-1], last_v))
    return states


def rollout_checks(plan: PlanTrajectory, scene: SceneSpec, cfg: RolloutConfig) -> PdmsBreakdown:
    """Sweep the ego footprint along the plan and score the scenario.

    NC: 0 on any dynamic-agent overlap, 0.5 on static-only overlaps, else 1.
    DAC: footprint inside the drivable polygon at every sub-step.
    EP: net centerline arc-length progress over the configured safe bound.
    TTC: 1 iff the minimum constant-velocity time-to-overlap against
    dynamic agents exceeds the threshold.
    Comfort: finite-difference acceleration and jerk within bounds.
    """
    drivable = Polygon(scene.drivable_area)
    if drivable.area <= 0:
        raise ComputationError("degenerate_scene", "drivable area polygon has zero area")
    line = LineString(scene.centerline)
    if line.length <= 0:
        raise ComputationError("degenerate_scene", "route centerline has zero length")

    states = _substep_states(plan)
    ego_polys = [oriented_rectangle(pos, hdg, scene.ego_length, scene.ego_width) for _, pos, hdg, _ in states]

    hit_dynamic = False
    hit_static = False
    for (t, _, _, _), ego in zip(states, ego_polys):
        for agent in scene.agents:
            agent_poly = oriented_rectangle(
                agent.center + agent.velocity * t, agent.heading, agent.length, agent.width
            )
            if ego.intersects(agent_poly):
                if agent.dynamic:
                    hit_dynamic = True
                else:
                    hit_static = True
    nc = 0.0 if hit_dynamic else (0.5 if hit_static else 1.0)

    dac = 1.0 if all(drivable.covers(ego) for ego in ego_polys) else 0.0

    s_first = line.project(Point(plan.waypoints[0]))
    s_last = line.project(Point(plan.waypoints[-1]))
    progress = max(0.0, s_last - s_first)
    ep = min(1.0, progress / cfg.safe_progress_upper_bound)

    dynamic_agents = [a for a in scene.agents if a.dynamic]
    min_ttc = math.inf
    if dynamic_agents:
        horizon = WAYPOINT_DT_S * NUM_WAYPOINTS
        n_scan = int(round(horizon / SUBSTEP_S))
        for t, pos, hdg, vel in states:
            for agent in dynamic_agents:
                for step in range(n_scan + 1):
                    tau = step * SUBSTEP_S
                    if tau >= min_ttc:
                        break
                    ego_future = oriented_rectangle(
                        pos + vel * tau, hdg, scene.ego_length, scene.ego_width
                    )
                    agent_future = oriented_rectangle(
                        agent.center + agent.velocity * (t + tau), agent.heading, agent.length, agent.width
                    )
                    if ego_future.intersects(agent_future):
                        min_ttc = min(min_ttc, tau)
                        break
    ttc = 1.0 if min_ttc > cfg.ttc_threshold_s else 0.0

    velocities = np.diff(plan.waypoints, axis=0) / WAYPOINT_DT_S
    accels = np.diff(velocities, axis=0) / WAYPOINT_DT_S
    jerks = np.diff(accels, axis=0) / WAYPOINT_DT_S
    accel_ok = bool((np.linalg.norm(accels, axis=1) <= cfg.max_accel).all())
    jerk_ok = bool((np.linalg.norm(jerks, axis=1) <= cfg.max_jerk).all())
    comfort = 1.0 if accel_ok and jerk_ok else 0.0

    return PdmsBreakdown.from_subscores(nc=nc, dac=dac, ep=ep, ttc=ttc, comfort=comfort)
