"""File-based toolkit for driving-scene geometry, losses, motion masks, and planner scoring."""

from .errors import ComputationError, DrivekitError, ValidationError
from .geometry import (
    FrameSequence,
    PointMap,
    Pose,
    compose,
    geodesic_rotation_distance,
    invert,
    normalize_geometry,
    relative_pose,
    rotation_from_rotvec,
    sample_point_map,
    scale_geometry,
)
from .losses import (
    ClassWeightTable,
    LossReport,
    LossWeights,
    binary_ce,
    confidence_target,
    point_loss,
    pose_loss,
    seg_loss,
    total_loss,
)
from .metrics import (
    DepthMap,
    LabelMap,
    SegScores,
    TrajScores,
    align_depth_scale_shift,
    depth_metrics,
    seg_scores,
    static_baseline,
    trajectory_scores,
    umeyama_align,
)
from .motion import (
    InstanceTrack,
    MotionConfig,
    MotionMask,
    classify_dynamic,
    displacement_series,
    generate_pseudo_gt,
    instance_centroids,
    rasterize_motion_masks,
)
from .planning import (
    Agent,
    AnchorSet,
    ModePrediction,
    PdmsBreakdown,
    PlanTrajectory,
    RolloutConfig,
    SceneSpec,
    decode_plan,
    kmeans_anchors,
    planning_losses,
    rollout_checks,
)

__version__ = "0.1.0"
