"""chainskin: kinematic-chain driven linear blend skinning.

A mesh with a kinematic chain and deformation anchors can be re-posed
through fixed anchor-link associations, fitted to observed deformed
point clouds in two stages, and evaluated with point-set metrics.
"""

from .chain import (
    Joint,
    KinematicChain,
    LinkResiduals,
    Pose,
    apply_residuals,
    forward_kinematics,
    hierarchical_order,
    link_lengths,
    links,
    recover_chain,
    validate_chain,
)
from .errors import ChainError, ConfigError, FitDivergedError, ParseError
from .fitting import (
    FitConfig,
    FrameObservation,
    Stage1Result,
    Stage2Result,
    UnconstrainedFrameTransforms,
    anchor_consistency_loss,
    cycle_consistency_loss,
    fit_stage1,
    fit_stage2,
    numeric_gradient_check,
    reconstruction_loss,
    trace_to_table,
    transport_joints,
)
from .metrics import MetricReport, chamfer_distance, evaluate, f_score
from .se3 import (
    RigidTransform,
    Rotation,
    apply_point,
    apply_points,
    axis_angle_rotation,
    compose,
    invert,
    rotation_between,
    rotation_from_rotvec,
)
from .skinning import (
    AnchorSet,
    Association,
    Mesh,
    ReposeResult,
    SkinningWeights,
    anchor_positions,
    backward_deform_point,
    build_associations,
    deform_mesh,
    deform_point,
    forward_skin_weights,
    repose,
    revised_anchor_transforms,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "Association",
    "ChainError",
    "ConfigError",
    "FitConfig",
    "FitDivergedError",
    "FrameObservation",
    "Joint",
    "KinematicChain",
    "LinkResiduals",
    "Mesh",
    "MetricReport",
    "ParseError",
    "Pose",
    "ReposeResult",
    "RigidTransform",
    "Rotation",
    "SkinningWeights",
    "Stage1Result",
    "Stage2Result",
    "UnconstrainedFrameTransforms",
    "anchor_consistency_loss",
    "anchor_positions",
    "apply_point",
    "apply_points",
    "apply_residuals",
    "axis_angle_rotation",
    "backward_deform_point",
    "build_associations",
    "chamfer_distance",
    "compose",
    "cycle_consistency_loss",
    "deform_mesh",
    "deform_point",
    "evaluate",
    "f_score",
    "fit_stage1",
    "fit_stage2",
    "forward_kinematics",
    "forward_skin_weights",
    "hierarchical_order",
    "invert",
    "link_lengths",
    "links",
    "numeric_gradient_check",
    "recover_chain",
    "reconstruction_loss",
    "repose",
    "revised_anchor_transforms",
    "rotation_between",
    "rotation_from_rotvec",
    "trace_to_table",
    "transport_joints",
    "validate_chain",
]
