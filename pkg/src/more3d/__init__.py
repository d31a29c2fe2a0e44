"""Two-view point map alignment and graph-based refinement.

The pipeline: load a two-view bundle (camera-frame point maps + matches),
transform to world coordinates, solve the robust scale/shift alignment of the
source map onto the reference, then jointly refine both point maps, both
normal maps, and two per-view scales over a constraint graph with a
coarse-to-fine Adam schedule.
"""

from .core import (
    AffineAlignment,
    CameraModel,
    CorrespondenceSet,
    NormalMap,
    PixelGrid,
    PointMap,
    RansacConfig,
    Ray,
    RefinementConfig,
    ScenePair,
    ViewBundle,
    camera_frame_points,
    pixel_directions,
    transform_to_world,
    viewing_ray,
)
from .normals import normals_from_pointmap
from .alignment import (
    AlignmentInfo,
    DegenerateMatchesError,
    RansacReport,
    align_scene,
    apply_alignment,
    clamp_shift_iqr,
    filter_matches_ransac,
    prepare_world_pair,
    solve_scale_shift,
)
from .graph import (
    GraphBuildError,
    NonFiniteLossError,
    RefinementGraph,
    RefinementState,
    StateGrads,
    build_graph,
    loss_inter,
    loss_intra,
    loss_knn,
    loss_normal_prior,
    loss_ray,
    loss_similarity,
    refresh_knn,
    total_loss_and_grad,
    weight_2d,
    weight_3d,
)
from .optimize import (
    AdamOptimizer,
    LevelSummary,
    RefinementResult,
    build_pyramid,
    run_refinement,
    upsample_state,
)
from .metrics import (
    CloudEval,
    DepthEvalResult,
    depth_from_points,
    eval_depth,
    eval_pointcloud,
    median_scale,
)
from .io import (
    BundleError,
    load_bundle,
    load_cameras,
    load_result,
    save_bundle,
    save_result,
)
from .synth import GroundTruth, SceneSpec, generate, spec_from_dict, write_bundle
from .runtime import get_threads, set_threads

__version__ = "0.1.0"

__all__ = [
    "AffineAlignment",
    "AlignmentInfo",
    "AdamOptimizer",
    "BundleError",
    "CameraModel",
    "CloudEval",
    "CorrespondenceSet",
    "DegenerateMatchesError",
    "DepthEvalResult",
    "GraphBuildError",
    "GroundTruth",
    "LevelSummary",
    "NonFiniteLossError",
    "NormalMap",
    "PixelGrid",
    "PointMap",
    "RansacConfig",
    "RansacReport",
    "Ray",
    "RefinementConfig",
    "RefinementGraph",
    "RefinementResult",
    "RefinementState",
    "ScenePair",
    "SceneSpec",
    "StateGrads",
    "ViewBundle",
    "align_scene",
    "apply_alignment",
    "build_graph",
    "build_pyramid",
    "camera_frame_points",
    "clamp_shift_iqr",
    "depth_from_points",
    "eval_depth",
    "eval_pointcloud",
    "filter_matches_ransac",
    "generate",
    "get_threads",
    "load_bundle",
    "load_cameras",
    "load_result",
    "loss_inter",
    "loss_intra",
    "loss_knn",
    "loss_normal_prior",
    "loss_ray",
    "loss_similarity",
    "median_scale",
    "normals_from_pointmap",
    "pixel_directions",
    "prepare_world_pair",
    "refresh_knn",
    "run_refinement",
    "save_bundle",
    "save_result",
    "set_threads",
    "solve_scale_shift",
    "spec_from_dict",
    "total_loss_and_grad",
    "transform_to_world",
    "upsample_state",
    "viewing_ray",
    "weight_2d",
    "weight_3d",
    "write_bundle",
]
