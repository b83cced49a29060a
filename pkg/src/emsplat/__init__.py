"""Incremental monocular mapping with an EM-fused Gaussian mixture map.

Noisy, view-inconsistent pixel-aligned point-map predictions are fused
into a global set of parameterized Gaussians: ICP-based localization
against the map, a single-step-per-frame EM update, and splatting-based
data association for everything the EM step cannot explain.
"""

from .types import (
    CameraIntrinsics,
    Config,
    Gaussian,
    GaussianMap,
    Prediction,
    RigidPose,
    validate,
)
from .clustering import ClusterResult, choose_k, gaussian_from_neighborhood, initialize_map, kmeans
from .registration import (
    CorrespondenceSet,
    RegistrationError,
    Submap,
    icp_colored,
    icp_point_to_plane,
    localize,
    select_submap,
    transfer_coarse_registration,
)
from .mapping import GatedAssignment, em_update, gate_points, isotropy_score, responsibilities
from .splatting import DepthRender, ProjectedGaussian, project_gaussian, refine, render_expected_depth
from .pipeline import FrameBuffer, RunResult, Trajectory, build_input_set, run
from .sources import Box, FileSource, NoiseModel, PlanePatch, SyntheticScene, SyntheticSource
from .evaluation import (
    MetricsReport,
    ate_rmse,
    reconstruction_metrics,
    scale_score,
    segment_map,
    segmentation_metrics,
)

__version__ = "0.1.0"
