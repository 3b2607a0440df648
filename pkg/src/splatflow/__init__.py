"""Differentiable Gaussian splatting with dense motion output.

The renderer composites anisotropic 3D Gaussians front to back and, alongside
the image, records which Gaussians dominated each pixel. Those records turn a
pair of timesteps into a dense flow map, which can be supervised against
reference optical flow while fitting a time-varying Gaussian field.
"""

from .backward import (
    GradcheckReport,
    ParamGradients,
    backward_flow,
    backward_pair,
    backward_render,
    finite_difference_gradients,
    gradcheck,
    photometric_loss,
    photometric_loss_gradient,
    project_backward,
)
from .dynamics import (
    AdamState,
    DynamicField,
    FitResult,
    LossBreakdown,
    SceneSequence,
    TrainConfig,
    adam_step,
    field_at,
    fit,
    psnr,
    scene_extent,
    total_loss,
)
from .flow import (
    DynamicsPair,
    FlowField,
    dynamic_region_mask,
    endpoint_error,
    flow_loss,
    flow_loss_gradient,
    gaussian_flow,
    make_pair,
    per_gaussian_flow,
)
from .formats import (
    flow_to_color,
    read_checkpoint,
    read_flo,
    read_loss_log,
    read_png,
    write_checkpoint,
    write_flo,
    write_loss_log,
    write_png,
)
from .gaussians import (
    Camera,
    Gaussian3D,
    GaussianSet,
    Splat2D,
    covariance3d,
    project,
    quat_multiply,
    quat_normalize,
    quat_to_rotation,
)
from .rasterize import (
    RenderConfig,
    RenderOutput,
    SplatBatch,
    project_set,
    render,
    render_bruteforce,
)
from .scenes import (
    CameraRigSpec,
    ClusterSpec,
    InitSpec,
    MotionSpec,
    PresetBundle,
    SceneSpec,
    generate_scene,
    perturb_field,
    projected_endpoint_errors,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Camera",
    "CameraRigSpec",
    "ClusterSpec",
    "DynamicField",
    "DynamicsPair",
    "FitResult",
    "FlowField",
    "Gaussian3D",
    "GaussianSet",
    "GradcheckReport",
    "InitSpec",
    "LossBreakdown",
    "MotionSpec",
    "ParamGradients",
    "PresetBundle",
    "RenderConfig",
    "RenderOutput",
    "SceneSequence",
    "SceneSpec",
    "Splat2D",
    "SplatBatch",
    "TrainConfig",
    "adam_step",
    "backward_flow",
    "backward_pair",
    "backward_render",
    "covariance3d",
    "dynamic_region_mask",
    "endpoint_error",
    "field_at",
    "finite_difference_gradients",
    "fit",
    "flow_loss",
    "flow_loss_gradient",
    "flow_to_color",
    "gaussian_flow",
    "generate_scene",
    "gradcheck",
    "make_pair",
    "per_gaussian_flow",
    "perturb_field",
    "photometric_loss",
    "photometric_loss_gradient",
    "project",
    "project_backward",
    "project_set",
    "projected_endpoint_errors",
    "psnr",
    "quat_multiply",
    "quat_normalize",
    "quat_to_rotation",
    "read_checkpoint",
    "read_flo",
    "read_loss_log",
    "read_png",
    "render",
    "render_bruteforce",
    "scene_extent",
    "total_loss",
    "write_checkpoint",
    "write_flo",
    "write_loss_log",
    "write_png",
]
