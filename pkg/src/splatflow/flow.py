"""Dense motion flow splatted from Gaussian dynamics.

Each pixel's flow is a convex combination, over the contributors recorded at
the first timestep, of per-Gaussian motions: the screen-space covariance
transport cov_t2 @ inv(cov_t1) applied to the pixel's offset from the splat
center, plus the center translation. The isotropic variant keeps only the
translation term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import DEFAULT_NEAR, Camera, GaussianSet, Splat2D
from .rasterize import (
    RenderConfig,
    RenderOutput,
    SplatBatch,
    inverse_cov2d,
    project_set,
    render_splats,
)

# Pixels whose accumulated compositing weight is at or below this carry no
# trustworthy flow and are masked invalid.
COVERAGE_THRESHOLD = 0.5

# Reference flow magnitude, in pixels, above which a pixel counts as dynamic.
DYNAMIC_FLOW_THRESHOLD = 1.0


@dataclass
class FlowField:
    """Dense 2D flow in pixels, +x right, +y down.

    flow: (H, W, 2)
    valid: (H, W) bool
    """

    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError("flow must have shape (H, W, 2)")
        if self.valid.shape != self.flow.shape[:2]:
            raise ValueError("valid mask shape must match flow")


@dataclass
class DynamicsPair:
    """State linking two timesteps of the same Gaussian set for one view.

    splats_t1/splats_t2 are index-aligned; aux is the render at t1 whose
    contributor records address parameters at t2. The source sets and cameras
    ride along so gradients can be pushed back to 3D parameters.
    """

    splats_t1: SplatBatch
    splats_t2: SplatBatch
    aux: RenderOutput
    set_t1: GaussianSet | None = None
    set_t2: GaussianSet | None = None
    cam_t1: Camera | None = None
    cam_t2: Camera | None = None
    config: RenderConfig | None = None


def make_pair(
    set_t1: GaussianSet,
    set_t2: GaussianSet,
    cam_t1: Camera,
    cam_t2: Camera,
    config: RenderConfig,
    workers: int = 1,
    near: float = DEFAULT_NEAR,
) -> DynamicsPair:
    """Render the first timestep and project the second."""
    if len(set_t1) != len(set_t2):
        raise ValueError("timestep sets must have the same Gaussian count")
    splats_t1 = project_set(set_t1, cam_t1, near=near)
    splats_t2 = project_set(set_t2, cam_t2, near=near)
    aux = render_splats(splats_t1, config, cam_t1.width, cam_t1.height, workers=workers)
    return DynamicsPair(
        splats_t1=splats_t1,
        splats_t2=splats_t2,
        aux=aux,
        set_t1=set_t1,
        set_t2=set_t2,
        cam_t1=cam_t1,
        cam_t2=cam_t2,
        config=config,
    )


def per_gaussian_flow(
    splat_t1: Splat2D, splat_t2: Splat2D, offset, isotropic: bool = False
) -> np.ndarray:
    """Motion one Gaussian imparts at pixel offset `offset` from its t1 center.

    The transport factor is computed as (cov_t2 - cov_t1) @ inv(cov_t1) rather
    than cov_t2 @ inv(cov_t1) - I: algebraically identical, but exactly zero
    when the covariance has not changed, so unchanged states give bitwise-zero
    flow instead of rounding residue.
    """
    offset = np.asarray(offset, dtype=np.float64).reshape(2)
    translation = splat_t2.mean2d - splat_t1.mean2d
    if isotropic:
        return translation
    B = (splat_t2.cov2d - splat_t1.cov2d) @ inverse_cov2d(splat_t1.cov2d)
    return B @ offset + translation


def gaussian_flow(
    pair: DynamicsPair,
    isotropic: bool = False,
    coverage_threshold: float = COVERAGE_THRESHOLD,
) -> FlowField:
    """Splat per-Gaussian motion into a dense flow field.

    Contributors recorded at t1 whose Gaussian is culled at t2 contribute zero
    motion; their weight still participates in the normalization.
    """
    aux = pair.aux
    idx = aux.topk_index
    w = aux.topk_weight
    used = idx >= 0
    safe = np.where(used, idx, 0)

    mu1 = pair.splats_t1.mean2d[safe]
    mu2 = pair.splats_t2.mean2d[safe]
    alive = used & pair.splats_t2.valid[safe]

    if isotropic:
        contrib = mu2 - mu1
    else:
        # (cov_t2 - cov_t1) @ inv(cov_t1): see per_gaussian_flow for why the
        # difference form is used instead of subtracting the identity.
        diff = pair.splats_t2.cov2d - pair.splats_t1.cov2d
        B = diff[safe] @ inverse_cov2d(pair.splats_t1.cov2d)[safe]
        contrib = np.einsum("hwkij,hwkj->hwki", B, aux.topk_offset) + (mu2 - mu1)
    contrib = np.where(alive[..., None], contrib, 0.0)
    flow = np.einsum("hwk,hwki->hwi", w, contrib)
    return FlowField(flow=flow, valid=aux.coverage > coverage_threshold)


def flow_loss(pred: FlowField, ref: FlowField, norm: str = "l1") -> float:
    """Mean per-pixel flow error over jointly valid pixels.

    norm "l1" sums |du| + |dv| per pixel; "l2" uses the squared Euclidean
    length, whose gradient scales with the residual instead of saturating.
    """
    if pred.flow.shape != ref.flow.shape:
        raise ValueError("flow field shapes differ")
    joint = pred.valid & ref.valid
    if not joint.any():
        return 0.0
    diff = pred.flow[joint] - ref.flow[joint]
    if norm == "l1":
        return float(np.abs(diff).sum(axis=1).mean())
    if norm == "l2":
        return float((diff * diff).sum(axis=1).mean())
    raise ValueError(f"unknown flow loss norm {norm!r}")


def flow_loss_gradient(pred: FlowField, ref: FlowField, norm: str = "l1") -> np.ndarray:
    """d(flow_loss)/d(pred.flow), zero outside the jointly valid region.

    The L1 subgradient at an exact zero residual is taken as 0.
    """
    if pred.flow.shape != ref.flow.shape:
        raise ValueError("flow field shapes differ")
    joint = pred.valid & ref.valid
    grad = np.zeros_like(pred.flow)
    count = int(joint.sum())
    if count == 0:
        return grad
    diff = pred.flow - ref.flow
    if norm == "l1":
        grad = np.sign(diff) / count
    elif norm == "l2":
        grad = 2.0 * diff / count
    else:
        raise ValueError(f"unknown flow loss norm {norm!r}")
    grad[~joint] = 0.0
    return grad


def endpoint_error(pred: FlowField, ref: FlowField, mask: np.ndarray | None = None) -> float:
    """Mean Euclidean flow error over jointly valid (optionally masked) pixels."""
    if pred.flow.shape != ref.flow.shape:
        raise ValueError("flow field shapes differ")
    joint = pred.valid & ref.valid
    if mask is not None:
        joint = joint & mask
    if not joint.any():
        return 0.0
    diff = pred.flow[joint] - ref.flow[joint]
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def dynamic_region_mask(
    ref: FlowField, threshold: float = DYNAMIC_FLOW_THRESHOLD
) -> np.ndarray:
    """Valid pixels whose reference flow magnitude exceeds `threshold` px."""
    mag = np.sqrt((ref.flow * ref.flow).sum(axis=2))
    return ref.valid & (mag > threshold)
