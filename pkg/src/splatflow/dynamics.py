"""Time-varying Gaussian fields and the fitting loop.

A field is a base Gaussian set plus explicit per-frame deltas on means,
rotations (composed quaternions), and log-scales; appearance is shared across
time. Fitting minimizes per-frame photometric error plus a weighted flow term
between consecutive frames with an in-repo Adam optimizer. Serial runs are
bit-reproducible for a fixed seed and config.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .backward import (
    ParamGradients,
    backward_pair,
    backward_render,
    photometric_loss,
    photometric_loss_gradient,
)
from .flow import flow_loss, flow_loss_gradient, gaussian_flow, make_pair
from .gaussians import Camera, GaussianSet, quat_multiply, quat_normalize
from .rasterize import RenderConfig, render

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Parameter blocks the optimizer updates, in a fixed order.
FIELD_BLOCKS = (
    "base.means",
    "base.quats",
    "base.log_scales",
    "base.opacity_logits",
    "base.colors",
    "delta.means",
    "delta.quats",
    "delta.log_scales",
)


@dataclass
class DynamicField:
    """Base Gaussians plus per-frame motion deltas for frames 1..T.

    delta_quats hold the extra rotation composed onto the base quaternion;
    a zero motion delta is the identity quaternion, not zeros.
    """

    base: GaussianSet
    delta_means: np.ndarray  # (T, n, 3)
    delta_quats: np.ndarray  # (T, n, 4)
    delta_log_scales: np.ndarray  # (T, n, 3)

    def __post_init__(self):
        self.delta_means = np.asarray(self.delta_means, dtype=np.float64)
        self.delta_quats = np.asarray(self.delta_quats, dtype=np.float64)
        self.delta_log_scales = np.asarray(self.delta_log_scales, dtype=np.float64)
        n = len(self.base)
        T = self.delta_means.shape[0]
        if (
            self.delta_means.shape != (T, n, 3)
            or self.delta_quats.shape != (T, n, 4)
            or self.delta_log_scales.shape != (T, n, 3)
        ):
            raise ValueError("inconsistent delta array shapes")

    @property
    def motion_steps(self) -> int:
        return self.delta_means.shape[0]

    @property
    def frame_count(self) -> int:
        return self.motion_steps + 1

    @classmethod
    def static(cls, base: GaussianSet, motion_steps: int) -> "DynamicField":
        n = len(base)
        dq = np.zeros((motion_steps, n, 4))
        dq[..., 0] = 1.0
        return cls(
            base=base,
            delta_means=np.zeros((motion_steps, n, 3)),
            delta_quats=dq,
            delta_log_scales=np.zeros((motion_steps, n, 3)),
        )

    def copy(self) -> "DynamicField":
        return DynamicField(
            base=self.base.copy(),
            delta_means=self.delta_means.copy(),
            delta_quats=self.delta_quats.copy(),
            delta_log_scales=self.delta_log_scales.copy(),
        )


def field_at(field: DynamicField, frame: int) -> GaussianSet:
    """Materialize the Gaussian set at a frame. Frame 0 is the base exactly."""
    if not 0 <= frame <= field.motion_steps:
        raise ValueError(f"frame {frame} outside 0..{field.motion_steps}")
    if frame == 0:
        return field.base.copy()
    k = frame - 1
    return GaussianSet(
        means=field.base.means + field.delta_means[k],
        quats=quat_multiply(field.delta_quats[k], field.base.quats),
        log_scales=field.base.log_scales + field.delta_log_scales[k],
        opacity_logits=field.base.opacity_logits.copy(),
        colors=field.base.colors.copy(),
    )


@dataclass
class SceneSequence:
    """Target frames, reference flows, and cameras for one view.

    frames: T+1 images (H, W, 3) in [0, 1]
    flows: T reference flow fields, frame k -> k+1, on frame k's grid
    cameras: T+1 cameras (static rigs repeat the same camera)
    """

    frames: list
    flows: list
    cameras: list

    def __post_init__(self):
        if len(self.cameras) != len(self.frames):
            raise ValueError("need one camera per frame")
        if len(self.flows) != len(self.frames) - 1:
            raise ValueError("need one flow field per consecutive frame pair")

    @property
    def motion_steps(self) -> int:
        return len(self.flows)


@dataclass
class TrainConfig:
    """Fit hyperparameters. Learning rates follow the usual splatting defaults;
    lr_means of None resolves to 1.6e-4 times the scene extent at fit time."""

    iterations: int = 600
    lambda_flow: float = 0.5
    flow_norm: str = "l1"
    isotropic: bool = False
    attach_weights: bool = True
    lr_means: float | None = None
    lr_delta_means: float | None = None  # None follows lr_means
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_decay: float = 1.0  # final/initial lr ratio over the run, exponential
    seed: int = 0
    workers: int = 1
    render: RenderConfig = dc_field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.flow_norm not in ("l1", "l2"):
            raise ValueError("flow_norm must be 'l1' or 'l2'")
        if self.lr_decay <= 0.0:
            raise ValueError("lr_decay must be positive")


def scene_extent(base: GaussianSet) -> float:
    """Diameter of the bounding sphere of the base means."""
    if len(base) == 0:
        return 1.0
    centroid = base.means.mean(axis=0)
    radius = float(np.max(np.linalg.norm(base.means - centroid, axis=1)))
    return max(2.0 * radius, 1e-6)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_step(
    params: dict, grads: dict, state: AdamState, lrs: dict, lr_factor: float = 1.0
) -> None:
    """One in-place Adam update over all blocks."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for key in params:
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        params[key] -= (lrs[key] * lr_factor) * mhat / (np.sqrt(vhat) + ADAM_EPS)


def _field_params(field: DynamicField) -> dict:
    return {
        "base.means": field.base.means,
        "base.quats": field.base.quats,
        "base.log_scales": field.base.log_scales,
        "base.opacity_logits": field.base.opacity_logits,
        "base.colors": field.base.colors,
        "delta.means": field.delta_means,
        "delta.quats": field.delta_quats,
        "delta.log_scales": field.delta_log_scales,
    }


def _block_lrs(cfg: TrainConfig, field: DynamicField) -> dict:
    lr_means = cfg.lr_means if cfg.lr_means is not None else 1.6e-4 * scene_extent(field.base)
    lr_delta = cfg.lr_delta_means if cfg.lr_delta_means is not None else lr_means
    return {
        "base.means": lr_means,
        "base.quats": cfg.lr_quats,
        "base.log_scales": cfg.lr_log_scales,
        "base.opacity_logits": cfg.lr_opacity,
        "base.colors": cfg.lr_colors,
        "delta.means": lr_delta,
        "delta.quats": cfg.lr_quats,
        "delta.log_scales": cfg.lr_log_scales,
    }


def _quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """L(q) with quat_multiply(q, p) == L(q) @ p, batched (n, 4, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=1),
            np.stack([x, w, -z, y], axis=1),
            np.stack([y, z, w, -x], axis=1),
            np.stack([z, -y, x, w], axis=1),
        ],
        axis=1,
    )


def _quat_right_matrix(p: np.ndarray) -> np.ndarray:
    """R(p) with quat_multiply(q, p) == R(p) @ q, batched (n, 4, 4)."""
    w, x, y, z = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], axis=1),
            np.stack([x, w, z, -y], axis=1),
            np.stack([y, -z, w, x], axis=1),
            np.stack([z, y, -x, w], axis=1),
        ],
        axis=1,
    )


def _scatter_frame_grads(field: DynamicField, frame_grads: list) -> dict:
    """Fold per-frame set gradients into base and delta parameter blocks."""
    n = len(field.base)
    T = field.motion_steps
    out = {k: np.zeros_like(p) for k, p in _field_params(field).items()}
    for frame, pg in enumerate(frame_grads):
        if pg is None:
            continue
        out["base.means"] += pg.means
        out["base.log_scales"] += pg.log_scales
        out["base.opacity_logits"] += pg.opacity_logits
        out["base.colors"] += pg.colors
        if frame == 0:
            out["base.quats"] += pg.quats
        else:
            k = frame - 1
            out["delta.means"][k] += pg.means
            out["delta.log_scales"][k] += pg.log_scales
            # composed = delta * base: route the composed-quaternion gradient
            # through both factors of the Hamilton product.
            L = _quat_left_matrix(field.delta_quats[k])
            Rm = _quat_right_matrix(field.base.quats)
            out["base.quats"] += np.einsum("nij,ni->nj", L, pg.quats)
            out["delta.quats"][k] += np.einsum("nij,ni->nj", Rm, pg.quats)
    return out


@dataclass
class LossBreakdown:
    photometric: float
    flow: float
    lambda_flow: float

    @property
    def total(self) -> float:
        return self.photometric + self.lambda_flow * self.flow


def total_loss(
    field: DynamicField, sequence: SceneSequence, frame: int, cfg: TrainConfig
) -> LossBreakdown:
    """Photometric loss at `frame` plus the weighted flow loss to `frame + 1`.

    The flow term is skipped at the last frame.
    """
    if not 0 <= frame < len(sequence.frames):
        raise ValueError(f"frame {frame} outside the sequence")
    set_k = field_at(field, frame)
    cam_k = sequence.cameras[frame]
    if frame < sequence.motion_steps:
        pair = make_pair(
            set_k, field_at(field, frame + 1), cam_k, sequence.cameras[frame + 1],
            cfg.render, workers=cfg.workers,
        )
        lp = photometric_loss(pair.aux.image, sequence.frames[frame])
        lf = flow_loss(
            gaussian_flow(pair, isotropic=cfg.isotropic),
            sequence.flows[frame],
            cfg.flow_norm,
        )
    else:
        out = render(set_k, cam_k, cfg.render, workers=cfg.workers)
        lp = photometric_loss(out.image, sequence.frames[frame])
        lf = 0.0
    return LossBreakdown(photometric=lp, flow=lf, lambda_flow=cfg.lambda_flow)


@dataclass
class FitResult:
    field: DynamicField
    log: list  # rows (iteration, L_photo, L_flow, total)
    adam: AdamState
    iteration: int


def _fit_losses_and_grads(
    field: DynamicField, sequences: list, cfg: TrainConfig, with_grads: bool = True
):
    """Forward (and optionally backward) over every view and frame pair.
    Returns (L_photo, L_flow, frame gradients or None)."""
    T = field.motion_steps
    sets = [field_at(field, k) for k in range(T + 1)]
    frame_grads = None
    if with_grads:
        frame_grads = [ParamGradients.zeros(len(field.base)) for _ in range(T + 1)]
    lp_total = 0.0
    lf_total = 0.0
    use_flow = cfg.lambda_flow != 0.0
    for seq in sequences:
        if seq.motion_steps != T:
            raise ValueError("sequence frame count does not match the field")
        for k in range(T):
            pair = make_pair(
                sets[k], sets[k + 1], seq.cameras[k], seq.cameras[k + 1],
                cfg.render, workers=cfg.workers,
            )
            lp = photometric_loss(pair.aux.image, seq.frames[k])
            lp_total += lp
            dflow = None
            if use_flow:
                pred = gaussian_flow(pair, isotropic=cfg.isotropic)
                lf_total += flow_loss(pred, seq.flows[k], cfg.flow_norm)
                if with_grads:
                    dflow = cfg.lambda_flow * flow_loss_gradient(
                        pred, seq.flows[k], cfg.flow_norm
                    )
            if with_grads:
                dimage = photometric_loss_gradient(pair.aux.image, seq.frames[k])
                pg1, pg2 = backward_pair(
                    pair, dimage, dflow,
                    isotropic=cfg.isotropic,
                    attach_weights=cfg.attach_weights,
                    workers=cfg.workers,
                )
                frame_grads[k].add_(pg1)
                frame_grads[k + 1].add_(pg2)
        out = render(sets[T], seq.cameras[T], cfg.render, workers=cfg.workers)
        lp_total += photometric_loss(out.image, seq.frames[T])
        if with_grads:
            frame_grads[T].add_(
                backward_render(
                    sets[T], seq.cameras[T], cfg.render,
                    photometric_loss_gradient(out.image, seq.frames[T]),
                    workers=cfg.workers,
                )
            )
    return lp_total, lf_total, frame_grads


def fit(
    sequences,
    field: DynamicField,
    cfg: TrainConfig,
    adam: AdamState | None = None,
    start_iteration: int = 0,
    callback=None,
) -> FitResult:
    """Optimize `field` in place against one or more views.

    Every iteration logs (iteration, L_photo, L_flow, total) evaluated before
    the step; a final row holds the losses of the returned parameters. Passing
    the Adam state and iteration of a checkpoint resumes a run exactly.
    """
    if isinstance(sequences, SceneSequence):
        sequences = [sequences]
    sequences = list(sequences)
    if not sequences:
        raise ValueError("fit needs at least one sequence")
    params = _field_params(field)
    lrs = _block_lrs(cfg, field)
    if adam is None:
        adam = AdamState.zeros_like(params)
    log = []
    total_iters = max(cfg.iterations, 1)
    for it in range(start_iteration, cfg.iterations):
        lp, lf, frame_grads = _fit_losses_and_grads(field, sequences, cfg)
        total = lp + cfg.lambda_flow * lf
        if not np.isfinite(total):
            raise RuntimeError(
                f"fit diverged at iteration {it}: L_photo={lp!r} L_flow={lf!r}"
            )
        log.append((it, lp, lf, total))
        grads = _scatter_frame_grads(field, frame_grads)
        lr_factor = cfg.lr_decay ** (it / total_iters)
        adam_step(params, grads, adam, lrs, lr_factor)
        field.base.quats[:] = quat_normalize(field.base.quats)
        field.delta_quats[:] = quat_normalize(field.delta_quats)
        np.clip(field.base.colors, 0.0, 1.0, out=field.base.colors)
        if callback is not None:
            callback(it, field, log[-1])
    lp, lf, _ = _fit_losses_and_grads(field, sequences, cfg, with_grads=False)
    log.append((cfg.iterations, lp, lf, lp + cfg.lambda_flow * lf))
    return FitResult(field=field, log=log, adam=adam, iteration=cfg.iterations)


def psnr(image: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    With a mask, only the selected pixels (all channels) enter the mean.
    """
    if image.shape != target.shape:
        raise ValueError("image shapes differ")
    diff = image - target
    if mask is not None:
        if not mask.any():
            return float("nan")
        diff = diff[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return -10.0 * float(np.log10(mse))
