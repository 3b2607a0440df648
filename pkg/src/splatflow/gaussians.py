"""Scene primitives: 3D Gaussians, cameras, and perspective projection to screen-space splats.

All math is float64. Covariances are built as R * diag(s)^2 * R^T from a unit
quaternion and per-axis log-scales, then pushed through the pinhole camera with
the first-order (Jacobian) approximation and a fixed low-pass dilation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Screen-space covariance floor added to the diagonal after projection, in px^2.
# Keeps every splat at least ~one pixel wide so nothing falls between samples.
COV2D_DILATION = 0.3

# Splats at or closer than this camera-space depth are culled.
DEFAULT_NEAR = 0.01


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Raises ValueError on (near-)zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (w, x, y, z) to rotation matrices.

    Args:
        q: (..., 4) array. Normalized internally, so callers may pass raw
            parameters that have drifted off the unit sphere.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both (..., 4) in (w, x, y, z) order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def covariance3d(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """World-space covariance R * diag(exp(log_scale))^2 * R^T.

    Accepts batched inputs: log_scale (..., 3), quat (..., 4).
    """
    R = quat_to_rotation(quat)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian3D:
    """A single anisotropic Gaussian primitive.

    mean: (3,) world position
    rotation: (4,) unit quaternion (w, x, y, z)
    log_scale: (3,) per-axis log standard deviation, world units
    opacity_logit: scalar; opacity = sigmoid(opacity_logit)
    color: (3,) RGB in [0, 1]
    """

    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError("color components must lie in [0, 1]")

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return covariance3d(self.log_scale, self.rotation)


@dataclass
class GaussianSet:
    """An ordered collection of Gaussians, stored as index-aligned arrays.

    means: (n, 3), quats: (n, 4), log_scales: (n, 3),
    opacity_logits: (n,), colors: (n, 3)
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.quats = np.atleast_2d(np.asarray(self.quats, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(self.opacity_logits, dtype=np.float64)
        )
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        n = self.means.shape[0]
        if (
            self.means.shape != (n, 3)
            or self.quats.shape != (n, 4)
            or self.log_scales.shape != (n, 3)
            or self.opacity_logits.shape != (n,)
            or self.colors.shape != (n, 3)
        ):
            raise ValueError("inconsistent GaussianSet array shapes")
        if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
            raise ValueError("color components must lie in [0, 1]")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i],
            rotation=self.quats[i],
            log_scale=self.log_scales[i],
            opacity_logit=self.opacity_logits[i],
            color=self.colors[i],
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianSet":
        gs = list(gaussians)
        return cls(
            means=np.stack([g.mean for g in gs]) if gs else np.zeros((0, 3)),
            quats=np.stack([g.rotation for g in gs]) if gs else np.zeros((0, 4)),
            log_scales=np.stack([g.log_scale for g in gs]) if gs else np.zeros((0, 3)),
            opacity_logits=np.array([g.opacity_logit for g in gs], dtype=np.float64),
            colors=np.stack([g.color for g in gs]) if gs else np.zeros((0, 3)),
        )

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return covariance3d(self.log_scales, self.quats)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            means=self.means.copy(),
            quats=self.quats.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
        )


@dataclass
class Camera:
    """Pinhole camera. R maps world to camera coordinates, t is the translation.

    Camera frame: +x right, +y down, +z forward (looking direction).
    Pixel (row, col) samples the image plane at (col + 0.5, row + 0.5).
    """

    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,) translation: x_cam = R @ x_world + t
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.fx = float(self.fx)
        self.fy = float(self.fy)
        self.cx = float(self.cx)
        self.cy = float(self.cy)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        err = np.max(np.abs(self.R.T @ self.R - np.eye(3)))
        if err >= 1e-9:
            raise ValueError(f"camera rotation is not orthonormal (|R^T R - I| = {err:.3e})")

    @classmethod
    def look_at(
        cls,
        position,
        target,
        up=(0.0, -1.0, 0.0),
        fx: float = 60.0,
        fy: float = 60.0,
        cx: float | None = None,
        cy: float | None = None,
        width: int = 64,
        height: int = 64,
    ) -> "Camera":
        """Build a camera at `position` looking toward `target`.

        `up` is the world direction that should map to image-up (negative y in
        the camera frame, since +y points down).
        """
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - position
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise ValueError("camera position and target coincide")
        forward = forward / fn
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("up direction is parallel to the viewing direction")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(
            R=R,
            t=-R @ position,
            fx=fx,
            fy=fy,
            cx=0.5 * width if cx is None else cx,
            cy=0.5 * height if cy is None else cy,
            width=width,
            height=height,
        )

    def position(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass
class Splat2D:
    """A Gaussian projected to screen space.

    mean2d: (2,) pixel coordinates (x right, y down)
    cov2d: (2, 2) SPD screen covariance, dilation included, px^2
    depth: camera-space z used for ordering
    alpha_scale: peak opacity in (0, 1)
    color: (3,) RGB
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    alpha_scale: float
    color: np.ndarray

    def __post_init__(self):
        self.mean2d = np.asarray(self.mean2d, dtype=np.float64).reshape(2)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64).reshape(2, 2)
        self.depth = float(self.depth)
        self.alpha_scale = float(self.alpha_scale)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


def perspective_jacobian(t_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of the pinhole map at camera-space point(s) t_cam (..., 3)."""
    t_cam = np.asarray(t_cam, dtype=np.float64)
    x, y, z = t_cam[..., 0], t_cam[..., 1], t_cam[..., 2]
    J = np.zeros(t_cam.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project(gaussian: Gaussian3D, camera: Camera, near: float = DEFAULT_NEAR):
    """Project one Gaussian into screen space.

    Args:
        gaussian: the primitive to project.
        camera: target view.
        near: camera-space depth at or below which the splat is culled.

    Returns:
        A Splat2D, or None when the mean lies at or behind the near plane.
    """
    t_cam = camera.R @ gaussian.mean + camera.t
    z = t_cam[2]
    if z <= near:
        return None
    mean2d = np.array(
        [
            camera.fx * t_cam[0] / z + camera.cx,
            camera.fy * t_cam[1] / z + camera.cy,
        ]
    )
    J = perspective_jacobian(t_cam, camera.fx, camera.fy)
    cov_cam = camera.R @ gaussian.covariance() @ camera.R.T
    cov2d = J @ cov_cam @ J.T + COV2D_DILATION * np.eye(2)
    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=z,
        alpha_scale=gaussian.opacity,
        color=gaussian.color,
    )
