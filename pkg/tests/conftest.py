"""Shared scene builders for the test suite.

Scenes are sampled in screen terms (target pixel, depth, footprint size) and
back-projected, so every Gaussian lands inside the frame with a footprint of
a few pixels regardless of the camera used.
"""

import numpy as np

from splatflow import Camera, GaussianSet
from splatflow.gaussians import inverse_sigmoid, quat_normalize


def frontal_camera(width=24, height=24, f=40.0):
    return Camera(
        R=np.eye(3),
        t=np.zeros(3),
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def random_set(
    rng,
    camera,
    n,
    depth_range=(2.0, 6.0),
    sigma_px=(0.8, 4.0),
    opacity=(0.2, 0.95),
    margin=2.0,
):
    """Back-project n random Gaussians into the camera's frustum."""
    z = rng.uniform(*depth_range, n)
    u = rng.uniform(margin, camera.width - margin, n)
    v = rng.uniform(margin, camera.height - margin, n)
    means = np.stack(
        [(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z],
        axis=1,
    )
    # World stddev chosen so the projected footprint spans sigma_px pixels.
    sig = rng.uniform(*sigma_px, (n, 3)) * z[:, None] / camera.fx
    return GaussianSet(
        means=means,
        quats=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=np.log(sig),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity, n)),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    )


def translated_copy(gaussians, delta_world):
    out = gaussians.copy()
    out.means = out.means + np.asarray(delta_world)
    return out
