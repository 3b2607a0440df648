"""Tile-based alpha compositing of projected Gaussians.

`render` bins splats into 16x16 pixel tiles, composites each tile front to
back, and records per pixel the first `top_k` contributors (index, normalized
weight, pixel offset from the splat center) for downstream flow splatting.
`render_bruteforce` is a deliberately naive per-pixel reference used to verify
the tiled path; it shares only the per-splat projection with it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    COV2D_DILATION,
    DEFAULT_NEAR,
    Camera,
    GaussianSet,
    Splat2D,
    perspective_jacobian,
    project,
)

# Mahalanobis radius that bounds the footprint of a fully opaque splat.
BASE_RADIUS = 3.0


@dataclass
class RenderConfig:
    """Compositing knobs shared by the renderer and the flow splatter.

    tile_size: pixel edge length of a rasterizer tile
    top_k: number of front-most contributors recorded per pixel
    alpha_threshold: contributions below this are skipped entirely
    transmittance_floor: compositing stops once transmittance drops below this
    background: (3,) RGB composited behind the splats
    """

    tile_size: int = 16
    top_k: int = 20
    alpha_threshold: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.tile_size < 1:
            raise ValueError("tile_size must be at least 1")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0.0 < self.alpha_threshold < 1.0:
            raise ValueError("alpha_threshold must lie in (0, 1)")
        if self.transmittance_floor < 0.0:
            raise ValueError("transmittance_floor must be non-negative")


@dataclass
class SplatBatch:
    """Screen-space splats for one view, index-aligned with the source set.

    Culled entries keep their slot with valid=False so Gaussian indices stay
    stable across views and timesteps.
    """

    mean2d: np.ndarray  # (n, 2)
    cov2d: np.ndarray  # (n, 2, 2)
    depth: np.ndarray  # (n,)
    alpha_scale: np.ndarray  # (n,)
    color: np.ndarray  # (n, 3)
    valid: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def splat(self, i: int) -> Splat2D | None:
        if not self.valid[i]:
            return None
        return Splat2D(
            mean2d=self.mean2d[i],
            cov2d=self.cov2d[i],
            depth=self.depth[i],
            alpha_scale=self.alpha_scale[i],
            color=self.color[i],
        )


@dataclass
class RenderOutput:
    """Rendered image plus the per-pixel contributor records.

    image: (H, W, 3)
    topk_index: (H, W, K) int64 Gaussian indices, -1 where unused
    topk_weight: (H, W, K) compositing weights normalized over the recorded K
    topk_offset: (H, W, K, 2) pixel-center minus splat-center, px
    coverage: (H, W) sum of unnormalized compositing weights
    """

    image: np.ndarray
    topk_index: np.ndarray
    topk_weight: np.ndarray
    topk_offset: np.ndarray
    coverage: np.ndarray


def project_set(
    gaussians: GaussianSet, camera: Camera, near: float = DEFAULT_NEAR
) -> SplatBatch:
    """Project every Gaussian in the set. Vectorized equivalent of `project`."""
    n = len(gaussians)
    if n == 0:
        return SplatBatch(
            mean2d=np.zeros((0, 2)),
            cov2d=np.zeros((0, 2, 2)),
            depth=np.zeros(0),
            alpha_scale=np.zeros(0),
            color=np.zeros((0, 3)),
            valid=np.zeros(0, dtype=bool),
        )
    t_cam = gaussians.means @ camera.R.T + camera.t
    z = t_cam[:, 2]
    valid = z > near
    # Culled rows get benign placeholders so downstream code never divides by 0.
    zsafe = np.where(valid, z, 1.0)
    mean2d = np.stack(
        [
            camera.fx * t_cam[:, 0] / zsafe + camera.cx,
            camera.fy * t_cam[:, 1] / zsafe + camera.cy,
        ],
        axis=1,
    )
    J = perspective_jacobian(
        np.where(valid[:, None], t_cam, np.array([0.0, 0.0, 1.0])), camera.fx, camera.fy
    )
    cov_cam = np.einsum("ij,njk,lk->nil", camera.R, gaussians.covariances(), camera.R)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    mean2d[~valid] = 0.0
    cov2d[~valid] = np.eye(2)
    return SplatBatch(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=np.where(valid, z, np.inf),
        alpha_scale=gaussians.opacities(),
        color=gaussians.colors.copy(),
        valid=valid,
    )


def alpha_at(splat: Splat2D, pixel) -> float:
    """Opacity of one splat at a pixel-center position (x, y), clamped to 0.99."""
    px, py = float(pixel[0]), float(pixel[1])
    dx = px - splat.mean2d[0]
    dy = py - splat.mean2d[1]
    a = splat.cov2d[0, 0]
    b = splat.cov2d[0, 1]
    c = splat.cov2d[1, 1]
    det = a * c - b * b
    if det <= 0.0:
        raise ValueError("splat covariance is not positive definite")
    q = 0.5 * (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return min(splat.alpha_scale * math.exp(-q), 0.99)


def depth_order(splats: SplatBatch) -> np.ndarray:
    """Indices of valid splats, nearest first, ties broken by ascending index."""
    idx = np.flatnonzero(splats.valid)
    if idx.size == 0:
        return idx
    return idx[np.lexsort((idx, splats.depth[idx]))]


def _bound_radii(splats: SplatBatch, alpha_threshold: float) -> np.ndarray:
    """Mahalanobis radius outside which a splat stays below alpha_threshold.

    Never smaller than BASE_RADIUS, so binning covers at least the 3-sigma
    extent even for nearly transparent splats.
    """
    o = splats.alpha_scale
    r = np.full(len(splats), BASE_RADIUS)
    hot = o > alpha_threshold
    r[hot] = np.maximum(BASE_RADIUS, np.sqrt(2.0 * np.log(o[hot] / alpha_threshold)))
    return r


def tile_bin(
    splats: SplatBatch, config: RenderConfig, width: int, height: int
) -> list[np.ndarray]:
    """Assign splats to the tiles their bounding boxes overlap.

    Returns one index array per tile, row-major over the tile grid, each sorted
    by ascending depth with ties broken by ascending Gaussian index.
    """
    ts = config.tile_size
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    order = depth_order(splats)
    bins: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    if order.size:
        radii = _bound_radii(splats, config.alpha_threshold)
        half = radii[:, None] * np.sqrt(
            np.maximum(splats.cov2d[:, [0, 1], [0, 1]], 0.0)
        )
        lo = splats.mean2d - half
        hi = splats.mean2d + half
        # Pixel (r, c) samples at (c + 0.5, r + 0.5); a box touches it when the
        # center falls inside, so shift by 0.5 before snapping to pixel indices.
        c_lo = np.floor(lo[:, 0] - 0.5).astype(np.int64)
        c_hi = np.ceil(hi[:, 0] - 0.5).astype(np.int64)
        r_lo = np.floor(lo[:, 1] - 0.5).astype(np.int64)
        r_hi = np.ceil(hi[:, 1] - 0.5).astype(np.int64)
        for i in order:
            if c_hi[i] < 0 or c_lo[i] >= width or r_hi[i] < 0 or r_lo[i] >= height:
                continue
            tx0 = max(c_lo[i], 0) // ts
            tx1 = min(c_hi[i], width - 1) // ts
            ty0 = max(r_lo[i], 0) // ts
            ty1 = min(r_hi[i], height - 1) // ts
            for ty in range(ty0, ty1 + 1):
                row = ty * tiles_x
                for tx in range(tx0, tx1 + 1):
                    bins[row + tx].append(i)
    return [np.asarray(b, dtype=np.int64) for b in bins]


def inverse_cov2d(cov2d: np.ndarray) -> np.ndarray:
    """Closed-form inverse of (..., 2, 2) SPD matrices."""
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    det = a * c - b * b
    if np.any(det <= 0.0):
        raise ValueError("covariance batch contains a non-SPD matrix")
    inv = np.empty_like(cov2d)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv


@dataclass
class TileForward:
    """Everything the compositor knows about one tile, kept for the backward pass.

    Arrays indexed (candidate, pixel); pixels are row-major within the tile.
    """

    rect: tuple[int, int, int, int]  # r0, r1, c0, c1
    cand: np.ndarray  # (m,) global splat indices, depth order
    centers: np.ndarray  # (P, 2)
    d: np.ndarray  # (m, P, 2) pixel minus splat center
    gauss: np.ndarray  # (m, P) unclamped falloff exp(-q)
    alpha: np.ndarray  # (m, P) clamped opacity
    abar: np.ndarray  # (m, P) alpha with sub-threshold entries zeroed
    S: np.ndarray  # (m + 1, P) transmittance before each contributor
    contribute: np.ndarray  # (m, P) bool
    recorded: np.ndarray  # (m, P) bool, first K contributors
    rank: np.ndarray  # (m, P) contributor rank (valid where contribute)
    u: np.ndarray  # (m, P) unnormalized weights T * alpha
    t_final: np.ndarray  # (P,)
    image: np.ndarray  # (P, 3)
    coverage: np.ndarray  # (P,)
    topk_index: np.ndarray  # (P, K)
    topk_weight: np.ndarray  # (P, K) normalized
    topk_offset: np.ndarray  # (P, K, 2)
    weight_sum: np.ndarray  # (P,) normalization denominator


def _tile_centers(rect: tuple[int, int, int, int]) -> np.ndarray:
    r0, r1, c0, c1 = rect
    xs = np.arange(c0, c1, dtype=np.float64) + 0.5
    ys = np.arange(r0, r1, dtype=np.float64) + 0.5
    return np.stack(
        [np.tile(xs, r1 - r0), np.repeat(ys, c1 - c0)], axis=1
    )


def _scan_tile(
    rect: tuple[int, int, int, int],
    cand: np.ndarray,
    mean2d: np.ndarray,
    inv_cov: np.ndarray,
    opacity: np.ndarray,
    colors: np.ndarray,
    config: RenderConfig,
) -> TileForward:
    """Composite one tile front to back across all its candidate splats."""
    centers = _tile_centers(rect)
    P = centers.shape[0]
    m = cand.shape[0]
    K = config.top_k
    if m == 0:
        t_final = np.ones(P)
        return TileForward(
            rect=rect,
            cand=cand,
            centers=centers,
            d=np.zeros((0, P, 2)),
            gauss=np.zeros((0, P)),
            alpha=np.zeros((0, P)),
            abar=np.zeros((0, P)),
            S=np.ones((1, P)),
            contribute=np.zeros((0, P), dtype=bool),
            recorded=np.zeros((0, P), dtype=bool),
            rank=np.zeros((0, P), dtype=np.int64),
            u=np.zeros((0, P)),
            t_final=t_final,
            image=np.broadcast_to(config.background, (P, 3)).copy(),
            coverage=np.zeros(P),
            topk_index=np.full((P, K), -1, dtype=np.int64),
            topk_weight=np.zeros((P, K)),
            topk_offset=np.zeros((P, K, 2)),
            weight_sum=np.zeros(P),
        )

    mu = mean2d[cand]
    A = inv_cov[cand]
    d = centers[None, :, :] - mu[:, None, :]
    dx = d[:, :, 0]
    dy = d[:, :, 1]
    q = 0.5 * (
        A[:, 0, 0][:, None] * dx * dx
        + 2.0 * A[:, 0, 1][:, None] * dx * dy
        + A[:, 1, 1][:, None] * dy * dy
    )
    gauss = np.exp(-q)
    alpha = np.minimum(opacity[cand][:, None] * gauss, 0.99)
    abar = np.where(alpha >= config.alpha_threshold, alpha, 0.0)

    # Transmittance scan. Sub-threshold entries multiply by exactly 1, and the
    # floor cut is monotone in the scan, so one unconditional cumprod suffices.
    S = np.empty((m + 1, P))
    S[0] = 1.0
    np.cumprod(1.0 - abar, axis=0, out=S[1:])
    active = S[:m] >= config.transmittance_floor
    contribute = (abar > 0.0) & active
    u = np.where(contribute, S[:m] * abar, 0.0)

    below = S < config.transmittance_floor
    stopped = below.any(axis=0)
    first_below = np.argmax(below, axis=0)
    t_final = np.where(stopped, S[first_below, np.arange(P)], S[m])

    image = u.T @ colors[cand] + t_final[:, None] * config.background
    coverage = u.sum(axis=0)

    rank = np.cumsum(contribute, axis=0) - 1
    recorded = contribute & (rank < K)
    topk_index = np.full((P, K), -1, dtype=np.int64)
    topk_weight = np.zeros((P, K))
    topk_offset = np.zeros((P, K, 2))
    rows, cols = np.nonzero(recorded)
    slots = rank[rows, cols]
    topk_index[cols, slots] = cand[rows]
    topk_weight[cols, slots] = u[rows, cols]
    topk_offset[cols, slots] = d[rows, cols]
    weight_sum = topk_weight.sum(axis=1)
    nz = weight_sum > 0.0
    topk_weight[nz] /= weight_sum[nz, None]

    return TileForward(
        rect=rect,
        cand=cand,
        centers=centers,
        d=d,
        gauss=gauss,
        alpha=alpha,
        abar=abar,
        S=S,
        contribute=contribute,
        recorded=recorded,
        rank=rank,
        u=u,
        t_final=t_final,
        image=image,
        coverage=coverage,
        topk_index=topk_index,
        topk_weight=topk_weight,
        topk_offset=topk_offset,
        weight_sum=weight_sum,
    )


def tile_rects(width: int, height: int, tile_size: int) -> list[tuple[int, int, int, int]]:
    rects = []
    for r0 in range(0, height, tile_size):
        for c0 in range(0, width, tile_size):
            rects.append((r0, min(r0 + tile_size, height), c0, min(c0 + tile_size, width)))
    return rects


def scan_tiles(
    splats: SplatBatch,
    config: RenderConfig,
    width: int,
    height: int,
    workers: int = 1,
) -> list[TileForward]:
    """Run the per-tile compositor over the whole image.

    Tiles are independent, so the thread pool changes wall time only; results
    are assembled in tile order and are bit-identical for any worker count.
    """
    bins = tile_bin(splats, config, width, height)
    rects = tile_rects(width, height, config.tile_size)
    inv_cov = inverse_cov2d(splats.cov2d)

    def job(args):
        rect, cand = args
        return _scan_tile(
            rect, cand, splats.mean2d, inv_cov, splats.alpha_scale, splats.color, config
        )

    jobs = list(zip(rects, bins))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, jobs))
    return [job(j) for j in jobs]


def assemble(tiles: list[TileForward], config: RenderConfig, width: int, height: int) -> RenderOutput:
    K = config.top_k
    image = np.zeros((height, width, 3))
    topk_index = np.full((height, width, K), -1, dtype=np.int64)
    topk_weight = np.zeros((height, width, K))
    topk_offset = np.zeros((height, width, K, 2))
    coverage = np.zeros((height, width))
    for tf in tiles:
        r0, r1, c0, c1 = tf.rect
        th, tw = r1 - r0, c1 - c0
        image[r0:r1, c0:c1] = tf.image.reshape(th, tw, 3)
        topk_index[r0:r1, c0:c1] = tf.topk_index.reshape(th, tw, K)
        topk_weight[r0:r1, c0:c1] = tf.topk_weight.reshape(th, tw, K)
        topk_offset[r0:r1, c0:c1] = tf.topk_offset.reshape(th, tw, K, 2)
        coverage[r0:r1, c0:c1] = tf.coverage.reshape(th, tw)
    return RenderOutput(
        image=image,
        topk_index=topk_index,
        topk_weight=topk_weight,
        topk_offset=topk_offset,
        coverage=coverage,
    )


def render_splats(
    splats: SplatBatch,
    config: RenderConfig,
    width: int,
    height: int,
    workers: int = 1,
) -> RenderOutput:
    tiles = scan_tiles(splats, config, width, height, workers=workers)
    return assemble(tiles, config, width, height)


def render(
    gaussians: GaussianSet,
    camera: Camera,
    config: RenderConfig,
    workers: int = 1,
    near: float = DEFAULT_NEAR,
) -> RenderOutput:
    """Project and composite a Gaussian set into `camera`."""
    splats = project_set(gaussians, camera, near=near)
    return render_splats(splats, config, camera.width, camera.height, workers=workers)


def render_bruteforce(
    gaussians: GaussianSet,
    camera: Camera,
    config: RenderConfig,
    near: float = DEFAULT_NEAR,
) -> RenderOutput:
    """Reference renderer: no tiles, no bounding boxes, a plain loop per pixel.

    Slow by design. Projects each Gaussian through the scalar `project` op and
    evaluates every splat at every pixel via `alpha_at`.
    """
    H, W, K = camera.height, camera.width, config.top_k
    splats = [project(g, camera, near=near) for g in gaussians]
    order = sorted(
        (i for i, s in enumerate(splats) if s is not None),
        key=lambda i: (splats[i].depth, i),
    )
    bg = config.background
    thresh = config.alpha_threshold
    floor = config.transmittance_floor

    image = np.zeros((H, W, 3))
    topk_index = np.full((H, W, K), -1, dtype=np.int64)
    topk_weight = np.zeros((H, W, K))
    topk_offset = np.zeros((H, W, K, 2))
    coverage = np.zeros((H, W))

    for r in range(H):
        py = r + 0.5
        for c in range(W):
            px = c + 0.5
            T = 1.0
            acc = np.zeros(3)
            cov = 0.0
            kept = 0
            wsum = 0.0
            for i in order:
                if T < floor:
                    break
                s = splats[i]
                a = alpha_at(s, (px, py))
                if a < thresh:
                    continue
                w = T * a
                acc = acc + w * s.color
                cov += w
                if kept < K:
                    topk_index[r, c, kept] = i
                    topk_weight[r, c, kept] = w
                    topk_offset[r, c, kept, 0] = px - s.mean2d[0]
                    topk_offset[r, c, kept, 1] = py - s.mean2d[1]
                    wsum += w
                    kept += 1
                T *= 1.0 - a
            image[r, c] = acc + T * bg
            coverage[r, c] = cov
            if wsum > 0.0:
                topk_weight[r, c, :kept] /= wsum
    return RenderOutput(
        image=image,
        topk_index=topk_index,
        topk_weight=topk_weight,
        topk_offset=topk_offset,
        coverage=coverage,
    )
