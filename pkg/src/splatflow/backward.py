"""Analytic gradients for the renderer and the flow splatter.

The backward pass replays the forward tile scan, walks each tile's
contributors back to front to form per-splat screen-space gradients, then
pushes those through the projection chain to the 3D parameters. Discrete
structure (depth order, tile and top-K membership, threshold and clamp cuts)
is treated as locally constant; everything else is differentiated exactly,
including the normalized compositing weights unless the caller detaches them.

`gradcheck` verifies the whole chain against central finite differences on
scenes built to keep every pixel away from those discrete boundaries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .gaussians import (
    DEFAULT_NEAR,
    Camera,
    GaussianSet,
    covariance3d,
    inverse_sigmoid,
    perspective_jacobian,
    quat_normalize,
    quat_to_rotation,
    sigmoid,
)
from .flow import (
    DynamicsPair,
    FlowField,
    flow_loss,
    flow_loss_gradient,
    gaussian_flow,
    make_pair,
)
from .rasterize import (
    RenderConfig,
    SplatBatch,
    inverse_cov2d,
    project_set,
    render_splats,
    scan_tiles,
)

FD_STEP = 1e-4
GRADCHECK_TOLERANCE = 1e-4

PARAM_BLOCKS = ("means", "quats", "log_scales", "opacity_logits", "colors")


@dataclass
class ParamGradients:
    """Per-Gaussian gradients, index-aligned with the source set."""

    means: np.ndarray  # (n, 3)
    quats: np.ndarray  # (n, 4)
    log_scales: np.ndarray  # (n, 3)
    opacity_logits: np.ndarray  # (n,)
    colors: np.ndarray  # (n, 3)

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(
            means=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            colors=np.zeros((n, 3)),
        )

    def add_(self, other: "ParamGradients") -> "ParamGradients":
        self.means += other.means
        self.quats += other.quats
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        return self

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)


def photometric_loss(image: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all pixels and channels."""
    if image.shape != target.shape:
        raise ValueError("image shapes differ")
    diff = image - target
    return float(np.mean(diff * diff))


def photometric_loss_gradient(image: np.ndarray, target: np.ndarray) -> np.ndarray:
    if image.shape != target.shape:
        raise ValueError("image shapes differ")
    return 2.0 * (image - target) / image.size


@dataclass
class _FlowCtx:
    """Upstream state for the flow branch of the tile backward."""

    splats_t2: SplatBatch
    dflow: np.ndarray  # (H, W, 2)
    isotropic: bool
    attach_weights: bool


def _tile_grads(tf, splats_t1, inv_cov1, dimage, ctx: _FlowCtx | None):
    """Screen-space gradients contributed by one tile.

    Returns (cand, dmean2d, dcov2d, dopacity, dcolor, t2_dmean2d, t2_dcov2d);
    the t2 entries are None without a flow context.
    """
    m = tf.cand.shape[0]
    if m == 0:
        return None
    r0, r1, c0, c1 = tf.rect
    P = tf.centers.shape[0]
    cand = tf.cand
    colors = splats_t1.color[cand]
    opac = splats_t1.alpha_scale[cand]
    A1 = inv_cov1[cand]
    S = tf.S[:m]
    one_minus = 1.0 - tf.abar
    A1d = np.einsum("mij,mpj->mpi", A1, tf.d)  # inv(cov1) (x - mu1)

    dalpha = np.zeros((m, P))
    dcolor = np.zeros((m, 3))
    d_t2_mean = d_t2_cov = None
    dmean2d = np.zeros((m, 2))
    dcov2d = np.zeros((m, 2, 2))

    if dimage is not None:
        gC = dimage[r0:r1, c0:c1].reshape(P, 3)
        if gC.any():
            # Color behind each contributor, background included, divided out of
            # the transmittance product one factor of (1 - alpha) at a time.
            prefix = np.cumsum(tf.u[:, :, None] * colors[:, None, :], axis=0)
            behind = tf.image[None, :, :] - prefix
            ci_g = colors @ gC.T  # (m, P)
            behind_g = np.einsum("mpc,pc->mp", behind, gC)
            dalpha += np.where(tf.contribute, S * ci_g - behind_g / one_minus, 0.0)
            dcolor += tf.u @ gC

    if ctx is not None:
        gF = ctx.dflow[r0:r1, c0:c1].reshape(P, 2)
        if gF.any():
            mu1 = splats_t1.mean2d[cand]
            mu2 = ctx.splats_t2.mean2d[cand]
            alive = ctx.splats_t2.valid[cand]
            wsum = tf.weight_sum
            safe_w = np.where(wsum > 0.0, wsum, 1.0)
            w = np.where(tf.recorded, tf.u / safe_w, 0.0)
            w_alive = w * alive[:, None]

            trans = mu2 - mu1
            d_t2_mean = np.einsum("mp,pi->mi", w_alive, gF)
            if ctx.isotropic:
                fk = np.where(
                    alive[:, None, None],
                    np.broadcast_to(trans[:, None, :], (m, P, 2)),
                    0.0,
                )
                d_t2_cov = np.zeros((m, 2, 2))
                dmean2d -= d_t2_mean
            else:
                C2 = ctx.splats_t2.cov2d[cand]
                Bk = C2 @ A1 - np.eye(2)
                fk = np.einsum("mij,mpj->mpi", Bk, tf.d) + trans[:, None, :]
                fk = np.where(alive[:, None, None], fk, 0.0)
                Mg = np.einsum("mij,pj->mpi", A1 @ C2, gF)  # inv(cov1) cov2 g
                d_t2_cov = np.einsum("mp,pi,mpj->mij", w_alive, gF, A1d)
                dcov2d -= np.einsum("mp,mpi,mpj->mij", w_alive, Mg, A1d)
                dmean2d -= np.einsum("mp,mpi->mi", w_alive, Mg)

            if ctx.attach_weights:
                dLdw = np.einsum("mpi,pi->mp", fk, gF)
                dot = np.einsum("mp,mp->p", w, dLdw)
                dLdu = np.where(tf.recorded, (dLdw - dot[None, :]) / safe_w, 0.0)
                su = tf.u * dLdu
                cs = np.cumsum(su, axis=0)
                suffix = cs[-1][None, :] - cs
                dalpha += np.where(tf.contribute, S * dLdu - suffix / one_minus, 0.0)

    # Chain through alpha = min(opacity * gauss, 0.99); the clamp is flat.
    alpha_raw = opac[:, None] * tf.gauss
    live = tf.contribute & (alpha_raw <= 0.99)
    dalpha = np.where(live, dalpha, 0.0)
    dopacity = np.einsum("mp,mp->m", dalpha, tf.gauss)
    gG = dalpha * opac[:, None] * tf.gauss
    dmean2d += np.einsum("mp,mpi->mi", gG, A1d)
    dcov2d += 0.5 * np.einsum("mp,mpi,mpj->mij", gG, A1d, A1d)

    return cand, dmean2d, dcov2d, dopacity, dcolor, d_t2_mean, d_t2_cov


def _backward_splats(
    splats_t1: SplatBatch,
    config: RenderConfig,
    width: int,
    height: int,
    dimage: np.ndarray | None,
    ctx: _FlowCtx | None,
    workers: int = 1,
):
    """Accumulate screen-space gradients over all tiles (deterministic order)."""
    n = len(splats_t1)
    inv_cov1 = inverse_cov2d(splats_t1.cov2d)
    tiles = scan_tiles(splats_t1, config, width, height, workers=workers)

    g_mean2d = np.zeros((n, 2))
    g_cov2d = np.zeros((n, 2, 2))
    g_opacity = np.zeros(n)
    g_color = np.zeros((n, 3))
    g2_mean2d = np.zeros((n, 2)) if ctx is not None else None
    g2_cov2d = np.zeros((n, 2, 2)) if ctx is not None else None

    for tf in tiles:
        out = _tile_grads(tf, splats_t1, inv_cov1, dimage, ctx)
        if out is None:
            continue
        cand, dm, dc, do, dcol, dm2, dc2 = out
        g_mean2d[cand] += dm
        g_cov2d[cand] += dc
        g_opacity[cand] += do
        g_color[cand] += dcol
        if ctx is not None and dm2 is not None:
            g2_mean2d[cand] += dm2
            g2_cov2d[cand] += dc2
    return g_mean2d, g_cov2d, g_opacity, g_color, g2_mean2d, g2_cov2d


def _rotation_quat_jacobian(qhat: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion), shape (n, 3, 3, 4)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w)
    T = np.empty((qhat.shape[0], 3, 3, 4))
    T[:, 0, 0] = np.stack([zero, zero, -2 * y, -2 * z], axis=1)
    T[:, 0, 1] = np.stack([-z, y, x, -w], axis=1)
    T[:, 0, 2] = np.stack([y, z, w, x], axis=1)
    T[:, 1, 0] = np.stack([z, y, x, w], axis=1)
    T[:, 1, 1] = np.stack([zero, -2 * x, zero, -2 * z], axis=1)
    T[:, 1, 2] = np.stack([-x, -w, z, y], axis=1)
    T[:, 2, 0] = np.stack([-y, z, -w, x], axis=1)
    T[:, 2, 1] = np.stack([x, w, z, y], axis=1)
    T[:, 2, 2] = np.stack([zero, -2 * x, -2 * y, zero], axis=1)
    return 2.0 * T


def project_backward(
    gaussians: GaussianSet,
    camera: Camera,
    g_mean2d: np.ndarray,
    g_cov2d: np.ndarray,
    g_opacity: np.ndarray,
    g_color: np.ndarray,
    near: float = DEFAULT_NEAR,
) -> ParamGradients:
    """Push screen-space gradients through the projection to the 3D parameters.

    Includes the dependence of the projection Jacobian on the mean. Culled
    Gaussians receive zero gradient.
    """
    n = len(gaussians)
    out = ParamGradients.zeros(n)
    if n == 0:
        return out
    Rc = camera.R
    t_cam = gaussians.means @ Rc.T + camera.t
    z = t_cam[:, 2]
    valid = z > near
    if not valid.any():
        return out
    g_cov2d = np.where(valid[:, None, None], g_cov2d, 0.0)
    g_mean2d = np.where(valid[:, None], g_mean2d, 0.0)
    t_safe = np.where(valid[:, None], t_cam, np.array([0.0, 0.0, 1.0]))
    x, y, zz = t_safe[:, 0], t_safe[:, 1], t_safe[:, 2]
    J = perspective_jacobian(t_safe, camera.fx, camera.fy)

    qhat = quat_normalize(gaussians.quats)
    qnorm = np.linalg.norm(gaussians.quats, axis=1)
    Rq = quat_to_rotation(qhat)
    s = np.exp(gaussians.log_scales)
    A = Rq * s[:, None, :]
    Sigma3 = A @ np.swapaxes(A, 1, 2)
    M3 = np.einsum("ij,njk,lk->nil", Rc, Sigma3, Rc)

    dM3 = np.einsum("nai,nab,nbj->nij", J, g_cov2d, J)
    dSigma3 = np.einsum("ai,nab,bj->nij", Rc, dM3, Rc)

    Gsym = g_cov2d + np.swapaxes(g_cov2d, 1, 2)
    dJ = np.einsum("nab,nbk,nkj->naj", Gsym, J, M3)

    dt = np.einsum("nai,na->ni", J, g_mean2d)
    fz2 = camera.fx / (zz * zz)
    fy_z2 = camera.fy / (zz * zz)
    dt[:, 0] += dJ[:, 0, 2] * (-fz2)
    dt[:, 1] += dJ[:, 1, 2] * (-fy_z2)
    dt[:, 2] += (
        dJ[:, 0, 0] * (-fz2)
        + dJ[:, 1, 1] * (-fy_z2)
        + dJ[:, 0, 2] * (2.0 * camera.fx * x / zz**3)
        + dJ[:, 1, 2] * (2.0 * camera.fy * y / zz**3)
    )
    out.means[:] = np.einsum("ik,ni->nk", Rc, dt)

    dA = np.einsum("nij,njk->nik", dSigma3 + np.swapaxes(dSigma3, 1, 2), A)
    dR = dA * s[:, None, :]
    out.log_scales[:] = np.einsum("njk,njk->nk", dA, Rq) * s

    T = _rotation_quat_jacobian(qhat)
    g_qhat = np.einsum("nijq,nij->nq", T, dR)
    proj = g_qhat - qhat * np.einsum("nq,nq->n", qhat, g_qhat)[:, None]
    out.quats[:] = proj / qnorm[:, None]

    o = gaussians.opacities()
    out.opacity_logits[:] = np.where(valid, g_opacity * o * (1.0 - o), 0.0)
    out.colors[:] = np.where(valid[:, None], g_color, 0.0)
    out.means[:] = np.where(valid[:, None], out.means, 0.0)
    out.quats[:] = np.where(valid[:, None], out.quats, 0.0)
    out.log_scales[:] = np.where(valid[:, None], out.log_scales, 0.0)
    return out


def backward_render(
    gaussians: GaussianSet,
    camera: Camera,
    config: RenderConfig,
    dimage: np.ndarray,
    workers: int = 1,
    near: float = DEFAULT_NEAR,
) -> ParamGradients:
    """Gradients of a scalar loss with upstream d(loss)/d(image)."""
    splats = project_set(gaussians, camera, near=near)
    gm, gc, go, gcol, _, _ = _backward_splats(
        splats, config, camera.width, camera.height, dimage, None, workers=workers
    )
    return project_backward(gaussians, camera, gm, gc, go, gcol, near=near)


def backward_flow(
    pair: DynamicsPair,
    dflow: np.ndarray,
    isotropic: bool = False,
    attach_weights: bool = True,
    workers: int = 1,
    near: float = DEFAULT_NEAR,
) -> tuple[ParamGradients, ParamGradients]:
    """Gradients of a scalar loss with upstream d(loss)/d(flow).

    Returns gradients for the sets at both timesteps. Requires the pair to
    carry its source sets and cameras.
    """
    return backward_pair(
        pair, None, dflow, isotropic=isotropic, attach_weights=attach_weights,
        workers=workers, near=near,
    )


def backward_pair(
    pair: DynamicsPair,
    dimage: np.ndarray | None,
    dflow: np.ndarray | None,
    isotropic: bool = False,
    attach_weights: bool = True,
    workers: int = 1,
    near: float = DEFAULT_NEAR,
) -> tuple[ParamGradients, ParamGradients]:
    """Fused backward for a photometric term at t1 plus a flow term t1 -> t2."""
    if pair.set_t1 is None or pair.set_t2 is None or pair.cam_t1 is None:
        raise ValueError("pair must carry source sets and cameras for backward")
    if pair.config is None:
        raise ValueError("pair must carry its render config for backward")
    config = pair.config
    cam1 = pair.cam_t1
    cam2 = pair.cam_t2 if pair.cam_t2 is not None else cam1
    ctx = None
    if dflow is not None:
        ctx = _FlowCtx(
            splats_t2=pair.splats_t2,
            dflow=dflow,
            isotropic=isotropic,
            attach_weights=attach_weights,
        )
    gm, gc, go, gcol, gm2, gc2 = _backward_splats(
        pair.splats_t1, config, cam1.width, cam1.height, dimage, ctx, workers=workers
    )
    pg1 = project_backward(pair.set_t1, cam1, gm, gc, go, gcol, near=near)
    n = len(pair.set_t2)
    if gm2 is None:
        pg2 = ParamGradients.zeros(n)
    else:
        pg2 = project_backward(
            pair.set_t2, cam2, gm2, gc2, np.zeros(n), np.zeros((n, 3)), near=near
        )
    return pg1, pg2


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradcheckReport:
    """Max relative errors per (loss, timestep, parameter block)."""

    seed: int
    entries: dict
    runtime_s: float

    @property
    def max_rel_err(self) -> float:
        return max(self.entries.values()) if self.entries else 0.0

    def passed(self, tolerance: float = GRADCHECK_TOLERANCE) -> bool:
        return self.max_rel_err < tolerance

    def lines(self) -> list[str]:
        out = []
        for key in sorted(self.entries):
            loss, ts, block = key
            out.append(f"{loss:<9} t{ts} {block:<15} max_rel_err={self.entries[key]:.3e}")
        return out


def _gradcheck_scene(seed: int):
    """A smooth fitting problem: big soft Gaussians covering the whole frame.

    Opacities stay below 0.6 so the 0.99 clamp and the transmittance floor are
    never hit, footprints exceed the frame so no alpha-threshold ring crosses
    it, and n < top_k keeps contributor records full. Reference flow targets
    are offset from the current prediction by at least 0.5 px per component so
    L1 sign flips stay far outside finite-difference reach.
    """
    rng = np.random.default_rng(seed)
    W = H = 20
    cam = Camera(R=np.eye(3), t=np.zeros(3), fx=45.0, fy=45.0, cx=10.0, cy=10.0, width=W, height=H)
    n = 6
    z0 = 4.0
    means = np.stack(
        [
            rng.uniform(-0.2, 0.2, n),
            rng.uniform(-0.2, 0.2, n),
            z0 + rng.uniform(-0.4, 0.4, n),
        ],
        axis=1,
    )
    quats = quat_normalize(rng.normal(size=(n, 4)))
    log_scales = np.stack(
        [
            np.log(rng.uniform(1.1, 2.0, n)),
            np.log(rng.uniform(1.1, 2.0, n)),
            np.log(rng.uniform(0.02, 0.08, n)),
        ],
        axis=1,
    )
    opacity = inverse_sigmoid(rng.uniform(0.3, 0.55, n))
    colors = rng.uniform(0.1, 0.9, (n, 3))
    set1 = GaussianSet(means, quats, log_scales, opacity, colors)

    set2 = set1.copy()
    set2.means += rng.uniform(-0.08, 0.08, (n, 3))
    set2.quats = quat_normalize(set2.quats + 0.05 * rng.normal(size=(n, 4)))
    set2.log_scales += rng.uniform(-0.1, 0.1, (n, 3))

    config = RenderConfig(tile_size=16, background=rng.uniform(0.0, 1.0, 3))
    target = np.clip(
        render_splats(project_set(set1, cam), config, W, H).image
        + rng.uniform(-0.25, 0.25, (H, W, 3)),
        0.0,
        1.0,
    )
    pred = gaussian_flow(make_pair(set1, set2, cam, cam, config))
    offsets = rng.uniform(0.5, 1.5, (H, W, 2)) * rng.choice([-1.0, 1.0], (H, W, 2))
    ref = FlowField(flow=pred.flow + offsets, valid=np.ones((H, W), dtype=bool))
    return set1, set2, cam, config, target, ref


def _forward_losses(set1, set2, cam, config, target, ref, isotropic=False):
    pair = make_pair(set1, set2, cam, cam, config)
    lp = photometric_loss(pair.aux.image, target)
    lf = flow_loss(gaussian_flow(pair, isotropic=isotropic), ref)
    return lp, lf


def finite_difference_gradients(loss_fn, gaussian_set: GaussianSet, h: float = FD_STEP) -> ParamGradients:
    """Central differences of `loss_fn()` over every scalar in the set.

    `loss_fn` must read the live arrays of `gaussian_set`; entries are
    perturbed in place and restored.
    """
    out = ParamGradients.zeros(len(gaussian_set))
    for name in PARAM_BLOCKS:
        arr = getattr(gaussian_set, name)
        grad = out.block(name)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn()
            flat[i] = orig - h
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return out


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom)) if analytic.size else 0.0


def gradcheck(
    seed: int,
    h: float = FD_STEP,
    lam: float = 0.7,
    isotropic: bool = False,
) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    Checks the photometric loss, the flow loss, and their weighted sum
    (weight `lam`) over every parameter block at both timesteps.
    """
    start = time.perf_counter()
    set1, set2, cam, config, target, ref = _gradcheck_scene(seed)

    pair = make_pair(set1, set2, cam, cam, config)
    dimage = photometric_loss_gradient(pair.aux.image, target)
    dflow = flow_loss_gradient(gaussian_flow(pair, isotropic=isotropic), ref)

    photo1 = backward_render(set1, cam, config, dimage)
    flow1, flow2 = backward_flow(pair, dflow, isotropic=isotropic)
    both1, both2 = backward_pair(pair, dimage, lam * dflow, isotropic=isotropic)

    n = len(set1)
    analytic = {
        ("photo", 1): photo1,
        ("photo", 2): ParamGradients.zeros(n),
        ("flow", 1): flow1,
        ("flow", 2): flow2,
        ("combined", 1): both1,
        ("combined", 2): both2,
    }

    # One finite-difference sweep serves all three losses: each perturbation
    # evaluates the photometric and flow terms together.
    fd = {}
    for ts, gset in ((1, set1), (2, set2)):
        fp = ParamGradients.zeros(n)
        ff = ParamGradients.zeros(n)
        for name in PARAM_BLOCKS:
            arr = getattr(gset, name)
            flat = arr.reshape(-1)
            gp = fp.block(name).reshape(-1)
            gf = ff.block(name).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp_hi, lf_hi = _forward_losses(set1, set2, cam, config, target, ref, isotropic)
                flat[i] = orig - h
                lp_lo, lf_lo = _forward_losses(set1, set2, cam, config, target, ref, isotropic)
                flat[i] = orig
                gp[i] = (lp_hi - lp_lo) / (2.0 * h)
                gf[i] = (lf_hi - lf_lo) / (2.0 * h)
        fd[("photo", ts)] = fp
        fd[("flow", ts)] = ff
        comb = ParamGradients.zeros(n)
        for name in PARAM_BLOCKS:
            comb.block(name)[:] = fp.block(name) + lam * ff.block(name)
        fd[("combined", ts)] = comb

    entries = {}
    for (loss, ts), fd_pg in fd.items():
        an_pg = analytic[(loss, ts)]
        for name in PARAM_BLOCKS:
            entries[(loss, ts, name)] = _rel_err(an_pg.block(name), fd_pg.block(name))
    return GradcheckReport(seed=seed, entries=entries, runtime_s=time.perf_counter() - start)
