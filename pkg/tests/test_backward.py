"""Analytic gradients against finite differences and closed forms."""

import numpy as np
import pytest

from conftest import frontal_camera, random_set
from splatflow import (
    FlowField,
    GaussianSet,
    ParamGradients,
    RenderConfig,
    backward_flow,
    backward_pair,
    backward_render,
    finite_difference_gradients,
    flow_loss_gradient,
    gaussian_flow,
    gradcheck,
    make_pair,
    photometric_loss,
    photometric_loss_gradient,
    render,
)
from splatflow.backward import GRADCHECK_TOLERANCE, PARAM_BLOCKS


def small_scene(seed, n=5, size=16):
    rng = np.random.default_rng(seed)
    cam = frontal_camera(width=size, height=size, f=30.0)
    set1 = random_set(rng, cam, n=n, opacity=(0.3, 0.7))
    set2 = set1.copy()
    set2.means += rng.uniform(-0.05, 0.05, set2.means.shape)
    set2.log_scales += rng.uniform(-0.1, 0.1, set2.log_scales.shape)
    return set1, set2, cam, RenderConfig(tile_size=8)


def assert_grads_zero(g: ParamGradients):
    for name in PARAM_BLOCKS:
        assert not g.block(name).any(), name


# --- finite-difference oracles ----------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_all_blocks_match_finite_differences(seed):
    report = gradcheck(seed)
    assert len(report.entries) == 2 * 3 * len(PARAM_BLOCKS)
    assert report.passed(), max(report.entries.items(), key=lambda kv: kv[1])
    assert report.max_rel_err < GRADCHECK_TOLERANCE


def test_isotropic_flow_gradients_match_finite_differences():
    report = gradcheck(2, isotropic=True)
    assert report.passed()


def test_photometric_backward_matches_block_sweep():
    # Independent sweep with the generic helper rather than gradcheck's loop.
    set1, _, cam, config = small_scene(3, n=3, size=10)
    target = np.full((10, 10, 3), 0.4)

    def loss():
        return photometric_loss(render(set1, cam, config).image, target)

    fd = finite_difference_gradients(loss, set1)
    out = render(set1, cam, config)
    analytic = backward_render(set1, cam, config, photometric_loss_gradient(out.image, target))
    for name in PARAM_BLOCKS:
        a, f = analytic.block(name), fd.block(name)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)
        assert np.max(np.abs(a - f) / denom) < GRADCHECK_TOLERANCE, name


def test_central_difference_error_shrinks_quadratically():
    """Against the analytic value, halving the step cuts the central-difference
    residual about fourfold. This only holds if the analytic gradient is the
    true derivative to higher order than either step."""
    set1, _, cam, config = small_scene(4, n=2, size=10)
    target = np.full((10, 10, 3), 0.25)
    out = render(set1, cam, config)
    analytic = backward_render(set1, cam, config, photometric_loss_gradient(out.image, target))

    def fd_entry(h):
        orig = set1.means[0, 0]
        set1.means[0, 0] = orig + h
        hi = photometric_loss(render(set1, cam, config).image, target)
        set1.means[0, 0] = orig - h
        lo = photometric_loss(render(set1, cam, config).image, target)
        set1.means[0, 0] = orig
        return (hi - lo) / (2.0 * h)

    a = analytic.means[0, 0]
    err_coarse = abs(fd_entry(1e-3) - a)
    err_fine = abs(fd_entry(5e-4) - a)
    assert err_coarse > 1e-12  # step large enough to see truncation at all
    assert 2.5 < err_coarse / err_fine < 6.0


# --- exact closed forms ------------------------------------------------------


def test_zero_upstream_means_zero_gradients():
    set1, set2, cam, config = small_scene(5)
    assert_grads_zero(backward_render(set1, cam, config, np.zeros((16, 16, 3))))
    pair = make_pair(set1, set2, cam, cam, config)
    g1, g2 = backward_pair(pair, np.zeros((16, 16, 3)), np.zeros((16, 16, 2)))
    assert_grads_zero(g1)
    assert_grads_zero(g2)


def test_pixel_color_gradient_equals_compositing_weight():
    # One Gaussian at a pixel center: d(pixel)/d(color channel) is the
    # unnormalized weight, here just alpha = sigmoid(logit).
    cam = frontal_camera(width=8, height=8, f=20.0)
    z = 3.0
    gs = GaussianSet(
        means=[[(4.5 - cam.cx) * z / cam.fx, (4.5 - cam.cy) * z / cam.fy, z]],
        quats=[[1.0, 0.0, 0.0, 0.0]],
        log_scales=np.log([0.3, 0.3, 0.3]),
        opacity_logits=[0.0],
        colors=[[0.2, 0.5, 0.8]],
    )
    config = RenderConfig(tile_size=8)
    dimage = np.zeros((8, 8, 3))
    dimage[4, 4, 1] = 1.0
    g = backward_render(gs, cam, config, dimage)
    assert g.colors[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert g.colors[0, 0] == 0.0 and g.colors[0, 2] == 0.0


def test_offscreen_gaussian_gets_exactly_zero_gradient():
    set1, set2, cam, config = small_scene(6, n=4)
    for s in (set1, set2):
        s.means = np.vstack([s.means, [50.0, 50.0, 4.0], [0.0, 0.0, -1.0]])
        s.quats = np.vstack([s.quats, [[1, 0, 0, 0], [1, 0, 0, 0]]])
        s.log_scales = np.vstack([s.log_scales, np.log([[0.1] * 3, [0.1] * 3])])
        s.opacity_logits = np.append(s.opacity_logits, [0.5, 0.5])
        s.colors = np.vstack([s.colors, [[0.5] * 3, [0.5] * 3]])
    pair = make_pair(set1, set2, cam, cam, config)
    g1, g2 = backward_pair(pair, np.ones((16, 16, 3)), np.ones((16, 16, 2)))
    for g in (g1, g2):
        for name in PARAM_BLOCKS:
            # row 4 projects far outside every tile, row 5 is behind the camera
            assert not g.block(name)[4:].any(), name


def test_flow_residual_sign_drives_second_timestep_means():
    # Reference flow far below the prediction in u: the L1 gradient pushes the
    # t2 means toward smaller x (positive gradient, since dmean2d/dx > 0).
    set1, set2, cam, config = small_scene(7)
    pair = make_pair(set1, set2, cam, cam, config)
    pred = gaussian_flow(pair)
    ref = FlowField(flow=pred.flow - np.array([5.0, 0.0]), valid=np.ones_like(pred.valid))
    _, g2 = backward_flow(pair, flow_loss_gradient(pred, ref))
    touched = np.abs(g2.means[:, 0]) > 0
    assert touched.any()
    assert (g2.means[touched, 0] > 0).all()
    assert not g2.colors.any()  # flow never reads colors
    assert not g2.opacity_logits.any()  # t2 opacity does not enter the flow


def test_photometric_branch_ignores_second_timestep():
    set1, set2, cam, config = small_scene(8)
    pair = make_pair(set1, set2, cam, cam, config)
    dimage = np.random.default_rng(0).normal(size=(16, 16, 3))
    _, g2 = backward_pair(pair, dimage, None)
    assert_grads_zero(g2)


def test_combined_backward_is_sum_of_branches():
    set1, set2, cam, config = small_scene(9)
    pair = make_pair(set1, set2, cam, cam, config)
    rng = np.random.default_rng(1)
    dimage = rng.normal(size=(16, 16, 3))
    dflow = rng.normal(size=(16, 16, 2))
    lam = 0.7
    both1, both2 = backward_pair(pair, dimage, lam * dflow)
    photo1, photo2 = backward_pair(pair, dimage, None)
    flow1, flow2 = backward_pair(pair, None, lam * dflow)
    for a, b, c in ((both1, photo1, flow1), (both2, photo2, flow2)):
        for name in PARAM_BLOCKS:
            np.testing.assert_allclose(
                a.block(name), b.block(name) + c.block(name), atol=1e-10
            )


def test_upstream_scaling_is_linear():
    set1, set2, cam, config = small_scene(10)
    pair = make_pair(set1, set2, cam, cam, config)
    dflow = np.random.default_rng(2).normal(size=(16, 16, 2))
    g1a, g2a = backward_flow(pair, dflow)
    g1b, g2b = backward_flow(pair, 3.0 * dflow)
    for a, b in ((g1a, g1b), (g2a, g2b)):
        for name in PARAM_BLOCKS:
            np.testing.assert_allclose(3.0 * a.block(name), b.block(name), atol=1e-10)


def test_backward_requires_sources_on_the_pair():
    set1, set2, cam, config = small_scene(11, n=2)
    pair = make_pair(set1, set2, cam, cam, config)
    stripped = type(pair)(splats_t1=pair.splats_t1, splats_t2=pair.splats_t2, aux=pair.aux)
    with pytest.raises(ValueError):
        backward_pair(stripped, np.zeros((16, 16, 3)), None)


# --- loss plumbing -----------------------------------------------------------


def test_photometric_loss_values():
    img = np.zeros((2, 2, 3))
    assert photometric_loss(img, img) == 0.0
    target = img.copy()
    target[0, 0, 0] = 1.0
    assert photometric_loss(img, target) == pytest.approx(1.0 / 12.0, abs=1e-15)
    with pytest.raises(ValueError):
        photometric_loss(img, np.zeros((2, 3, 3)))


def test_photometric_loss_gradient_matches_definition():
    rng = np.random.default_rng(3)
    img = rng.random((4, 5, 3))
    target = rng.random((4, 5, 3))
    np.testing.assert_allclose(
        photometric_loss_gradient(img, target),
        2.0 * (img - target) / img.size,
        atol=1e-15,
    )


def test_finite_difference_helper_restores_parameters():
    set1, _, cam, config = small_scene(12, n=2, size=8)
    before = {name: getattr(set1, name).copy() for name in PARAM_BLOCKS}
    target = np.full((8, 8, 3), 0.3)
    finite_difference_gradients(
        lambda: photometric_loss(render(set1, cam, config).image, target), set1
    )
    for name in PARAM_BLOCKS:
        np.testing.assert_array_equal(getattr(set1, name), before[name])


def test_gradcheck_report_lines_cover_every_entry():
    report = gradcheck(0)
    lines = report.lines()
    assert len(lines) == len(report.entries)
    assert all("max_rel_err=" in line for line in lines)
    assert report.runtime_s > 0.0
