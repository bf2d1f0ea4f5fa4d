import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err
from fogsplat.losses import (LOSS_TERMS, LossWeights, depth_loss, depth_weight, depth_weighted_recon,
                             fit_affine, l1_loss, log_interp, psnr, reconstruction_loss, ssim,
                             ssim_and_grad, total_loss)

C1 = 0.01 ** 2


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_black_white():
    # luminance term (2*0*1 + C1) / (0 + 1 + C1); contrast-structure term C2 / C2
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    assert ssim(a, b) == pytest.approx(C1 / (1 + C1), rel=1e-9)


def test_ssim_symmetric(rng):
    a, b = rng.uniform(0, 1, (20, 17, 3)), rng.uniform(0, 1, (20, 17, 3))
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12


def test_ssim_small_images_use_smaller_window(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert ssim(a, a) == 1.0
    assert -1 <= ssim(a, rng.uniform(0, 1, (8, 8, 3))) <= 1


def test_ssim_gradient(rng):
    a, b = rng.uniform(0, 1, (14, 13, 3)), rng.uniform(0, 1, (14, 13, 3))
    _, g = ssim_and_grad(a, b)
    assert rel_err(g, central_diff(lambda: ssim(a, b), a)) <= 1e-5


def test_psnr_examples(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        l1_loss(np.zeros((3, 3)), np.zeros((3, 4)))


def test_reconstruction_loss_examples(rng):
    a = rng.uniform(0, 1, (12, 12, 3))
    assert reconstruction_loss(a, a)[0] == pytest.approx(0.0, abs=1e-15)
    b = np.zeros((12, 12, 3))
    val, _ = reconstruction_loss(b, b + 1.0, 0.2)
    assert val == pytest.approx(0.8 * 1.0 + 0.2 * (1 - C1 / (1 + C1)), rel=1e-12)
    np.testing.assert_array_equal(reconstruction_loss(a, b, 0.0)[1], l1_loss(a, b)[1])


def test_reconstruction_loss_gradient(rng):
    a, b = rng.uniform(0, 1, (13, 12, 3)), rng.uniform(0, 1, (13, 12, 3))
    _, g = reconstruction_loss(a, b)
    assert rel_err(g, central_diff(lambda: reconstruction_loss(a, b)[0], a)) <= 1e-5


def test_depth_weight_schedule():
    assert depth_weight(0, 1000) == 1.0
    assert depth_weight(1000, 1000) == pytest.approx(0.01, abs=1e-15)
    assert depth_weight(500, 1000) == pytest.approx(0.1, abs=1e-12)
    assert depth_weight(5000, 1000) == pytest.approx(0.01, abs=1e-15)
    vals = [depth_weight(i, 100) for i in range(101)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        log_interp(1, 0, 1.0, 0.1)


def test_depth_loss_examples(rng):
    p = rng.uniform(1, 5, (6, 7))
    loss, _, (a, b) = depth_loss(p, p)
    assert loss == pytest.approx(0, abs=1e-12) and a == pytest.approx(1) and b == pytest.approx(0, abs=1e-12)
    assert depth_loss(2 * p + 3, p)[0] == pytest.approx(0, abs=1e-12)


def test_depth_loss_matches_normal_equations(rng):
    d, p = rng.uniform(0, 4, (9, 8)), rng.uniform(0, 1, (9, 8))
    X = np.column_stack([p.ravel(), np.ones(p.size)])
    a, b = np.linalg.solve(X.T @ X, X.T @ d.ravel())
    loss, g, ab = depth_loss(d, p)
    np.testing.assert_allclose(ab, (a, b), atol=1e-10)
    assert loss == pytest.approx(np.mean(np.abs(a * p + b - d)), abs=1e-10)
    # frozen alignment: gradient w.r.t. the rendered depth only
    fd = central_diff(lambda: depth_loss(d, p, align=ab)[0], d)
    assert rel_err(g, fd) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
def test_depth_loss_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    d, p = rng.uniform(0, 4, (6, 6)), rng.uniform(0, 1, (6, 6))
    assert abs(depth_loss(d, a * p + b)[0] - depth_loss(d, p)[0]) <= 1e-10


def test_constant_pseudo_depth_falls_back(caplog):
    d = np.arange(12.0).reshape(3, 4)
    a, b = fit_affine(np.full((3, 4), 2.0), d)
    assert a == 1.0 and b == pytest.approx(np.mean(d) - 2.0)


def test_depth_weighted_recon_examples(rng):
    r, t = rng.uniform(0, 1, (5, 6, 3)), rng.uniform(0, 1, (5, 6, 3))
    assert depth_weighted_recon(r, r, rng.uniform(0, 1, (5, 6)))[0] == 0.0
    # a constant depth map normalizes to zero weight; a 0/1 map selects pixels
    d = np.zeros((5, 6))
    d[2:, :] = 1.0
    loss, g = depth_weighted_recon(r, t, d)
    assert loss == pytest.approx(np.sum(np.abs(r - t)[2:]) / r.size)
    assert not g[:2].any()
    fd = central_diff(lambda: depth_weighted_recon(r, t, d)[0], r)
    assert rel_err(g, fd) <= 1e-6


def test_total_loss_bookkeeping():
    comps = {"rec": 0.3, "dcp": 2.0, "bcp": 0.5, "depth": 0.7, "dweighted": 0.2}
    w = LossWeights()
    rep = total_loss(comps, w, 0, 100)
    assert rep.total == pytest.approx(0.3 + 0.1 * 2.0 + 0.1 * 0.5 + 1.0 * 0.7 + 0.1 * 0.2, abs=1e-12)
    assert total_loss(comps, w, 100, 100).weights["depth"] == pytest.approx(0.01)
    only_rec = LossWeights(enabled={k: k == "rec" for k in LOSS_TERMS})
    assert total_loss(comps, only_rec, 3, 100).total == 0.3


def test_total_loss_is_non_negative_on_random_images(rng):
    for _ in range(5):
        a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
        assert reconstruction_loss(a, b)[0] >= 0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_D=-1)
    assert LossWeights(enabled={"rec": False}).enabled["rec"] is True
