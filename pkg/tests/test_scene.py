import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err
from fogsplat.scene import (Camera, GaussianCloud, InvalidParameterError, activate, build_covariance,
                            build_covariance_backward, sh_backward, sh_basis, sh_to_color)

finite = st.floats(-2.0, 2.0, allow_nan=False)


def test_identity_latents_give_identity_covariance():
    np.testing.assert_allclose(build_covariance(np.zeros(3), [1, 0, 0, 0]), np.eye(3), atol=1e-15)


def test_scaled_axes_on_diagonal():
    S = build_covariance(np.log([1.0, 2.0, 3.0]), [1, 0, 0, 0])
    np.testing.assert_allclose(S, np.diag([1.0, 4.0, 9.0]), atol=1e-12)


def test_unnormalized_quaternion_is_normalized():
    np.testing.assert_allclose(build_covariance([0.1, 0.2, 0.3], [2, 0.4, -1, 0.2]),
                               build_covariance([0.1, 0.2, 0.3], [1, 0.2, -0.5, 0.1]), atol=1e-14)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        build_covariance(np.zeros(3), [0, 0, 0, 0])


def test_isotropic_log_scale_gradient_of_trace():
    gs, gq = build_covariance_backward(np.eye(3), np.zeros(3), [1, 0, 0, 0])
    np.testing.assert_allclose(gs, [2, 2, 2], atol=1e-12)
    np.testing.assert_allclose(gq, 0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=4, max_size=4))
def test_covariance_is_symmetric_positive_definite(ls, q):
    q = np.asarray(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    S = build_covariance(ls, q)
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(S) > 0)


def test_covariance_backward_matches_finite_differences(rng):
    for _ in range(5):
        ls, q, G = rng.normal(0, 0.5, 3), rng.normal(size=4), rng.normal(size=(3, 3))
        gs, gq = build_covariance_backward(G, ls, q)
        f = lambda: float(np.sum(G * build_covariance(ls, q)))  # noqa: E731
        assert rel_err(gs, central_diff(f, ls)) <= 1e-6
        assert rel_err(gq, central_diff(f, q)) <= 1e-6


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_sh_gradients(rng, degree):
    n, K = 4, (degree + 1) ** 2
    coeffs = rng.normal(0, 0.3, (n, K, 3))
    dirs = rng.normal(size=(n, 3))
    W = rng.normal(size=(n, 3))
    f = lambda: float(np.sum(W * sh_to_color(coeffs, dirs / np.linalg.norm(dirs, axis=1, keepdims=True))))  # noqa
    gc, gd = sh_backward(coeffs, dirs, W)
    assert rel_err(gc, central_diff(f, coeffs)) <= 1e-6
    if degree:
        assert rel_err(gd, central_diff(f, dirs)) <= 1e-6


def test_sh_basis_derivative(rng):
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    B, dB = sh_basis(d, 3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        fd = (sh_basis(d + e, 3)[0] - sh_basis(d - e, 3)[0]) / 2e-6
        np.testing.assert_allclose(dB[:, :, k], fd, atol=1e-8)


def test_activation_ranges(rng):
    c = GaussianCloud(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)), rng.normal(size=(20, 4)),
                      rng.normal(0, 5, 20), rng.normal(size=(20, 1, 3)))
    a = activate(c)
    assert np.all(a.scales > 0)
    np.testing.assert_allclose(np.linalg.norm(a.quats, axis=1), 1, atol=1e-12)
    assert np.all((a.opacities > 0) & (a.opacities < 1))


def test_activation_rejects_nan():
    c = GaussianCloud(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.0], np.zeros((1, 1, 3)))
    c.log_scales[0, 1] = np.nan
    with pytest.raises(InvalidParameterError):
        activate(c)


def test_cloud_requires_valid_sh_count():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.0], np.zeros((1, 3, 3)))


def test_from_points_colors_round_trip(rng):
    rgb = rng.uniform(0, 1, (10, 3))
    c = GaussianCloud.from_points(rng.normal(size=(10, 3)), rgb, opacity=0.25)
    np.testing.assert_allclose(activate(c).colors, rgb, atol=1e-12)
    np.testing.assert_allclose(activate(c).opacities, 0.25, atol=1e-12)


def test_camera_rejects_non_orthonormal():
    R = np.eye(3)
    R[0, 1] = 2e-3
    with pytest.raises(InvalidParameterError):
        Camera(100, 100, 4, 4, 8, 8, R, np.zeros(3))


def test_camera_reorthonormalizes_small_error():
    R = np.eye(3)
    R[0, 1] = 1e-5
    cam = Camera(100, 100, 4, 4, 8, 8, R, np.zeros(3))
    np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-14)


def test_look_at_puts_target_on_axis():
    cam = Camera.look_at([1, 2, -5], [0, 0, 1], width=9, height=7)
    p = cam.to_camera(np.array([[0.0, 0.0, 1.0]]))[0]
    np.testing.assert_allclose(p[:2], 0, atol=1e-12)
    assert p[2] > 0


def test_camera_dict_round_trip():
    cam = Camera.look_at([1, 2, -5], [0, 0, 1], width=9, height=7, name="a")
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_array_equal(back.t, cam.t)
    assert (back.fx, back.cx, back.name) == (cam.fx, cam.cx, "a")
