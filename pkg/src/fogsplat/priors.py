"""Dark/bright channel transmission priors and the losses that supervise the
rendered transmission map with them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .scene import InvalidParameterError

T_FLOOR = 0.05
DEFAULT_PATCH = 15
DEFAULT_OMEGA = 0.95
LAPLACIAN_EPS = 1e-4
LAPLACIAN_MAX_SIDE = 128


@dataclass
class PriorMaps:
    t_dcp: np.ndarray
    t_bcp: np.ndarray
    A_est: np.ndarray
    patch_size: int = DEFAULT_PATCH
    omega: float = DEFAULT_OMEGA


def _check_patch(patch: int) -> int:
    patch = int(patch)
    if patch < 1 or patch % 2 == 0:
        raise InvalidParameterError(f"patch size must be odd and >= 1, got {patch}")
    return patch


def dark_channel(image, patch: int = DEFAULT_PATCH) -> np.ndarray:
    # 'nearest' padding repeats border pixels, equivalent to clamping the window
    return minimum_filter(np.min(np.asarray(image, dtype=float), axis=2), size=_check_patch(patch),
                          mode="nearest")


def bright_channel(image, patch: int = DEFAULT_PATCH) -> np.ndarray:
    return maximum_filter(np.max(np.asarray(image, dtype=float), axis=2), size=_check_patch(patch),
                          mode="nearest")


def estimate_atmospheric_light(image, dark, top_fraction: float = 1e-3) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    flat_dark = np.asarray(dark, dtype=float).ravel()
    n = max(1, int(top_fraction * flat_dark.size))
    top = np.argsort(-flat_dark, kind="stable")[:n]
    return image.reshape(-1, 3)[top].mean(axis=0)


def dcp_transmission(image, A, omega: float = DEFAULT_OMEGA, patch: int = DEFAULT_PATCH) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(3)
    if np.any(A <= 0):
        raise InvalidParameterError(f"atmospheric light must be positive per channel, got {A}")
    t = 1.0 - omega * dark_channel(np.asarray(image, dtype=float) / A, patch)
    return np.clip(t, T_FLOOR, 1.0)


def bcp_transmission(image, A, patch: int = DEFAULT_PATCH) -> np.ndarray:
    a_bar = float(np.mean(A))
    if a_bar >= 1.0:
        raise InvalidParameterError(f"mean atmospheric light must be < 1, got {a_bar}")
    t = (bright_channel(image, patch) - a_bar) / (1.0 - a_bar)
    return np.clip(t, T_FLOOR, 1.0)


def compute_prior_maps(image, omega: float = DEFAULT_OMEGA, patch: int = DEFAULT_PATCH,
                       airlight=None) -> PriorMaps:
    """Both prior maps; the atmospheric light is estimated from the dark
    channel unless ``airlight`` is supplied."""
    if airlight is None:
        A = estimate_atmospheric_light(image, dark_channel(image, patch))
    else:
        A = np.asarray(airlight, dtype=float).reshape(3)
    A_safe = np.clip(A, 1e-3, 1.0 - 1e-3)
    return PriorMaps(dcp_transmission(image, A_safe, omega, patch), bcp_transmission(image, A_safe, patch),
                     A, patch, omega)


# ---------------------------------------------------------------- matting Laplacian

def _window_sum(a):
    """Sum over every 3x3 window fully inside the image; output (H-2, W-2, ...)."""
    H, W = a.shape[:2]
    out = np.zeros((H - 2, W - 2) + a.shape[2:])
    for dy in range(3):
        for dx in range(3):
            out += a[dy:dy + H - 2, dx:dx + W - 2]
    return out


def _scatter_windows(a, shape):
    """Adjoint of ``_window_sum``: add each window value to its 9 pixels."""
    out = np.zeros(shape + a.shape[2:])
    H, W = shape
    for dy in range(3):
        for dx in range(3):
            out[dy:dy + H - 2, dx:dx + W - 2] += a
    return out


class MattingLaplacian:
    """Matrix-free closed-form matting Laplacian with 3x3 windows.

    The guide is area-downsampled so neither side exceeds ``max_side``;
    ``apply_full`` composes the operator with that downsampling and its
    exact adjoint so callers work at full resolution.
    """

    def __init__(self, guide, eps: float = LAPLACIAN_EPS, max_side: int = LAPLACIAN_MAX_SIDE):
        guide = np.asarray(guide, dtype=float)
        self.full_shape = guide.shape[:2]
        self.factor = max(1, int(np.ceil(max(self.full_shape) / max_side)))
        self.guide = self.downsample(guide)
        I = self.guide
        H, W = I.shape[:2]
        self.shape = (H, W)
        if H < 3 or W < 3:
            self.mu = None
            return
        self.mu = _window_sum(I) / 9.0
        outer = _window_sum(I[:, :, :, None] * I[:, :, None, :]) / 9.0
        cov = outer - self.mu[..., :, None] * self.mu[..., None, :]
        self.M = np.linalg.inv(cov + (eps / 9.0) * np.eye(3))
        self.counts = _scatter_windows(np.ones((H - 2, W - 2)), self.shape)

    def downsample(self, a):
        f = self.factor
        if f == 1:
            return np.asarray(a, dtype=float)
        H, W = a.shape[0] // f, a.shape[1] // f
        a = np.asarray(a, dtype=float)[:H * f, :W * f]
        return a.reshape(H, f, W, f, *a.shape[2:]).mean(axis=(1, 3))

    def downsample_adjoint(self, a):
        f = self.factor
        if f == 1:
            return a
        out = np.zeros(self.full_shape)
        up = np.repeat(np.repeat(a, f, axis=0), f, axis=1) / (f * f)
        out[:up.shape[0], :up.shape[1]] = up
        return out

    def apply(self, x) -> np.ndarray:
        """L @ x on the (possibly downsampled) grid."""
        x = np.asarray(x, dtype=float)
        if self.mu is None:
            return np.zeros_like(x)
        xbar = _window_sum(x) / 9.0
        Ix = _window_sum(self.guide * x[:, :, None]) / 9.0
        v = np.einsum("hwij,hwj->hwi", self.M, Ix - self.mu * xbar[..., None])
        return (self.counts * x - _scatter_windows(xbar, self.shape)
                - np.sum(self.guide * _scatter_windows(v, self.shape), axis=2)
                + _scatter_windows(np.sum(self.mu * v, axis=2), self.shape))

    def quadratic(self, x_full):
        """(D x)^T L (D x) and its gradient w.r.t. the full-resolution x."""
        xd = self.downsample(x_full)
        Lx = self.apply(xd)
        return float(np.sum(xd * Lx)), self.downsample_adjoint(2.0 * Lx)


def matting_laplacian_apply(guide, x, eps: float = LAPLACIAN_EPS) -> np.ndarray:
    return MattingLaplacian(guide, eps, max_side=max(np.shape(x))).apply(x)


# ---------------------------------------------------------------- prior losses

def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def dcp_loss(t_rendered, t_dcp, guide=None, lambda_smooth: float = 0.1, *,
             laplacian: MattingLaplacian | None = None, literal: bool = False):
    """Smoothness of the rendered transmission under the matting Laplacian plus a
    squared fidelity term to the DCP map. ``literal=True`` evaluates the
    quadratic on the constant DCP map instead (no gradient from that term)."""
    _same_shape(t_rendered, t_dcp, "dcp_loss")
    t_rendered = np.asarray(t_rendered, dtype=float)
    if laplacian is None:
        laplacian = MattingLaplacian(guide)
    if literal:
        smooth, g_smooth = laplacian.quadratic(t_dcp)[0], 0.0
    else:
        smooth, g_smooth = laplacian.quadratic(t_rendered)
    diff = np.asarray(t_dcp, dtype=float) - t_rendered
    loss = smooth + lambda_smooth * float(np.sum(diff * diff))
    return loss, g_smooth - 2.0 * lambda_smooth * diff


def bcp_loss(t_rendered, t_bcp):
    _same_shape(t_rendered, t_bcp, "bcp_loss")
    diff = np.asarray(t_bcp, dtype=float) - np.asarray(t_rendered, dtype=float)
    return float(np.mean(np.abs(diff))), -np.sign(diff) / diff.size
