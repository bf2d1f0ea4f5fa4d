"""Reconstruction, depth and composite losses, the depth-weight schedule, and metrics.

Every differentiable loss returns ``(value, grad)`` where ``grad`` is the
gradient with respect to the rendered quantity (first argument).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LOSS_TERMS = ("rec", "dcp", "bcp", "depth", "dweighted")


def _check_shapes(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _window_for(shape) -> np.ndarray:
    # images smaller than the window use the largest odd window that fits
    size = min(SSIM_WINDOW, shape[0], shape[1])
    size -= (size + 1) % 2
    return gaussian_window(size)


def _filter_valid(x, w):
    r = len(w) // 2
    y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def _filter_valid_adjoint(g, w, shape):
    r = len(w) // 2
    full = np.zeros(shape)
    full[r:shape[0] - r, r:shape[1] - r] = g
    return correlate1d(correlate1d(full, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def _ssim_parts(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_shapes(a, b, "ssim")
    w = _window_for(a.shape)
    f = lambda x: _filter_valid(x, w)  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    e_aa, e_bb, e_ab = f(a * a), f(b * b), f(a * b)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * cov + SSIM_C2
    den1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    smap = (num1 * num2) / (den1 * den2)
    return a, b, w, mu_a, mu_b, num1, num2, den1, den2, smap


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over valid pixels and channels."""
    return float(np.mean(_ssim_parts(a, b)[-1]))


def ssim_and_grad(a, b):
    """SSIM value and its gradient with respect to ``a``."""
    a, b, w, mu_a, mu_b, num1, num2, den1, den2, smap = _ssim_parts(a, b)
    n = smap.size
    # partials of the map w.r.t. (mu_a, var_a, cov)
    d_mu_a = (2 * mu_b * num2) / (den1 * den2) - smap * 2 * mu_a / den1
    d_var_a = -smap / den2
    d_cov = 2 * num1 / (den1 * den2)
    # chain to raw moments: var_a = E[a^2] - mu_a^2, cov = E[ab] - mu_a mu_b
    g_mu = (d_mu_a - 2 * mu_a * d_var_a - mu_b * d_cov) / n
    g_eaa = d_var_a / n
    g_eab = d_cov / n
    adj = lambda g: _filter_valid_adjoint(g, w, a.shape)  # noqa: E731
    grad = adj(g_mu) + 2 * a * adj(g_eaa) + b * adj(g_eab)
    return float(np.mean(smap)), grad


def psnr(a, b, peak: float = 1.0) -> float:
    _check_shapes(a, b, "psnr")
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def l1_loss(render, target):
    _check_shapes(render, target, "l1_loss")
    diff = np.asarray(render, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def reconstruction_loss(render, target, lambda_ssim: float = 0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    l1, g1 = l1_loss(render, target)
    if lambda_ssim == 0.0:
        return (1.0 - lambda_ssim) * l1, (1.0 - lambda_ssim) * g1
    s, gs = ssim_and_grad(render, target)
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s), (1.0 - lambda_ssim) * g1 - lambda_ssim * gs


def log_interp(step: int, max_steps: int, start: float, end: float) -> float:
    if max_steps <= 0:
        raise ValueError(f"max_steps must be positive, got {max_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    s = min(step / max_steps, 1.0)
    return math.exp((1.0 - s) * math.log(start) + s * math.log(end))


def depth_weight(iteration: int, max_iter: int, start: float = 1.0, end: float = 0.01) -> float:
    return log_interp(iteration, max_iter, start, end)


def fit_affine(d_pseudo, d_rendered, mask=None):
    """Least-squares (scale, shift) mapping pseudo-depth onto rendered depth."""
    p = np.asarray(d_pseudo, dtype=float)
    d = np.asarray(d_rendered, dtype=float)
    if mask is not None:
        p, d = p[mask], d[mask]
    p, d = p.ravel(), d.ravel()
    pc = p - p.mean()
    var = float(np.dot(pc, pc))
    if var <= 1e-18 * max(1.0, float(np.dot(p, p))):
        log.warning("pseudo-depth is constant; skipping scale alignment")
        return 1.0, float(np.mean(d - p))
    a = float(np.dot(pc, d - d.mean())) / var
    return a, float(d.mean() - a * p.mean())


def depth_loss(d_rendered, d_pseudo, align=None):
    """Scale/shift-invariant L1 between rendered depth and pseudo-depth.

    The alignment is fitted on gradient-frozen values (or taken from
    ``align``); the gradient flows to ``d_rendered`` only. Returns
    ``(loss, grad, (scale, shift))``.
    """
    _check_shapes(d_rendered, d_pseudo, "depth_loss")
    d = np.asarray(d_rendered, dtype=float)
    p = np.asarray(d_pseudo, dtype=float)
    a, b = fit_affine(p, d) if align is None else align
    r = a * p + b - d
    return float(np.mean(np.abs(r))), -np.sign(r) / r.size, (a, b)


def normalize_map(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def depth_weighted_recon(render, target, d_frozen):
    """Mean of normalized-depth-weighted absolute error; gradient to ``render`` only."""
    _check_shapes(render, target, "depth_weighted_recon")
    if np.shape(d_frozen) != np.shape(render)[:2]:
        raise ValueError(f"depth_weighted_recon: depth shape {np.shape(d_frozen)} "
                         f"does not match image {np.shape(render)}")
    w = normalize_map(d_frozen)[:, :, None]
    diff = np.asarray(render, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(w * np.abs(diff))), w * np.sign(diff) / diff.size


@dataclass
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_D: float = 0.1
    lambda_B: float = 0.1
    lambda_d_rec: float = 0.1
    lambda_d_start: float = 1.0
    lambda_d_end: float = 0.01
    lambda_smooth: float = 0.1
    enabled: dict = field(default_factory=lambda: {k: True for k in LOSS_TERMS})

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_D", "lambda_B", "lambda_d_rec", "lambda_d_start",
                     "lambda_d_end", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.enabled = {k: bool(self.enabled.get(k, True)) for k in LOSS_TERMS}
        self.enabled["rec"] = True

    def term_weights(self, iteration: int, max_iter: int) -> dict[str, float]:
        w = {"rec": 1.0, "dcp": self.lambda_D, "bcp": self.lambda_B,
             "depth": depth_weight(iteration, max_iter, self.lambda_d_start, self.lambda_d_end),
             "dweighted": self.lambda_d_rec}
        return {k: (v if self.enabled[k] else 0.0) for k, v in w.items()}


@dataclass
class LossReport:
    iteration: int
    total: float
    components: dict[str, float]
    weights: dict[str, float]

    def to_json(self) -> dict:
        return {"iteration": self.iteration, "total": self.total,
                "components": dict(self.components), "weights": dict(self.weights)}


def total_loss(components: dict[str, float], weights: LossWeights, iteration: int,
               max_iter: int) -> LossReport:
    """Weighted sum over the enabled terms; disabled or missing terms count as zero."""
    w = weights.term_weights(iteration, max_iter)
    total = 0.0
    for k in LOSS_TERMS:
        if w[k] != 0.0 and k in components:
            total += w[k] * components[k]
    return LossReport(iteration, total, {k: float(v) for k, v in components.items()}, w)
