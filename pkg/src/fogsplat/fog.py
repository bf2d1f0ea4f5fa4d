"""Per-Gaussian atmospheric scattering: depth -> transmission -> foggy color."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import InvalidParameterError, logit, sigmoid


@dataclass
class FogParams:
    """Learnable medium parameters.

    ``beta_weight`` is the weight vector of a 1-D convolution applied to the
    normalized Gaussian depths sorted front to back. With the default width
    of 1 it is a single scalar: the scattering coefficient itself.
    """

    beta_weight: np.ndarray = field(default_factory=lambda: np.array([0.1]))
    atmos_latent: np.ndarray = field(default_factory=lambda: np.full(3, float(logit(0.8))))
    use_sigmoid: bool = True
    beta_lr: float = 1e-7
    beta_lr_decay: float = 0.1

    def __post_init__(self):
        self.beta_weight = np.atleast_1d(np.asarray(self.beta_weight, dtype=float)).copy()
        self.atmos_latent = np.asarray(self.atmos_latent, dtype=float).reshape(3).copy()
        if len(self.beta_weight) % 2 != 1:
            raise InvalidParameterError("beta kernel width must be odd")

    @classmethod
    def initial(cls, beta: float = 0.1, airlight=0.8, *, use_sigmoid: bool = True,
                kernel_width: int = 1) -> "FogParams":
        w = np.zeros(kernel_width)
        w[kernel_width // 2] = beta
        A = np.broadcast_to(np.asarray(airlight, dtype=float), (3,))
        return cls(w, logit(A), use_sigmoid)

    @property
    def beta(self) -> float:
        return float(self.beta_weight[len(self.beta_weight) // 2])

    @property
    def airlight(self) -> np.ndarray:
        return sigmoid(self.atmos_latent)

    def params(self) -> dict[str, np.ndarray]:
        return {"beta_weight": self.beta_weight, "atmos_latent": self.atmos_latent}

    def copy(self) -> "FogParams":
        return FogParams(self.beta_weight.copy(), self.atmos_latent.copy(), self.use_sigmoid,
                         self.beta_lr, self.beta_lr_decay)


def normalize_depths(depths) -> np.ndarray:
    """Min-max normalize camera depths of the current view to [0, 1].

    The result is treated as a constant by every backward pass.
    """
    d = np.asarray(depths, dtype=float)
    if d.size == 0:
        return d.copy()
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


@dataclass
class TransmissionCache:
    d_sorted: np.ndarray
    order: np.ndarray
    u: np.ndarray
    e: np.ndarray
    t: np.ndarray
    use_sigmoid: bool


def _conv_sorted(d_norm, weights):
    order = np.argsort(d_norm, kind="stable")
    s = d_norm[order]
    k = len(weights)
    if k == 1:
        return s, order, weights[0] * d_norm
    c = k // 2
    padded = np.concatenate([np.zeros(c), s, np.zeros(c)])
    u_sorted = np.zeros_like(s)
    for m in range(k):
        u_sorted += weights[m] * padded[m:m + len(s)]
    u = np.empty_like(s)
    u[order] = u_sorted
    return s, order, u


def transmission_forward(d_norm, fog: FogParams):
    d_norm = np.asarray(d_norm, dtype=float)
    s, order, u = _conv_sorted(d_norm, fog.beta_weight)
    e = np.exp(-np.maximum(u, 0.0))
    t = sigmoid(e) if fog.use_sigmoid else e
    return t, TransmissionCache(s, order, u, e, t, fog.use_sigmoid)


def gaussian_transmission(d_norm, fog: FogParams) -> np.ndarray:
    return transmission_forward(d_norm, fog)[0]


def transmission_backward(cache: TransmissionCache, grad_t, fog: FogParams) -> np.ndarray:
    """Gradient on ``fog.beta_weight``; zero on the flat side of the ReLU."""
    g = np.asarray(grad_t, dtype=float)
    if cache.use_sigmoid:
        g = g * cache.t * (1.0 - cache.t)
    g_u = np.where(cache.u > 0.0, -g * cache.e, 0.0)
    k = len(fog.beta_weight)
    if k == 1:
        d = np.empty_like(cache.d_sorted)
        d[cache.order] = cache.d_sorted
        return np.array([np.dot(g_u, d)])
    c = k // 2
    g_sorted = g_u[cache.order]
    padded = np.concatenate([np.zeros(c), cache.d_sorted, np.zeros(c)])
    return np.array([np.dot(g_sorted, padded[m:m + len(g_sorted)]) for m in range(k)])


def fog_colors(clear_colors, t, airlight) -> np.ndarray:
    t = np.asarray(t, dtype=float)[:, None]
    return np.asarray(clear_colors, dtype=float) * t + np.asarray(airlight, dtype=float)[None, :] * (1.0 - t)


def fog_backward(clear_colors, t, fog: FogParams, cache: TransmissionCache,
                 grad_foggy, grad_t_extra=None):
    """Returns (grad_clear_colors, grad_beta_weight, grad_atmos_latent)."""
    A = fog.airlight
    t = np.asarray(t, dtype=float)
    grad_foggy = np.asarray(grad_foggy, dtype=float)
    grad_clear = grad_foggy * t[:, None]
    grad_t = np.sum(grad_foggy * (clear_colors - A[None, :]), axis=1)
    if grad_t_extra is not None:
        grad_t = grad_t + grad_t_extra
    grad_A = np.sum(grad_foggy * (1.0 - t)[:, None], axis=0)
    return grad_clear, transmission_backward(cache, grad_t, fog), grad_A * A * (1.0 - A)
