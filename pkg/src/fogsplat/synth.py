"""Synthetic haze from clear images and depth, plus the analytic inverse."""
from __future__ import annotations

import numpy as np

from .losses import normalize_map
from .scene import InvalidParameterError

T_FLOOR = 0.05
BETA_RANGE = (0.4, 1.2)
AIRLIGHT_RANGE = (0.7, 0.95)


def synthesize_fog(clear, depth, beta: float, A):
    """Hazy image I = J t + A (1 - t) with t = exp(-beta * depth normalized to [0, 1])."""
    if beta < 0:
        raise InvalidParameterError(f"scattering coefficient must be >= 0, got {beta}")
    clear = np.asarray(clear, dtype=float)
    t = np.exp(-beta * normalize_map(depth))
    A = np.asarray(A, dtype=float).reshape(1, 1, 3)
    hazy = clear * t[:, :, None] + A * (1.0 - t[:, :, None])
    return hazy, t


def analytic_dehaze(hazy, t_map, A, t_floor: float = T_FLOOR) -> np.ndarray:
    t = np.maximum(np.asarray(t_map, dtype=float), t_floor)[:, :, None]
    A = np.asarray(A, dtype=float).reshape(1, 1, 3)
    return np.clip((np.asarray(hazy, dtype=float) - A * (1.0 - t)) / t, 0.0, 1.0)


def sample_scene_params(seed: int):
    rng = np.random.default_rng(seed)
    beta = float(rng.uniform(*BETA_RANGE))
    A = rng.uniform(*AIRLIGHT_RANGE, size=3)
    return beta, A
