"""Pure numpy compositing kernels (fallback when the extension is not built).

Each tile is evaluated as a dense (pixels x entries) block. Transmittance
uses ``cumprod`` along the depth-sorted entries, which performs the same
sequence of multiplications as the compiled loop; channel sums go through
BLAS and may differ from the compiled kernel in the last bits.
"""
from __future__ import annotations

import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
POWER_MIN = -4.5


def _tile_pixels(tile, ntx, ts, width, height):
    tx, ty = tile % ntx, tile // ntx
    xs = np.arange(tx * ts, min(tx * ts + ts, width))
    ys = np.arange(ty * ts, min(ty * ts + ts, height))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return py.ravel(), px.ravel()


def _tile_alphas(px, py, g, means2d, conics, opac):
    dx = px[:, None] - means2d[g, 0][None, :]
    dy = py[:, None] - means2d[g, 1][None, :]
    a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    G = np.exp(power)
    a_raw = opac[g][None, :] * G
    alpha = np.minimum(a_raw, ALPHA_MAX)
    live = (power >= POWER_MIN) & (alpha >= ALPHA_MIN)
    alpha = np.where(live, alpha, 0.0)
    # stop at the first entry that would drive transmittance under T_MIN
    t_incl = np.cumprod(1.0 - alpha, axis=1)
    stop = np.logical_or.accumulate(live & (t_incl < T_MIN), axis=1)
    live &= ~stop
    alpha = np.where(live, alpha, 0.0)
    return dx, dy, G, a_raw, alpha, live


def forward(means2d, conics, opac, feats, background, ranges, entries, width, height,
            tile_size, num_threads=1):
    F = feats.shape[1]
    out = np.zeros((height, width, F))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for tile in range(ntx * nty):
        py, px = _tile_pixels(tile, ntx, tile_size, width, height)
        s, e = ranges[tile], ranges[tile + 1]
        if e == s:
            out[py, px] = background
            continue
        g = entries[s:e]
        _, _, _, _, alpha, live = _tile_alphas(px, py, g, means2d, conics, opac)
        t_incl = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((len(px), 1)), t_incl[:, :-1]], axis=1)
        w = alpha * t_excl
        Tf = t_incl[:, -1]
        out[py, px] = w @ feats[g] + Tf[:, None] * background[None, :]
        t_final[py, px] = Tf
        k = live.shape[1]
        last = np.where(live.any(axis=1), k - np.argmax(live[:, ::-1], axis=1), 0)
        n_contrib[py, px] = last
    return out, t_final, n_contrib


def backward(means2d, conics, opac, feats, background, ranges, entries, width, height,
             tile_size, t_final, n_contrib, grad_out, grad_alpha, num_threads=1):
    F = feats.shape[1]
    buf = np.zeros((len(entries), F + 6))
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    for tile in range(ntx * nty):
        s, e = ranges[tile], ranges[tile + 1]
        if e == s:
            continue
        py, px = _tile_pixels(tile, ntx, tile_size, width, height)
        g = entries[s:e]
        dx, dy, G, a_raw, alpha, live = _tile_alphas(px, py, g, means2d, conics, opac)
        t_incl = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((len(px), 1)), t_incl[:, :-1]], axis=1)
        w = alpha * t_excl
        Tf = t_incl[:, -1]
        go = grad_out[py, px]                      # (P, F)
        ga = grad_alpha[py, px]                    # (P,)
        gf = go @ feats[g].T                       # (P, K)  g . f_j
        contrib = gf * w
        # g . (sum_{j>i} f_j w_j + bg T_final)
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        behind += (go @ background)[:, None] * Tf[:, None]
        one_minus = 1.0 - alpha
        dalpha = t_excl * gf - behind / one_minus + (ga * Tf)[:, None] / one_minus
        dalpha = np.where(live, dalpha, 0.0)
        buf[s:e, :F] = w.T @ go
        free = live & (a_raw < ALPHA_MAX)
        dalpha = np.where(free, dalpha, 0.0)
        buf[s:e, F] = np.sum(G * dalpha, axis=0)
        dpow = alpha * dalpha
        a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
        buf[s:e, F + 1] = np.sum(dpow * (a * dx + b * dy), axis=0)
        buf[s:e, F + 2] = np.sum(dpow * (b * dx + c * dy), axis=0)
        buf[s:e, F + 3] = np.sum(-0.5 * dx * dx * dpow, axis=0)
        buf[s:e, F + 4] = np.sum(-dx * dy * dpow, axis=0)
        buf[s:e, F + 5] = np.sum(-0.5 * dy * dy * dpow, axis=0)
    return buf
