"""Tile binning, depth sorting, compositing and the render/backward orchestration."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _composite_py
from .fog import (FogParams, fog_backward, fog_colors, normalize_depths, transmission_backward,
                  transmission_forward)
from .projection import Projected, project, project_backward
from .scene import SH_C0, Camera, GaussianCloud, sh_backward, sh_to_color

try:
    from . import _composite as _composite_ext
except ImportError:  # extension not built
    _composite_ext = None

TILE_SIZE = 16
MODES = ("foggy", "clear", "transmission", "depth")
# feature layout: color (3), transmission, depth
N_FEATS = 5


def _select_backend():
    want = os.environ.get("FOGSPLAT_BACKEND", "").lower()
    if want == "python" or _composite_ext is None:
        return "python", _composite_py
    return "compiled", _composite_ext


BACKEND, _kernels = _select_backend()


def set_backend(name: str) -> None:
    """Switch compositing kernels at runtime ('compiled' or 'python')."""
    global BACKEND, _kernels
    if name == "compiled":
        if _composite_ext is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        BACKEND, _kernels = "compiled", _composite_ext
    elif name == "python":
        BACKEND, _kernels = "python", _composite_py
    else:
        raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    return _composite_ext is not None


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("FOGSPLAT_THREADS", "0")) or os.cpu_count() or 1)
    except ValueError:
        return 1


class CorruptStateError(RuntimeError):
    pass


@dataclass
class TileBins:
    tile_size: int
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray   # (tiles + 1,) offsets into entries
    entries: np.ndarray  # indices into the Projected arrays, per tile sorted by (depth, source)
    source: np.ndarray   # Projected.index, for reporting

    def tile(self, tx: int, ty: int) -> list[int]:
        """Source indices of the Gaussians binned into tile (tx, ty), front to back."""
        t = ty * self.tiles_x + tx
        return self.source[self.entries[self.ranges[t]:self.ranges[t + 1]]].tolist()


def bin_and_sort(proj: Projected, width: int, height: int, tile_size: int = TILE_SIZE) -> TileBins:
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    m = len(proj)
    if m == 0:
        return TileBins(tile_size, ntx, nty, np.zeros(ntx * nty + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int64), proj.index)
    mx, my = proj.means2d[:, 0], proj.means2d[:, 1]
    r = proj.radii
    x_lo = np.clip(np.ceil(mx - r), 0, width - 1).astype(np.int64) // tile_size
    x_hi = np.clip(np.floor(mx + r), 0, width - 1).astype(np.int64) // tile_size
    y_lo = np.clip(np.ceil(my - r), 0, height - 1).astype(np.int64) // tile_size
    y_hi = np.clip(np.floor(my + r), 0, height - 1).astype(np.int64) // tile_size
    nx = np.maximum(x_hi - x_lo + 1, 0)
    ny = np.maximum(y_hi - y_lo + 1, 0)
    counts = nx * ny
    g = np.repeat(np.arange(m), counts)
    local = np.arange(len(g)) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x_lo[g] + local % nx[g]
    ty = y_lo[g] + local // nx[g]
    # keep tiles whose pixel-center rectangle meets the disc
    qx = np.clip(mx[g], tx * tile_size, np.minimum(tx * tile_size + tile_size, width) - 1)
    qy = np.clip(my[g], ty * tile_size, np.minimum(ty * tile_size + tile_size, height) - 1)
    hit = (mx[g] - qx) ** 2 + (my[g] - qy) ** 2 <= r[g] ** 2
    g, tile_id = g[hit], (ty * ntx + tx)[hit]
    order = np.lexsort((proj.index[g], proj.depths[g], tile_id))
    entries = np.ascontiguousarray(g[order], dtype=np.int64)
    ranges = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=ntx * nty), out=ranges[1:])
    return TileBins(tile_size, ntx, nty, ranges, entries, proj.index)


def composite_forward(proj: Projected, bins: TileBins, feats, background, width, height):
    feats = np.ascontiguousarray(feats, dtype=float)
    if not np.all(np.isfinite(feats)):
        raise CorruptStateError("non-finite per-Gaussian channel value")
    return _kernels.forward(proj.means2d, proj.conics, proj.opacities, feats,
                            np.ascontiguousarray(background, dtype=float), bins.ranges,
                            bins.entries, width, height, bins.tile_size, num_threads())


def composite_backward(proj: Projected, bins: TileBins, feats, background, width, height,
                       t_final, n_contrib, grad_out, grad_alpha):
    """Returns grads on (feats (M, F), opacities (M,), means2d (M, 2), conics (M, 3))."""
    if t_final.shape != (height, width) or n_contrib.shape != (height, width):
        raise CorruptStateError("replay state does not match the image size")
    if n_contrib.size and n_contrib.max(initial=0) > np.diff(bins.ranges).max(initial=0):
        raise CorruptStateError("replay state does not match the tile lists")
    feats = np.ascontiguousarray(feats, dtype=float)
    F = feats.shape[1]
    buf = _kernels.backward(proj.means2d, proj.conics, proj.opacities, feats,
                            np.ascontiguousarray(background, dtype=float), bins.ranges,
                            bins.entries, width, height, bins.tile_size,
                            np.ascontiguousarray(t_final), np.ascontiguousarray(n_contrib),
                            np.ascontiguousarray(grad_out, dtype=float),
                            np.ascontiguousarray(grad_alpha, dtype=float), num_threads())
    # fixed-order reduction keeps gradients independent of tile scheduling
    acc = np.zeros((len(proj), F + 6))
    np.add.at(acc, bins.entries, buf)
    return acc[:, :F], acc[:, F], acc[:, F + 1:F + 3], acc[:, F + 3:]


@dataclass
class RenderOutput:
    color: np.ndarray         # (H, W, 3)
    depth: np.ndarray         # (H, W)
    transmission: np.ndarray  # (H, W)
    alpha: np.ndarray         # (H, W)
    n_contrib: np.ndarray     # (H, W)
    mode: str = "foggy"
    ctx: "_RenderContext | None" = field(default=None, repr=False)

    def image(self) -> np.ndarray:
        """The map selected by ``mode``."""
        if self.mode == "transmission":
            return self.transmission
        if self.mode == "depth":
            return self.depth
        return self.color


@dataclass
class _RenderContext:
    cloud: GaussianCloud
    camera: Camera
    fog: FogParams | None
    proj: Projected
    bins: TileBins
    feats: np.ndarray
    background: np.ndarray
    clear: np.ndarray
    dirs: np.ndarray | None
    t: np.ndarray
    t_cache: object
    d_norm: np.ndarray
    foggy_color: bool
    t_final: np.ndarray


@dataclass
class RenderGrads:
    cloud: dict[str, np.ndarray]
    fog: dict[str, np.ndarray] | None
    means2d: np.ndarray  # (N, 2) screen-space gradient, zero for culled Gaussians
    visible: np.ndarray  # (N,) bool


def render(cloud: GaussianCloud, camera: Camera, fog: FogParams | None = None,
           mode: str = "foggy", *, background=None, tile_size: int = TILE_SIZE,
           d_norm_override=None) -> RenderOutput:
    """Render one view.

    ``foggy`` composites per-Gaussian fogged colors; ``clear`` composites the
    latent clear colors. All modes also produce depth, transmission and alpha.
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if fog is None and mode in ("foggy", "transmission"):
        raise ValueError(f"mode {mode!r} needs fog parameters")
    W, H = camera.width, camera.height
    proj = project(cloud, camera)
    idx = proj.index
    dirs = None
    if cloud.sh_degree > 0:
        dirs = cloud.positions[idx] - camera.center
        clear = sh_to_color(cloud.color_coeffs[idx], dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    else:
        clear = np.maximum(SH_C0 * cloud.color_coeffs[idx, 0] + 0.5, 0.0)
    d_norm = normalize_depths(proj.depths) if d_norm_override is None else \
        np.asarray(d_norm_override, dtype=float)[idx]
    if fog is not None:
        t, t_cache = transmission_forward(d_norm, fog)
    else:
        t, t_cache = np.ones(len(proj)), None
    foggy_color = fog is not None and mode != "clear"
    feats = np.empty((len(proj), N_FEATS))
    feats[:, :3] = fog_colors(clear, t, fog.airlight) if foggy_color else clear
    feats[:, 3] = t
    feats[:, 4] = proj.depths
    bg = np.zeros(N_FEATS)
    if background is not None:
        bg[:3] = background
    bins = bin_and_sort(proj, W, H, tile_size)
    img, t_final, n_contrib = composite_forward(proj, bins, feats, bg, W, H)
    ctx = _RenderContext(cloud, camera, fog, proj, bins, feats, bg, clear, dirs, t, t_cache,
                         d_norm, foggy_color, t_final)
    return RenderOutput(color=img[:, :, :3], depth=img[:, :, 4], transmission=img[:, :, 3],
                        alpha=1.0 - t_final, n_contrib=n_contrib, mode=mode, ctx=ctx)


def render_backward(out: RenderOutput, grad_color=None, grad_depth=None,
                    grad_transmission=None, grad_alpha=None) -> RenderGrads:
    ctx = out.ctx
    if ctx is None:
        raise CorruptStateError("render output carries no replay state")
    cam, cloud, proj = ctx.camera, ctx.cloud, ctx.proj
    H, W = cam.height, cam.width
    g_img = np.zeros((H, W, N_FEATS))
    if grad_color is not None:
        g_img[:, :, :3] = grad_color
    if grad_transmission is not None:
        g_img[:, :, 3] = grad_transmission
    if grad_depth is not None:
        g_img[:, :, 4] = grad_depth
    g_alpha = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=float)
    g_feat, g_opac, g_mean, g_conic = composite_backward(
        proj, ctx.bins, ctx.feats, ctx.background, W, H, ctx.t_final, out.n_contrib, g_img, g_alpha)

    fog_grads = None
    if ctx.fog is not None:
        if ctx.foggy_color:
            g_clear, g_beta, g_atm = fog_backward(ctx.clear, ctx.t, ctx.fog, ctx.t_cache,
                                                  g_feat[:, :3], g_feat[:, 3])
        else:
            g_clear = g_feat[:, :3]
            g_beta = transmission_backward(ctx.t_cache, g_feat[:, 3], ctx.fog)
            g_atm = np.zeros(3)
        fog_grads = {"beta_weight": g_beta, "atmos_latent": g_atm}
    else:
        g_clear = g_feat[:, :3]

    gpos, gls, grot = project_backward(proj, cloud, cam, g_mean, g_conic, g_feat[:, 4])
    idx = proj.index
    g_coeffs = np.zeros_like(cloud.color_coeffs)
    if ctx.dirs is None:
        raw = SH_C0 * cloud.color_coeffs[idx, 0] + 0.5
        g_coeffs[idx, 0] = np.where(raw > 0, g_clear, 0.0) * SH_C0
    else:
        gc, gdir = sh_backward(cloud.color_coeffs[idx], ctx.dirs, g_clear)
        g_coeffs[idx] = gc
        np.add.at(gpos, idx, gdir)
    g_lat = np.zeros(len(cloud))
    op = proj.opacities
    g_lat[idx] = g_opac * op * (1.0 - op)
    g_means = np.zeros((len(cloud), 2))
    g_means[idx] = g_mean
    visible = np.zeros(len(cloud), dtype=bool)
    visible[idx] = True
    return RenderGrads(
        cloud={"positions": gpos, "log_scales": gls, "rotations": grot,
               "opacity_latents": g_lat, "color_coeffs": g_coeffs},
        fog=fog_grads, means2d=g_means, visible=visible)
