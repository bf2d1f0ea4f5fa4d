"""A small procedural scene with known clear renders, depth and fog.

A patterned back wall plus a handful of coloured blobs, seen from an arc of
cameras. Colours are fully saturated (one channel 0, one 1) so both
channel priors hold on the clear images.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .raster import render
from .scene import Camera, GaussianCloud, logit
from .synth import synthesize_fog

TOY_BETA = 0.8
TOY_AIRLIGHT = (0.8, 0.8, 0.8)


def _saturated(rng, hue, n):
    # full saturation and value: min channel 0, max channel 1
    h = (hue + rng.normal(0, 0.02, n)) % 1.0
    return np.array([colorsys.hsv_to_rgb(x, 1.0, 1.0) for x in h])


def toy_cloud(seed: int = 0, n_wall: int = 640, n_objects: int = 6, per_object: int = 60) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    # wall: a 32 x 20 grid of tiles coloured in 4 x 4 blocks of random hue
    nx, ny = 32, n_wall // 32
    gx, gy = np.meshgrid(np.linspace(-9.0, 9.0, nx), np.linspace(-6.0, 6.0, ny))
    wall_pos = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, 4.0)], axis=1)
    block = (np.floor((gx.ravel() + 9.5) / 2.3) * 7 + np.floor((gy.ravel() + 6.5) / 2.3)).astype(int)
    hues = rng.uniform(0, 1, block.max() + 1)
    wall_rgb = np.concatenate([_saturated(rng, hues[b], 1) for b in block])
    wall_scale = np.column_stack([np.full(len(wall_pos), 0.36), np.full(len(wall_pos), 0.38),
                                  np.full(len(wall_pos), 0.05)])

    obj_pos, obj_rgb, obj_scale = [], [], []
    centers = np.column_stack([rng.uniform(-2.8, 2.8, n_objects), rng.uniform(-1.6, 1.6, n_objects),
                               np.linspace(-1.5, 2.5, n_objects)])
    for c in centers:
        radius = rng.uniform(0.5, 0.9)
        d = rng.normal(size=(per_object, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        obj_pos.append(c + radius * d * rng.uniform(0.6, 1.0, (per_object, 1)))
        obj_rgb.append(_saturated(rng, rng.uniform(0, 1), per_object))
        obj_scale.append(np.full((per_object, 3), 0.22 * radius))
    pos = np.concatenate([wall_pos] + obj_pos)
    rgb = np.concatenate([wall_rgb] + obj_rgb)
    scales = np.concatenate([wall_scale] + obj_scale)
    n = len(pos)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    coeffs = ((rgb - 0.5) / 0.28209479177387814)[:, None, :]
    opacity = np.concatenate([np.full(len(wall_pos), 0.99), np.full(n - len(wall_pos), 0.95)])
    return GaussianCloud(pos, np.log(scales), rot, logit(opacity), coeffs)


def toy_cameras(n_views: int = 12, size: int = 128, radius: float = 6.0, arc_deg: float = 50.0):
    cams = []
    for i, a in enumerate(np.radians(np.linspace(-arc_deg / 2, arc_deg / 2, n_views))):
        eye = [radius * np.sin(a), -0.4 + 0.3 * np.cos(3 * a), -radius * np.cos(a)]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 1.0], width=size, height=size, fov_deg=50.0,
                                   name=f"view_{i:03d}"))
    return cams


@dataclass
class ToyScene:
    cloud: GaussianCloud
    cameras: list
    clear: list
    depths: list
    hazy: list
    transmissions: list
    beta: float
    airlight: np.ndarray
    points: np.ndarray
    point_colors: np.ndarray


def make_toy_scene(seed: int = 0, n_views: int = 12, size: int = 128, beta: float = TOY_BETA,
                   airlight=TOY_AIRLIGHT, point_jitter: float = 0.05) -> ToyScene:
    cloud = toy_cloud(seed)
    cams = toy_cameras(n_views, size)
    clear, depths, hazy, ts = [], [], [], []
    for cam in cams:
        out = render(cloud, cam, None, "clear")
        c = np.clip(out.color, 0.0, 1.0)
        # surface depth: undo the partial-coverage darkening of the composited depth
        depth = out.depth / np.maximum(out.alpha, 1e-6)
        h, t = synthesize_fog(c, depth, beta, airlight)
        clear.append(c)
        depths.append(depth)
        hazy.append(h)
        ts.append(t)
    rng = np.random.default_rng([seed, 7])
    pts = cloud.positions + rng.normal(0, point_jitter, cloud.positions.shape)
    colors = np.clip(0.5 + 0.28209479177387814 * cloud.color_coeffs[:, 0] + rng.normal(0, 0.05, (len(pts), 3)),
                     0, 1)
    return ToyScene(cloud, cams, clear, depths, hazy, ts, beta, np.asarray(airlight, dtype=float), pts, colors)


def write_toy_scene(root, scene: ToyScene):
    """Dataset layout understood by ``load_scene``; hazy views are the inputs."""
    from .io import write_scene
    return write_scene(root, scene.cameras, scene.hazy, scene.points, scene.point_colors,
                       depths=scene.depths, clear=scene.clear)
