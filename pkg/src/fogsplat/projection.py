"""EWA projection of 3D Gaussians to screen space, and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, GaussianCloud, build_covariances, build_covariances_backward, sigmoid

COV2D_DILATION = 0.3
RADIUS_SIGMAS = 3.0


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    camera_depth: float
    conic: np.ndarray
    screen_radius: float
    source_index: int


@dataclass
class Projected:
    """Struct-of-arrays over the M Gaussians that survived culling."""

    index: np.ndarray      # (M,) source indices into the cloud
    means2d: np.ndarray    # (M, 2) pixels
    cov2d: np.ndarray      # (M, 3) undilated (xx, xy, yy), pixels^2
    conics: np.ndarray     # (M, 3) inverse of the dilated cov2d (a, b, c)
    depths: np.ndarray     # (M,) camera-space z
    radii: np.ndarray      # (M,) pixels
    opacities: np.ndarray  # (M,) activated
    # cached for the backward pass
    p_cam: np.ndarray
    jw: np.ndarray         # (M, 2, 3) J @ W
    cov3d: np.ndarray      # (M, 3, 3)

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i) -> ProjectedGaussian:
        a, b, c = self.conics[i]
        xx, xy, yy = self.cov2d[i]
        return ProjectedGaussian(self.means2d[i].copy(), np.array([[xx, xy], [xy, yy]]),
                                 float(self.depths[i]), np.array([[a, b], [b, c]]),
                                 float(self.radii[i]), int(self.index[i]))


def _jacobian(p_cam, camera):
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / (z * z)
    return J


def project(cloud: GaussianCloud, camera: Camera, *, dilation: float = COV2D_DILATION) -> Projected:
    p_all = camera.to_camera(cloud.positions)
    z_all = p_all[:, 2]
    cand = np.nonzero((z_all > camera.near) & (z_all < camera.far))[0]
    p = p_all[cand]
    z = p[:, 2]
    cov3d = build_covariances(cloud.log_scales[cand], cloud.rotations[cand])
    jw = _jacobian(p, camera) @ camera.R
    cov = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    xx, xy, yy = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    a, c = xx + dilation, yy + dilation
    det = a * c - xy * xy
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))
    mx = camera.fx * p[:, 0] / z + camera.cx
    my = camera.fy * p[:, 1] / z + camera.cy
    # closest point of the pixel-center rectangle to the mean
    qx = np.clip(mx, 0.0, camera.width - 1.0)
    qy = np.clip(my, 0.0, camera.height - 1.0)
    on_screen = (mx - qx) ** 2 + (my - qy) ** 2 <= radius * radius
    keep = (det > 0) & np.isfinite(det) & on_screen
    inv_det = 1.0 / det[keep]
    return Projected(
        index=cand[keep],
        means2d=np.ascontiguousarray(np.stack([mx, my], axis=1)[keep]),
        cov2d=np.stack([xx, xy, yy], axis=1)[keep],
        conics=np.ascontiguousarray(np.stack([c[keep] * inv_det, -xy[keep] * inv_det,
                                              a[keep] * inv_det], axis=1)),
        depths=np.ascontiguousarray(z[keep]),
        radii=radius[keep],
        opacities=np.ascontiguousarray(sigmoid(cloud.opacity_latents[cand[keep]])),
        p_cam=p[keep],
        jw=jw[keep],
        cov3d=cov3d[keep],
    )


def project_backward(proj: Projected, cloud: GaussianCloud, camera: Camera,
                     grad_means2d, grad_conics, grad_depths):
    """Gradients on (positions, log_scales, rotations) for the full cloud."""
    n = len(cloud)
    gpos = np.zeros((n, 3))
    gls = np.zeros((n, 3))
    grot = np.zeros((n, 4))
    if len(proj) == 0:
        return gpos, gls, grot
    idx = proj.index
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    ga, gb, gc = grad_conics[:, 0], grad_conics[:, 1], grad_conics[:, 2]
    GQ = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc], -1)], -2)
    Gcov = -Q @ GQ @ Q  # symmetric; same for dilated and undilated cov2d
    jw = proj.jw
    gSigma = np.swapaxes(jw, 1, 2) @ Gcov @ jw
    gls_v, grot_v = build_covariances_backward(gSigma, cloud.log_scales[idx], cloud.rotations[idx])
    gJW = 2.0 * Gcov @ jw @ proj.cov3d
    gJ = gJW @ camera.R.T

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    z2, z3 = z * z, z * z * z
    gp = np.zeros((len(proj), 3))
    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    gp[:, 0] += gJ[:, 0, 2] * (-fx / z2)
    gp[:, 1] += gJ[:, 1, 2] * (-fy / z2)
    gp[:, 2] += (gJ[:, 0, 0] * (-fx / z2) + gJ[:, 0, 2] * (2 * fx * x / z3)
                 + gJ[:, 1, 1] * (-fy / z2) + gJ[:, 1, 2] * (2 * fy * y / z3))
    gmx, gmy = grad_means2d[:, 0], grad_means2d[:, 1]
    gp[:, 0] += gmx * fx / z
    gp[:, 1] += gmy * fy / z
    gp[:, 2] += -gmx * fx * x / z2 - gmy * fy * y / z2
    gp[:, 2] += grad_depths
    np.add.at(gpos, idx, gp @ camera.R)
    np.add.at(gls, idx, gls_v)
    np.add.at(grot, idx, grot_v)
    return gpos, gls, grot
