"""Gaussian primitives, their latent parameterization and covariance algebra.

Latents are unconstrained; activations map them into valid ranges:

* scale    = exp(log_scale)           (strictly positive)
* rotation = q / |q|                  (unit quaternion, w-x-y-z order)
* opacity  = logistic(opacity_latent) (open interval (0, 1))
* color    = 0.5 + SH(coeffs, view_dir), clamped at 0
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """A latent or configuration value is outside its admissible domain."""


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4), w-x-y-z, unnormalized
    opacity_latents: np.ndarray  # (N,)
    color_coeffs: np.ndarray     # (N, (deg+1)**2, 3)

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float, order="C").reshape(-1, 3)
        n = len(self.positions)
        if n < 1:
            raise InvalidParameterError("a GaussianCloud needs at least one primitive")
        self.log_scales = np.array(self.log_scales, dtype=float, order="C").reshape(n, 3)
        self.rotations = np.array(self.rotations, dtype=float, order="C").reshape(n, 4)
        self.opacity_latents = np.array(self.opacity_latents, dtype=float, order="C").reshape(n)
        coeffs = np.array(self.color_coeffs, dtype=float, order="C")
        if coeffs.ndim == 2:
            coeffs = coeffs.reshape(n, -1, 3)
        if coeffs.shape[0] != n or coeffs.shape[2] != 3:
            raise InvalidParameterError(f"color_coeffs has shape {coeffs.shape}, expected ({n}, K, 3)")
        deg = int(round(np.sqrt(coeffs.shape[1]))) - 1
        if (deg + 1) ** 2 != coeffs.shape[1] or not 0 <= deg <= 3:
            raise InvalidParameterError(f"{coeffs.shape[1]} SH coefficients do not form a degree 0..3 basis")
        self.color_coeffs = coeffs

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.color_coeffs.shape[1]))) - 1

    # name -> array, in a fixed order used by the optimizer and checkpoints
    def params(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_latents": self.opacity_latents,
            "color_coeffs": self.color_coeffs,
        }

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(**{k: v[keep].copy() for k, v in self.params().items()})

    @classmethod
    def concat(cls, clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return cls(**{k: np.concatenate([c.params()[k] for c in clouds]) for k in clouds[0].params()})

    @classmethod
    def from_points(cls, positions, rgb, *, sh_degree: int = 0, opacity: float = 0.1,
                    scales=None) -> "GaussianCloud":
        """Initial cloud from a point set: isotropic scales from nearest-neighbour spacing."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = len(positions)
        if scales is None:
            scales = _knn_scale(positions)
        scales = np.broadcast_to(np.asarray(scales, dtype=float).reshape(-1, 1), (n, 1))
        coeffs = np.zeros((n, (sh_degree + 1) ** 2, 3))
        coeffs[:, 0] = (np.asarray(rgb, dtype=float).reshape(n, 3) - 0.5) / SH_C0
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(positions, np.log(np.repeat(scales, 3, axis=1)), rot,
                   np.full(n, float(logit(opacity))), coeffs)


def _knn_scale(positions: np.ndarray, k: int = 3) -> np.ndarray:
    from scipy.spatial import cKDTree

    n = len(positions)
    if n == 1:
        return np.full(n, 0.01)
    kk = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=kk + 1)
    d2 = np.mean(dist[:, 1:] ** 2, axis=1)
    return np.sqrt(np.maximum(d2, 1e-7))


@dataclass
class Activated:
    scales: np.ndarray     # (N, 3)
    quats: np.ndarray      # (N, 4) unit
    opacities: np.ndarray  # (N,)
    colors: np.ndarray     # (N, 3); DC term only unless view directions were given
    quat_norms: np.ndarray = field(repr=False)


def activate(cloud: GaussianCloud, view_dirs=None) -> Activated:
    for name, arr in cloud.params().items():
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError(f"non-finite value in {name}")
    norms = np.linalg.norm(cloud.rotations, axis=1)
    if np.any(norms == 0):
        raise InvalidParameterError("zero-norm rotation quaternion")
    if view_dirs is None:
        colors = np.maximum(SH_C0 * cloud.color_coeffs[:, 0] + 0.5, 0.0)
    else:
        colors = sh_to_color(cloud.color_coeffs, view_dirs)
    return Activated(
        scales=np.exp(cloud.log_scales),
        quats=cloud.rotations / norms[:, None],
        opacities=sigmoid(cloud.opacity_latents),
        colors=colors,
        quat_norms=norms,
    )


# ---------------------------------------------------------------- rotations

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (..., 4) in w-x-y-z order."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat_grad(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q) back to the (unit) quaternion q."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = gR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_quat_grad(q_raw: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    """Gradient through q -> q/|q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qn = q_raw / norm
    return (g_unit - qn * np.sum(qn * g_unit, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------- covariance

def build_covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched Sigma = R S S^T R^T for latents of shape (N, 3) and (N, 4)."""
    rotations = np.asarray(rotations, dtype=float)
    norms = np.linalg.norm(rotations, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidParameterError("zero-norm rotation quaternion")
    M = quat_to_rotmat(rotations / norms) * np.exp(np.asarray(log_scales, dtype=float))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance(log_scale, rotation) -> np.ndarray:
    return build_covariances(np.asarray(log_scale, dtype=float)[None],
                             np.asarray(rotation, dtype=float)[None])[0]


def build_covariances_backward(grad_sigma, log_scales, rotations):
    """Gradients of <grad_sigma, Sigma> w.r.t. log-scales and raw quaternions (batched)."""
    grad_sigma = np.asarray(grad_sigma, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    norms = np.linalg.norm(rotations, axis=-1, keepdims=True)
    qn = rotations / norms
    R = quat_to_rotmat(qn)
    s = np.exp(np.asarray(log_scales, dtype=float))
    M = R * s[..., None, :]
    gM = (grad_sigma + np.swapaxes(grad_sigma, -1, -2)) @ M
    grad_log_scale = np.sum(gM * R, axis=-2) * s
    gR = gM * s[..., None, :]
    grad_rot = normalize_quat_grad(rotations, rotmat_to_quat_grad(qn, gR))
    return grad_log_scale, grad_rot


def build_covariance_backward(upstream_grad, log_scale, rotation):
    gs, gq = build_covariances_backward(np.asarray(upstream_grad, dtype=float)[None],
                                        np.asarray(log_scale, dtype=float)[None],
                                        np.asarray(rotation, dtype=float)[None])
    return gs[0], gq[0]


# ---------------------------------------------------------------- spherical harmonics

def sh_basis(dirs: np.ndarray, degree: int):
    """SH basis values (N, K) and their derivatives w.r.t. the unit direction (N, K, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    K = (degree + 1) ** 2
    B = np.zeros((n, K))
    dB = np.zeros((n, K, 3))
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1], B[:, 2], B[:, 3] = -SH_C1 * y, SH_C1 * z, -SH_C1 * x
        dB[:, 1, 1] = -SH_C1
        dB[:, 2, 2] = SH_C1
        dB[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        B[:, 4] = c[0] * x * y
        B[:, 5] = c[1] * y * z
        B[:, 6] = c[2] * (2 * zz - xx - yy)
        B[:, 7] = c[3] * x * z
        B[:, 8] = c[4] * (xx - yy)
        dB[:, 4] = c[0] * np.stack([y, x, 0 * x], -1)
        dB[:, 5] = c[1] * np.stack([0 * x, z, y], -1)
        dB[:, 6] = c[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
        dB[:, 7] = c[3] * np.stack([z, 0 * x, x], -1)
        dB[:, 8] = c[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        c = SH_C3
        B[:, 9] = c[0] * y * (3 * xx - yy)
        B[:, 10] = c[1] * x * y * z
        B[:, 11] = c[2] * y * (4 * zz - xx - yy)
        B[:, 12] = c[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = c[4] * x * (4 * zz - xx - yy)
        B[:, 14] = c[5] * z * (xx - yy)
        B[:, 15] = c[6] * x * (xx - 3 * yy)
        zero = 0 * x
        dB[:, 9] = c[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
        dB[:, 10] = c[1] * np.stack([y * z, x * z, x * y], -1)
        dB[:, 11] = c[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
        dB[:, 12] = c[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
        dB[:, 13] = c[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
        dB[:, 14] = c[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
        dB[:, 15] = c[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return B, dB


def sh_to_color(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    B, _ = sh_basis(dirs, degree)
    return np.maximum(np.einsum("nk,nkc->nc", B, coeffs) + 0.5, 0.0)


def sh_backward(coeffs: np.ndarray, dirs_raw: np.ndarray, grad_color: np.ndarray):
    """Gradients of the clamped SH color w.r.t. coefficients and the raw (unnormalized) direction."""
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    norm = np.linalg.norm(dirs_raw, axis=1, keepdims=True)
    dirs = dirs_raw / norm
    B, dB = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", B, coeffs) + 0.5
    g = np.where(raw > 0, grad_color, 0.0)
    grad_coeffs = B[:, :, None] * g[:, None, :]
    if degree == 0:
        return grad_coeffs, np.zeros_like(dirs_raw)
    g_dir = np.einsum("nc,nkc,nkd->nd", g, coeffs, dB)
    g_raw = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / norm
    return grad_coeffs, g_raw


# ---------------------------------------------------------------- cameras

ORTHONORMAL_TOL = 1e-3


@dataclass
class Camera:
    """Pinhole camera. Pixel (i, j) has its center at image coordinates (i, j)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    near: float = 0.01
    far: float = 1e3
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError(f"camera {self.name!r}: focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise InvalidParameterError(f"camera {self.name!r}: need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError(f"camera {self.name!r}: empty image size")
        err = np.max(np.abs(self.R @ self.R.T - np.eye(3)))
        if not err <= ORTHONORMAL_TOL or np.linalg.det(self.R) <= 0:
            raise InvalidParameterError(
                f"camera {self.name!r}: R is not a rotation (orthonormality error {err:.3g})")
        if err > 1e-12:
            u, _, vt = np.linalg.svd(self.R)
            self.R = u @ vt

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {"name": self.name, "fx": float(self.fx), "fy": float(self.fy),
                "cx": float(self.cx), "cy": float(self.cy),
                "width": self.width, "height": self.height,
                "R": [float(v) for v in self.R.ravel()], "t": [float(v) for v in self.t],
                "near": float(self.near), "far": float(self.far)}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"], width=d["width"],
                   height=d["height"], R=d["R"], t=d["t"], near=d.get("near", 0.01),
                   far=d.get("far", 1e3), name=d.get("name", ""))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width, height, fov_deg=50.0,
                near=0.01, far=1e3, name="") -> "Camera":
        """Camera at `eye` looking at `target`; camera +z forward, +y down (OpenCV)."""
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, -np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, R, -R @ eye,
                   near=near, far=far, name=name)
