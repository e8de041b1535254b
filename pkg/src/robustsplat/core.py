"""Splat, camera, and image primitives plus the shared geometric math."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3  # px^2 added to the projected covariance diagonal

# Real spherical-harmonics constants, degree 0..3, splatting channel order.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix(es).

    Accepts (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@dataclass
class Camera:
    """Pinhole view: world-to-camera rigid transform plus intrinsics in pixels."""
    R: np.ndarray           # (3, 3) world-to-camera rotation
    t: np.ndarray           # (3,) world-to-camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    @staticmethod
    def look_at(eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # x right, y down, z forward
        return Camera(R=R, t=-R @ eye, fx=fx, fy=fy, cx=cx, cy=cy,
                      width=width, height=height)


@dataclass
class Splat:
    """One anisotropic Gaussian primitive."""
    mu: np.ndarray             # (3,) world position
    log_scale: np.ndarray      # (3,) per-axis log scale
    rot: np.ndarray            # (4,) unit quaternion (w, x, y, z)
    opacity_logit: float
    sh: np.ndarray             # (3, (L+1)^2) per-channel SH coefficients

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 2 or self.sh.shape[0] != 3:
            raise ValueError("sh must have shape (3, (L+1)^2)")


@dataclass
class SplatCloud:
    """Ordered splat collection stored as flat arrays (one row per splat)."""
    mu: np.ndarray             # (N, 3)
    log_scale: np.ndarray      # (N, 3)
    rot: np.ndarray            # (N, 4)
    opacity_logit: np.ndarray  # (N,)
    sh: np.ndarray             # (N, 3, (L+1)^2)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[2]))) - 1

    def __getitem__(self, i: int) -> Splat:
        return Splat(self.mu[i], self.log_scale[i], self.rot[i],
                     float(self.opacity_logit[i]), self.sh[i])

    @staticmethod
    def from_splats(splats) -> "SplatCloud":
        return SplatCloud(
            mu=np.stack([s.mu for s in splats]),
            log_scale=np.stack([s.log_scale for s in splats]),
            rot=np.stack([s.rot for s in splats]),
            opacity_logit=np.array([s.opacity_logit for s in splats], dtype=np.float64),
            sh=np.stack([s.sh for s in splats]),
        )

    @staticmethod
    def empty(degree: int) -> "SplatCloud":
        k = num_sh_coeffs(degree)
        return SplatCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                          np.zeros((0,)), np.zeros((0, 3, k)))

    def copy(self) -> "SplatCloud":
        return SplatCloud(self.mu.copy(), self.log_scale.copy(), self.rot.copy(),
                          self.opacity_logit.copy(), self.sh.copy())

    def select(self, idx) -> "SplatCloud":
        return SplatCloud(self.mu[idx], self.log_scale[idx], self.rot[idx],
                          self.opacity_logit[idx], self.sh[idx])

    @staticmethod
    def concat(clouds) -> "SplatCloud":
        return SplatCloud(
            mu=np.concatenate([c.mu for c in clouds]),
            log_scale=np.concatenate([c.log_scale for c in clouds]),
            rot=np.concatenate([c.rot for c in clouds]),
            opacity_logit=np.concatenate([c.opacity_logit for c in clouds]),
            sh=np.concatenate([c.sh for c in clouds]),
        )

    def renormalize_rotations(self) -> None:
        self.rot = normalize_quat(self.rot)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.mu, self.log_scale, self.rot, self.opacity_logit, self.sh))


def covariance_from_params(log_scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """3D covariance R S S^T R^T from per-axis log scales and a unit quaternion."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rot))):
        raise ValueError("non-finite splat covariance parameters")
    R = quat_to_rot(rot)
    M = R * np.exp(log_scale)[None, :]
    return M @ M.T


def project_splat(splat: Splat, cam: Camera):
    """Project one splat to screen space.

    Returns (x_g, cov2d, depth) with x_g the pixel-space mean, cov2d the
    2x2 projected covariance (anti-alias floor added), depth the camera-frame z.
    Returns None when the splat is culled by the near plane.
    """
    pc = cam.R @ splat.mu + cam.t
    if pc[2] <= NEAR_PLANE:
        return None
    x, y, z = pc
    x_g = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    sigma = covariance_from_params(splat.log_scale, splat.rot)
    M = J @ cam.R
    cov2d = M @ sigma @ M.T + COV2D_FLOOR * np.eye(2)
    return x_g, cov2d, float(z)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions; (..., 3) -> (..., (L+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_sh_coeffs(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each basis function w.r.t. the direction: (..., K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (num_sh_coeffs(degree), 3))
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, :] = SH_C2[0] * np.stack([y, x, zero], axis=-1)
        g[..., 5, :] = SH_C2[1] * np.stack([zero, z, y], axis=-1)
        g[..., 6, :] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1)
        g[..., 7, :] = SH_C2[3] * np.stack([z, zero, x], axis=-1)
        g[..., 8, :] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, :] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=-1)
        g[..., 10, :] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
        g[..., 11, :] = SH_C3[2] * np.stack(
            [-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=-1)
        g[..., 12, :] = SH_C3[3] * np.stack(
            [-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=-1)
        g[..., 13, :] = SH_C3[4] * np.stack(
            [4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=-1)
        g[..., 14, :] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=-1)
        g[..., 15, :] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=-1)
    return g


def eval_sh(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color: sum_k c_k Y_k(dir) + 0.5, clamped to [0, 1]."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-1]))) - 1
    basis = sh_basis(view_dir, degree)
    rgb = np.einsum('...ck,...k->...c', sh, basis) + 0.5
    return np.clip(rgb, 0.0, 1.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))
