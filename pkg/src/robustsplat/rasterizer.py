"""Forward alpha-blended splat rendering and its analytic backward pass.

The geometric per-splat work (projection, covariance, SH color) is vectorized
numpy; the per-pixel compositing loops are numba kernels. The backward pass
additionally accumulates each splat's masked screen-position gradient energy
mean_{w,h} ||mask * dI/dx_g||^2, the utilization signal consumed by pruning.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .core import (COV2D_FLOOR, NEAR_PLANE, Camera, SplatCloud, quat_to_rot,
                   sh_basis, sh_basis_grad, sigmoid)

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
# ceil radius multiplier: beyond it alpha < 1/255 even at opacity 1, so the
# bounding-box cut never drops a contribution the skip rule would keep.
RADIUS_SIGMA = 3.34
# exp(power) <= 1/256 implies alpha < 1/255 for any opacity <= 1, so pairs
# below this exponent can skip the exp entirely without changing the output
POWER_SKIP = -5.545177444479562  # ln(1/256)


@dataclass
class RenderAux:
    """Side products of a render/backward call."""
    transmittance: np.ndarray        # (H, W) final per-pixel transmittance
    tile_offsets: np.ndarray         # (n_tiles + 1,) CSR offsets
    tile_splats: np.ndarray          # cloud indices, depth-sorted per tile
    tiles_x: int
    screen_grad_energy: np.ndarray   # (N,) filled by the backward pass

    def contrib_list(self, tile: int) -> np.ndarray:
        return self.tile_splats[self.tile_offsets[tile]:self.tile_offsets[tile + 1]]

    def dump(self, prefix: str) -> None:
        """Debug dump as flat little-endian float32 arrays."""
        self.transmittance.astype('<f4').tofile(prefix + '_transmittance.f32')
        self.tile_offsets.astype('<f4').tofile(prefix + '_tile_offsets.f32')
        self.tile_splats.astype('<f4').tofile(prefix + '_tile_splats.f32')
        self.screen_grad_energy.astype('<f4').tofile(prefix + '_energy.f32')


@dataclass
class GradientSet:
    """Per-parameter gradient buffers, same shapes as the cloud parameters."""
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    color_scale: Optional[np.ndarray] = None   # (3,) d/da when appearance given
    color_offset: Optional[np.ndarray] = None  # (3,) d/db when appearance given
    screen_pos: Optional[np.ndarray] = None    # (N, 2) d/d(pixel mean); feeds
    visible: Optional[np.ndarray] = None       # (N,) bool; densification stats

    @staticmethod
    def zeros_like(cloud: SplatCloud, appearance: bool) -> "GradientSet":
        return GradientSet(
            mu=np.zeros_like(cloud.mu),
            log_scale=np.zeros_like(cloud.log_scale),
            rot=np.zeros_like(cloud.rot),
            opacity_logit=np.zeros_like(cloud.opacity_logit),
            sh=np.zeros_like(cloud.sh),
            color_scale=np.zeros(3) if appearance else None,
            color_offset=np.zeros(3) if appearance else None,
            screen_pos=np.zeros((len(cloud), 2)),
            visible=np.zeros(len(cloud), dtype=bool),
        )


class _Projection:
    """Vectorized per-view splat quantities for the kernels."""
    __slots__ = ('ids', 'mean2d', 'conic', 'cov2d', 'alpha0', 'color', 'raw_rgb',
                 'depth', 'radius', 'pc', 'J', 'V', 'sigma', 'M3', 'Rq', 'scale',
                 'dirs', 'dist', 'basis', 'sh_hat', 'n_total')


def _project_cloud(cloud: SplatCloud, cam: Camera, appearance) -> _Projection:
    p = _Projection()
    p.n_total = len(cloud)
    pc_all = cloud.mu @ cam.R.T + cam.t
    valid = pc_all[:, 2] > NEAR_PLANE
    ids = np.nonzero(valid)[0]

    pc = pc_all[ids]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    rotn = cloud.rot[ids] / np.linalg.norm(cloud.rot[ids], axis=1, keepdims=True)
    Rq = quat_to_rot(rotn)
    scale = np.exp(cloud.log_scale[ids])
    M3 = Rq * scale[:, None, :]
    sigma = M3 @ np.transpose(M3, (0, 2, 1))
    V = cam.R @ sigma @ cam.R.T

    n = ids.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z ** 2
    cov_full = J @ V @ np.transpose(J, (0, 2, 1))
    a = cov_full[:, 0, 0] + COV2D_FLOOR
    b = cov_full[:, 0, 1]
    c = cov_full[:, 1, 1] + COV2D_FLOOR
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = np.ceil(RADIUS_SIGMA * np.sqrt(lam_max))

    # per-splat view-dependent color, optionally appearance-adjusted
    cam_pos = cam.center
    d = cloud.mu[ids] - cam_pos[None, :]
    dist = np.linalg.norm(d, axis=1, keepdims=True)
    dirs = d / dist
    basis = sh_basis(dirs, cloud.degree)
    sh_hat = cloud.sh[ids]
    if appearance is not None:
        a_col, b_col = appearance
        sh_hat = sh_hat * np.asarray(a_col)[None, :, None]
        sh_hat[:, :, 0] += np.asarray(b_col)[None, :]
    raw_rgb = np.einsum('nck,nk->nc', sh_hat, basis) + 0.5
    color = np.clip(raw_rgb, 0.0, 1.0)

    p.ids, p.mean2d, p.conic, p.alpha0 = ids, mean2d, conic, sigmoid(cloud.opacity_logit[ids])
    p.cov2d = np.stack([a, b, c], axis=1)
    p.color, p.raw_rgb, p.depth, p.radius = color, raw_rgb, z, radius
    p.pc, p.J, p.V, p.sigma, p.M3, p.Rq, p.scale = pc, J, V, sigma, M3, Rq, scale
    p.dirs, p.dist, p.basis, p.sh_hat = dirs, dist, basis, sh_hat
    return p


def _bin_tiles(p: _Projection, cam: Camera):
    """CSR tile lists of projected splats, depth-sorted (ties by splat id)."""
    tiles_x = (cam.width + TILE - 1) // TILE
    tiles_y = (cam.height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y

    order = np.argsort(p.depth, kind='stable')
    mx, my, r = p.mean2d[order, 0], p.mean2d[order, 1], p.radius[order]
    tx0 = np.clip(np.floor((mx - r) / TILE), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx + r) / TILE), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my - r) / TILE), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my + r) / TILE), 0, tiles_y - 1).astype(np.int64)
    onscreen = (mx + r >= 0) & (mx - r < cam.width) & (my + r >= 0) & (my - r < cam.height)
    nx = np.where(onscreen, tx1 - tx0 + 1, 0)
    ny = np.where(onscreen, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(n_tiles + 1, dtype=np.int64),
                np.zeros(0, dtype=np.int64), tiles_x, tiles_y)

    rep = np.repeat(np.arange(order.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(starts, counts)
    tx = tx0[rep] + within % np.maximum(nx[rep], 1)
    ty = ty0[rep] + within // np.maximum(nx[rep], 1)
    tile_id = ty * tiles_x + tx

    sort2 = np.lexsort((rep, tile_id))  # tile-major, depth rank within tile
    tile_sorted = tile_id[sort2]
    splat_sorted = order[rep[sort2]]    # indices into projection arrays

    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(tile_sorted, minlength=n_tiles))
    return offsets, splat_sorted.astype(np.int64), tiles_x, tiles_y


@njit(cache=True)
def _forward_kernel(mean2d, conic, alpha0, color, offsets, splats, tiles_x,
                    H, W, image, transmit):
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        s0, s1 = offsets[tile], offsets[tile + 1]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y_end = min(ty * TILE + TILE, H)
        x_end = min(tx * TILE + TILE, W)
        for py in range(ty * TILE, y_end):
            pyc = py + 0.5
            for px in range(tx * TILE, x_end):
                pxc = px + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for k in range(s0, s1):
                    i = splats[k]
                    dx = pxc - mean2d[i, 0]
                    dy = pyc - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                        - conic[i, 1] * dx * dy
                    if power > 0.0 or power < POWER_SKIP:
                        continue
                    alpha = alpha0[i] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    w = alpha * T
                    r += color[i, 0] * w
                    g += color[i, 1] * w
                    b += color[i, 2] * w
                    T *= 1.0 - alpha
                image[py, px, 0] = r
                image[py, px, 1] = g
                image[py, px, 2] = b
                transmit[py, px] = T


@njit(cache=True)
def _backward_kernel(mean2d, conic, alpha0, color, offsets, splats, tiles_x,
                     H, W, transmit, upstream, mask,
                     d_mean2d, d_conic, d_alpha0, d_color, energy):
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        s0, s1 = offsets[tile], offsets[tile + 1]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y_end = min(ty * TILE + TILE, H)
        x_end = min(tx * TILE + TILE, W)
        for py in range(ty * TILE, y_end):
            pyc = py + 0.5
            for px in range(tx * TILE, x_end):
                pxc = px + 0.5
                T = transmit[py, px]
                g0 = upstream[py, px, 0]
                g1 = upstream[py, px, 1]
                g2 = upstream[py, px, 2]
                m = mask[py, px]
                sr = 0.0
                sg = 0.0
                sb = 0.0
                for k in range(s1 - 1, s0 - 1, -1):
                    i = splats[k]
                    dx = pxc - mean2d[i, 0]
                    dy = pyc - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                        - conic[i, 1] * dx * dy
                    if power > 0.0 or power < POWER_SKIP:
                        continue
                    gexp = np.exp(power)
                    alpha = alpha0[i] * gexp
                    clamped = alpha > ALPHA_CLAMP
                    if clamped:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    d_color[i, 0] += w * g0
                    d_color[i, 1] += w * g1
                    d_color[i, 2] += w * g2
                    dc0 = T * (color[i, 0] - sr)
                    dc1 = T * (color[i, 1] - sg)
                    dc2 = T * (color[i, 2] - sb)
                    if not clamped:
                        dl_da = g0 * dc0 + g1 * dc1 + g2 * dc2
                        dmux = alpha * (conic[i, 0] * dx + conic[i, 1] * dy)
                        dmuy = alpha * (conic[i, 1] * dx + conic[i, 2] * dy)
                        d_mean2d[i, 0] += dl_da * dmux
                        d_mean2d[i, 1] += dl_da * dmuy
                        d_conic[i, 0] += dl_da * alpha * (-0.5 * dx * dx)
                        d_conic[i, 1] += dl_da * alpha * (-dx * dy)
                        d_conic[i, 2] += dl_da * alpha * (-0.5 * dy * dy)
                        d_alpha0[i] += dl_da * gexp
                        if m > 0.0:
                            energy[i] += m * m * (dc0 * dc0 + dc1 * dc1 + dc2 * dc2) * \
                                (dmux * dmux + dmuy * dmuy)
                    sr = alpha * color[i, 0] + (1.0 - alpha) * sr
                    sg = alpha * color[i, 1] + (1.0 - alpha) * sg
                    sb = alpha * color[i, 2] + (1.0 - alpha) * sb


def _quat_rot_grads(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(quaternion components): (N, 3, 3, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    g = np.empty((q.shape[0], 3, 3, 4))
    g[:, 0, 0] = np.stack([zero, zero, -4 * y, -4 * z], axis=1)
    g[:, 0, 1] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=1)
    g[:, 0, 2] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=1)
    g[:, 1, 0] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=1)
    g[:, 1, 1] = np.stack([zero, -4 * x, zero, -4 * z], axis=1)
    g[:, 1, 2] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=1)
    g[:, 2, 0] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=1)
    g[:, 2, 1] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=1)
    g[:, 2, 2] = np.stack([zero, -4 * x, -4 * y, zero], axis=1)
    return g


class _ForwardState:
    """Private carrier for reuse of projection + forward results between a
    render() call and the matching render_backward() call."""
    __slots__ = ('p', 'offsets', 'tile_splats', 'tiles_x', 'transmit', 'n_total')


def _run_forward(cloud: SplatCloud, cam: Camera, appearance):
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    transmit = np.ones((H, W))
    p = _project_cloud(cloud, cam, appearance)
    offsets, tile_splats, tiles_x, _ = _bin_tiles(p, cam)
    if tile_splats.size:
        _forward_kernel(p.mean2d, p.conic, p.alpha0, p.color, offsets,
                        tile_splats, tiles_x, H, W, image, transmit)
    st = _ForwardState()
    st.p, st.offsets, st.tile_splats, st.tiles_x = p, offsets, tile_splats, tiles_x
    st.transmit, st.n_total = transmit, len(cloud)
    return image, st


def _aux_from_state(st: _ForwardState) -> RenderAux:
    ids = st.p.ids[st.tile_splats] if st.tile_splats.size else st.tile_splats
    aux = RenderAux(transmittance=st.transmit, tile_offsets=st.offsets,
                    tile_splats=ids, tiles_x=st.tiles_x,
                    screen_grad_energy=np.zeros(st.n_total))
    aux._state = st
    return aux


def render(cloud: SplatCloud, cam: Camera, appearance=None):
    """Render the cloud into an (H, W, 3) image plus auxiliary state.

    `appearance` is an optional per-image color transform (a, b): each channel's
    SH coefficients are scaled by a[ch] and b[ch] is added to the DC term.
    """
    if len(cloud) == 0:
        raise ValueError("cannot render an empty splat cloud")
    image, st = _run_forward(cloud, cam, appearance)
    return image, _aux_from_state(st)


def render_backward(cloud: SplatCloud, cam: Camera, loss_grad: np.ndarray,
                    mask: np.ndarray, appearance=None, aux: Optional[RenderAux] = None):
    """Analytic gradient of sum_pixels mask * <loss_grad, image> w.r.t. all
    splat parameters (and the appearance transform when given).

    Also fills RenderAux.screen_grad_energy with each splat's
    mean_{w,h} ||mask * dI_{h,w}/dx_g||^2, which is independent of loss_grad.
    Passing the aux of a render() call with identical inputs skips the repeated
    forward pass.
    """
    if len(cloud) == 0:
        raise ValueError("cannot render an empty splat cloud")
    H, W = cam.height, cam.width
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if loss_grad.shape != (H, W, 3):
        raise ValueError(f"loss_grad shape {loss_grad.shape} != {(H, W, 3)}")
    if mask.shape != (H, W):
        raise ValueError(f"mask shape {mask.shape} != {(H, W)}")

    grads = GradientSet.zeros_like(cloud, appearance is not None)
    st = getattr(aux, '_state', None) if aux is not None else None
    if st is None or st.n_total != len(cloud):
        _, st = _run_forward(cloud, cam, appearance)
    p, offsets, tile_splats, tiles_x = st.p, st.offsets, st.tile_splats, st.tiles_x
    transmit = st.transmit
    n = p.ids.shape[0]
    energy = np.zeros(n)
    out_aux = _aux_from_state(st)
    if tile_splats.size == 0 or n == 0:
        return grads, out_aux

    upstream = loss_grad * mask[:, :, None]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha0 = np.zeros(n)
    d_color = np.zeros((n, 3))
    _backward_kernel(p.mean2d, p.conic, p.alpha0, p.color, offsets, tile_splats,
                     tiles_x, H, W, transmit, upstream, mask,
                     d_mean2d, d_conic, d_alpha0, d_color, energy)
    out_aux.screen_grad_energy[p.ids] = energy / (H * W)

    # conic -> packed cov2d (a, b, c); conic = (c, -b, a) / det
    a, b, c = p.cov2d[:, 0], p.cov2d[:, 1], p.cov2d[:, 2]
    det = a * c - b * b
    det2 = det * det
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    d_a = -c * c / det2 * ga + (b * c / det2) * gb + (1.0 / det - a * c / det2) * gc
    d_b = (2 * b * c / det2) * ga + (-2 * b * b / det2 - 1.0 / det) * gb + (2 * a * b / det2) * gc
    d_c = (1.0 / det - a * c / det2) * ga + (a * b / det2) * gb + (-a * a / det2) * gc

    # packed -> full symmetric 2x2 upstream
    d_cov_full = np.empty((n, 2, 2))
    d_cov_full[:, 0, 0] = d_a
    d_cov_full[:, 0, 1] = 0.5 * d_b
    d_cov_full[:, 1, 0] = 0.5 * d_b
    d_cov_full[:, 1, 1] = d_c

    # cov2d = J V J^T: gradients into V and J
    d_V = np.transpose(p.J, (0, 2, 1)) @ d_cov_full @ p.J
    d_J = 2.0 * d_cov_full @ p.J @ p.V

    # V = R_cam Sigma R_cam^T
    d_sigma = cam.R.T @ d_V @ cam.R
    # Sigma = M M^T
    d_M3 = 2.0 * d_sigma @ p.M3
    # M = Rq diag(s)
    d_scale = np.einsum('nik,nik->nk', d_M3, p.Rq)
    grads_log_scale = d_scale * p.scale
    d_Rq = d_M3 * p.scale[:, None, :]
    dRdq = _quat_rot_grads(cloud.rot[p.ids] /
                           np.linalg.norm(cloud.rot[p.ids], axis=1, keepdims=True))
    d_qn = np.einsum('nijq,nij->nq', dRdq, d_Rq)
    # through quaternion normalization
    qraw = cloud.rot[p.ids]
    qnorm = np.linalg.norm(qraw, axis=1, keepdims=True)
    qhat = qraw / qnorm
    d_q = (d_qn - qhat * np.sum(d_qn * qhat, axis=1, keepdims=True)) / qnorm

    # camera-frame position gradients: mean2d path + J path
    x, y, z = p.pc[:, 0], p.pc[:, 1], p.pc[:, 2]
    z2 = z * z
    d_pc = np.zeros((n, 3))
    d_pc[:, 0] = d_mean2d[:, 0] * cam.fx / z + d_J[:, 0, 2] * (-cam.fx / z2)
    d_pc[:, 1] = d_mean2d[:, 1] * cam.fy / z + d_J[:, 1, 2] * (-cam.fy / z2)
    d_pc[:, 2] = (-d_mean2d[:, 0] * cam.fx * x / z2
                  - d_mean2d[:, 1] * cam.fy * y / z2
                  + d_J[:, 0, 0] * (-cam.fx / z2)
                  + d_J[:, 0, 2] * (2 * cam.fx * x / (z2 * z))
                  + d_J[:, 1, 1] * (-cam.fy / z2)
                  + d_J[:, 1, 2] * (2 * cam.fy * y / (z2 * z)))
    d_mu = d_pc @ cam.R

    # color path: clamp, SH, view direction, appearance
    interior = ((p.raw_rgb > 0.0) & (p.raw_rgb < 1.0)).astype(np.float64)
    d_raw = d_color * interior
    d_sh_hat = d_raw[:, :, None] * p.basis[:, None, :]
    bgrad = sh_basis_grad(p.dirs, cloud.degree)
    d_dir = np.einsum('nc,nck,nkd->nd', d_raw, p.sh_hat, bgrad)
    proj = d_dir - p.dirs * np.sum(d_dir * p.dirs, axis=1, keepdims=True)
    d_mu += proj / p.dist

    if appearance is not None:
        a_col, _ = appearance
        grads.color_scale[:] = np.einsum('nck,nck->c', d_sh_hat, cloud.sh[p.ids])
        grads.color_offset[:] = d_sh_hat[:, :, 0].sum(axis=0)
        d_sh = d_sh_hat * np.asarray(a_col)[None, :, None]
    else:
        d_sh = d_sh_hat

    alpha0 = p.alpha0
    grads.mu[p.ids] = d_mu
    grads.log_scale[p.ids] = grads_log_scale
    grads.rot[p.ids] = d_q
    grads.opacity_logit[p.ids] = d_alpha0 * alpha0 * (1.0 - alpha0)
    grads.sh[p.ids] = d_sh
    grads.screen_pos[p.ids] = d_mean2d
    grads.visible[p.ids] = True
    return grads, out_aux
