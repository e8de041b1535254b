"""Binary little-endian PLY export/import for splat clouds.

Per-vertex property order (all float32): x y z, opacity_logit, log_scale_0..2,
rot quaternion w x y z, f_dc_0..2, then f_rest interleaved channel-major
(all rest coefficients of channel 0, then channel 1, then channel 2).
"""
from __future__ import annotations

import numpy as np

from .core import SplatCloud, num_sh_coeffs


def _property_names(degree: int):
    names = ['x', 'y', 'z', 'opacity_logit',
             'log_scale_0', 'log_scale_1', 'log_scale_2',
             'rot_w', 'rot_x', 'rot_y', 'rot_z',
             'f_dc_0', 'f_dc_1', 'f_dc_2']
    n_rest = num_sh_coeffs(degree) - 1
    names += [f'f_rest_{i}' for i in range(3 * n_rest)]
    return names


def save_ply(cloud: SplatCloud, path) -> None:
    names = _property_names(cloud.degree)
    n = len(cloud)
    rest = cloud.sh[:, :, 1:].reshape(n, -1)  # channel-major: (ch, coeff) flattened
    data = np.concatenate([
        cloud.mu,
        cloud.opacity_logit[:, None],
        cloud.log_scale,
        cloud.rot,
        cloud.sh[:, :, 0],
        rest,
    ], axis=1).astype('<f4')
    header = ['ply', 'format binary_little_endian 1.0', f'element vertex {n}']
    header += [f'property float {name}' for name in names]
    header.append('end_header')
    with open(path, 'wb') as f:
        f.write(('\n'.join(header) + '\n').encode('ascii'))
        f.write(data.tobytes())


def load_ply(path) -> SplatCloud:
    with open(path, 'rb') as f:
        blob = f.read()
    end = blob.find(b'end_header\n')
    if not blob.startswith(b'ply') or end < 0:
        raise ValueError(f"{path}: not a splat PLY file")
    header = blob[:end].decode('ascii').splitlines()
    n = None
    props = []
    for line in header:
        if line.startswith('element vertex'):
            n = int(line.split()[-1])
        elif line.startswith('property float'):
            props.append(line.split()[-1])
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    n_rest3 = len(props) - 14
    if n_rest3 < 0 or n_rest3 % 3:
        raise ValueError(f"{path}: unexpected property count {len(props)}")
    k = n_rest3 // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if num_sh_coeffs(degree) != k:
        raise ValueError(f"{path}: SH coefficient count {k} is not a square")
    body = blob[end + len(b'end_header\n'):]
    expected = n * len(props) * 4
    if len(body) < expected:
        raise ValueError(f"{path}: truncated body, expected {expected} bytes "
                         f"after header, found {len(body)}")
    data = np.frombuffer(body[:expected], dtype='<f4').reshape(n, len(props)).astype(np.float64)
    sh = np.empty((n, 3, k))
    sh[:, :, 0] = data[:, 11:14]
    sh[:, :, 1:] = data[:, 14:].reshape(n, 3, k - 1)
    return SplatCloud(mu=data[:, 0:3], opacity_logit=data[:, 3],
                      log_scale=data[:, 4:7], rot=data[:, 7:11], sh=sh)
