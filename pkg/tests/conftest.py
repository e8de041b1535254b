import numpy as np
import pytest

from robustsplat.core import Camera, SplatCloud, num_sh_coeffs


def finite_diff(fn, x0, eps=1e-4):
    """Central-difference gradient of scalar fn at flat parameter vector x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += eps
        xm = x0.copy()
        xm[j] -= eps
        grad[j] = (fn(xp) - fn(xm)) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return np.abs(a - b).max(initial=0.0) / scale


def random_camera(rng, width=8, height=8):
    # small look-at jitter around the origin-facing pose
    angle = rng.uniform(0, 2 * np.pi)
    eye = np.array([3.0 * np.cos(angle), 0.4 * rng.standard_normal(),
                    3.0 * np.sin(angle)])
    target = rng.uniform(-0.2, 0.2, size=3)
    fx = fy = 0.9 * width
    return Camera.look_at(eye, target, up=(0.0, 1.0, 0.0), fx=fx, fy=fy,
                          cx=width / 2, cy=height / 2, width=width, height=height)


def random_cloud(rng, n, degree=1):
    """Random splats placed near the origin; parameters kept away from the
    alpha/color clamp boundaries so finite differences stay smooth."""
    k = num_sh_coeffs(degree)
    sh = 0.08 * rng.standard_normal((n, 3, k))
    sh[:, :, 0] = rng.uniform(-0.9, 0.9, size=(n, 3))
    rot = rng.standard_normal((n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return SplatCloud(
        mu=rng.uniform(-0.8, 0.8, size=(n, 3)),
        log_scale=rng.uniform(np.log(0.05), np.log(0.4), size=(n, 3)),
        rot=rot,
        opacity_logit=rng.uniform(-2.0, 1.5, size=n),
        sh=sh,
    )


def cloud_to_vector(cloud):
    return np.concatenate([cloud.mu.ravel(), cloud.log_scale.ravel(),
                           cloud.rot.ravel(), cloud.opacity_logit.ravel(),
                           cloud.sh.ravel()])


def vector_to_cloud(vec, template):
    n = len(template)
    k = template.sh.shape[2]
    sizes = [3 * n, 3 * n, 4 * n, n, 3 * n * k]
    parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
    return SplatCloud(mu=parts[0].reshape(n, 3), log_scale=parts[1].reshape(n, 3),
                      rot=parts[2].reshape(n, 4), opacity_logit=parts[3],
                      sh=parts[4].reshape(n, 3, k))


def gradset_to_vector(grads):
    return np.concatenate([grads.mu.ravel(), grads.log_scale.ravel(),
                           grads.rot.ravel(), grads.opacity_logit.ravel(),
                           grads.sh.ravel()])


@pytest.fixture(scope="session")
def warm_kernels():
    """Compile the numba kernels once so timing-sensitive tests measure math,
    not JIT."""
    from robustsplat.rasterizer import render, render_backward
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 3)
    cam = random_camera(rng)
    img, _ = render(cloud, cam)
    render_backward(cloud, cam, np.ones_like(img), np.ones(img.shape[:2]),
                    appearance=(np.ones(3), np.zeros(3)))
    return True
