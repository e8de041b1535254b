"""Deterministic synthetic multi-view scenes with transient distractors.

An analytic ray tracer (lambertian spheres/boxes, one directional light plus
ambient) renders orbiting pinhole views of a small static scene. Selected
training frames get a transient distractor composited with correct occlusion,
together with exact per-pixel ground-truth masks, oracle feature maps, and
sparse surface points for initialization. Everything derives from the seed.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

from scipy.ndimage import correlate

from .core import Camera
from .features import FeatureMap, N_SYNTHETIC_CHANNELS, save_feature_map, synthetic_features
from . import io

AMBIENT = 0.35
ONE_HOT_SCALE = 1000.0
_EPS = 1e-6


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray


@dataclass
class DistractorSpec:
    shape: str                    # 'sphere' | 'box'
    albedo: np.ndarray
    coverage: float               # target fraction of image pixels
    frame_fraction: float         # fraction of train frames it appears in
    drift: float = 0.25           # image-space drift across its frames (units of W)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 0.5:
            raise ValueError("distractor coverage must lie in [0, 0.5]")
        if self.shape not in ('sphere', 'box'):
            raise ValueError(f"unknown distractor shape {self.shape!r}")


def _default_statics():
    spheres = [
        Sphere(np.array([-0.5, -0.05, 0.0]), 0.40, np.array([0.85, 0.25, 0.2])),
        Sphere(np.array([0.55, -0.15, 0.35]), 0.30, np.array([0.2, 0.35, 0.85])),
        Sphere(np.array([-0.15, -0.3, 0.7]), 0.15, np.array([0.25, 0.75, 0.3])),
    ]
    boxes = [
        Box(np.array([-1.6, -0.55, -1.6]), np.array([1.6, -0.45, 1.6]),
            np.array([0.55, 0.55, 0.5])),
        Box(np.array([0.0, -0.45, -0.75]), np.array([0.6, 0.15, -0.15]),
            np.array([0.85, 0.75, 0.25])),
    ]
    return spheres, boxes


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 64
    n_train: int = 40
    n_test: int = 10
    orbit_radius: float = 3.2
    orbit_height: float = 1.4
    pose_jitter: float = 0.06
    fov_deg: float = 55.0
    spheres: List[Sphere] = field(default_factory=lambda: _default_statics()[0])
    boxes: List[Box] = field(default_factory=lambda: _default_statics()[1])
    distractors: List[DistractorSpec] = field(default_factory=list)
    exposure_jitter: bool = False
    exposure_gain: float = 0.15
    exposure_bias: float = 0.08
    n_points: int = 800


PRESETS = {
    'clean': dict(frames=0.0, coverage=0.0),
    'low': dict(frames=0.10, coverage=0.05),
    'medium': dict(frames=0.30, coverage=0.15),
    'high': dict(frames=0.60, coverage=0.25),
}


def preset_spec(name: str, seed: int = 0, **overrides) -> SceneSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    distractors = []
    if p['frames'] > 0:
        half = p['frames'] / 2.0
        distractors = [
            DistractorSpec('sphere', np.array([0.9, 0.45, 0.1]),
                           coverage=p['coverage'], frame_fraction=half),
            DistractorSpec('box', np.array([0.3, 0.1, 0.5]),
                           coverage=p['coverage'], frame_fraction=half),
        ]
    spec = SceneSpec(seed=seed, distractors=distractors)
    return replace(spec, **overrides) if overrides else spec


@dataclass
class GeneratedDataset:
    spec: SceneSpec
    train_images: List[np.ndarray]
    train_cams: List[Camera]
    test_images: List[np.ndarray]
    test_cams: List[Camera]
    gt_masks: List[np.ndarray]            # 1 = static (inlier), 0 = distractor
    feature_maps: List[FeatureMap]        # oracles: one-hot ids + synthetic
    points: np.ndarray
    object_ids: List[np.ndarray]


# --- ray tracing ---------------------------------------------------------

def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(t1 > _EPS, t1, t2)
    t = np.where(hit & (t > _EPS), t, np.inf)
    return t


def _intersect_box(origin, dirs, lo, hi):
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= np.maximum(tmin, _EPS))
    t = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit & (t > _EPS), t, np.inf)


def _box_normal(point, lo, hi):
    d_lo = np.abs(point - lo)
    d_hi = np.abs(point - hi)
    n = np.zeros_like(point)
    axis_lo = np.argmin(d_lo, axis=1)
    axis_hi = np.argmin(d_hi, axis=1)
    use_lo = d_lo[np.arange(len(point)), axis_lo] <= d_hi[np.arange(len(point)), axis_hi]
    rows = np.arange(len(point))
    n[rows[use_lo], axis_lo[use_lo]] = -1.0
    n[rows[~use_lo], axis_hi[~use_lo]] = 1.0
    return n


def _camera_rays(cam: Camera):
    yy, xx = np.mgrid[0:cam.height, 0:cam.width]
    d = np.stack([(xx + 0.5 - cam.cx) / cam.fx,
                  (yy + 0.5 - cam.cy) / cam.fy,
                  np.ones_like(xx, dtype=np.float64)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ cam.R  # world-frame directions


def _render_scene(cam: Camera, prims, light_dir):
    """Trace (primitive, object_id) pairs; returns (image, per-pixel object id)
    with id 0 = background (black)."""
    origin = cam.center
    dirs = _camera_rays(cam)
    m = dirs.shape[0]
    best_t = np.full(m, np.inf)
    obj = np.zeros(m, dtype=np.int32)
    slot = np.full(m, -1, dtype=np.int32)
    for si, (prim, oid) in enumerate(prims):
        if isinstance(prim, Sphere):
            t = _intersect_sphere(origin, dirs, prim.center, prim.radius)
        else:
            t = _intersect_box(origin, dirs, prim.lo, prim.hi)
        closer = t < best_t
        best_t[closer] = t[closer]
        obj[closer] = oid
        slot[closer] = si

    color = np.zeros((m, 3))
    hit = slot >= 0
    if hit.any():
        pts = origin + dirs[hit] * best_t[hit, None]
        normals = np.zeros_like(pts)
        albedo = np.zeros_like(pts)
        sh = slot[hit]
        for si, (prim, _) in enumerate(prims):
            sel = sh == si
            if not sel.any():
                continue
            albedo[sel] = prim.albedo
            if isinstance(prim, Sphere):
                nn = pts[sel] - prim.center
                normals[sel] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
            else:
                normals[sel] = _box_normal(pts[sel], prim.lo, prim.hi)
        lam = np.maximum(normals @ light_dir, 0.0)
        shade = AMBIENT + (1.0 - AMBIENT) * lam
        color[hit] = albedo * shade[:, None]
    img = np.clip(color, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    return img, obj.reshape(cam.height, cam.width)


# --- generation ----------------------------------------------------------

def _orbit_cameras(spec: SceneSpec, rng, n, phase, jitter):
    fx = 0.5 * spec.width / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    cams = []
    target = np.array([0.0, -0.1, 0.0])
    for i in range(n):
        az = 2 * np.pi * (i + phase) / n
        eye = np.array([spec.orbit_radius * np.cos(az),
                        spec.orbit_height,
                        spec.orbit_radius * np.sin(az)])
        if jitter > 0:
            eye = eye + rng.uniform(-jitter, jitter, size=3)
        cams.append(Camera.look_at(eye, target, up=(0, 1, 0), fx=fx, fy=fx,
                                   cx=spec.width / 2.0, cy=spec.height / 2.0,
                                   width=spec.width, height=spec.height))
    return cams


def _place_distractor(spec: SceneSpec, d: DistractorSpec, cam: Camera,
                      progress: float, rng):
    """Position one transient primitive part-way along a view ray so its
    projection covers roughly the requested pixel fraction."""
    w, h = cam.width, cam.height
    px_area = d.coverage * w * h
    drift = d.drift * w
    u = cam.cx + (progress - 0.5) * drift + rng.uniform(-0.05, 0.05) * w
    v = cam.cy + rng.uniform(-0.08, 0.08) * h
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    ray /= np.linalg.norm(ray)
    ray_w = cam.R.T @ ray
    dist_to_target = np.linalg.norm(cam.center - np.array([0.0, -0.1, 0.0]))
    depth = 0.45 * dist_to_target
    pos = cam.center + depth * ray_w
    if d.shape == 'sphere':
        r_px = np.sqrt(px_area / np.pi)
        radius = r_px * depth / np.sqrt(cam.fx ** 2 + r_px ** 2)
        return Sphere(pos, radius, d.albedo)
    # cube silhouette area for view direction v is side^2 * sum_i |v_i|
    world_area = px_area * (depth / cam.fx) ** 2
    side = np.sqrt(world_area / np.abs(ray_w).sum())
    half = 0.5 * side
    return Box(pos - half, pos + half, d.albedo)


def generate(spec: SceneSpec) -> GeneratedDataset:
    rng = np.random.default_rng(spec.seed)
    light = np.array([0.4, 1.0, 0.25])
    light /= np.linalg.norm(light)

    cams_train = _orbit_cameras(spec, np.random.default_rng(spec.seed + 1),
                                spec.n_train, 0.0, spec.pose_jitter)
    cams_test = _orbit_cameras(spec, np.random.default_rng(spec.seed + 2),
                               spec.n_test, 0.37, 0.0)

    # assign disjoint frame subsets to distractor specs
    frame_pool = np.random.default_rng(spec.seed + 3).permutation(spec.n_train)
    cursor = 0
    placements = {i: [] for i in range(spec.n_train)}
    for k, d in enumerate(spec.distractors):
        n_frames = int(round(d.frame_fraction * spec.n_train))
        frames = np.sort(frame_pool[cursor:cursor + n_frames])
        cursor += n_frames
        d_rng = np.random.default_rng(spec.seed + 100 + k)
        for j, f in enumerate(frames):
            progress = j / max(len(frames) - 1, 1)
            placements[int(f)].append((k, progress, d_rng))

    n_static = len(spec.spheres) + len(spec.boxes)
    n_ids = 1 + n_static + len(spec.distractors)
    static_prims = [(p, 1 + i) for i, p in enumerate(spec.spheres + spec.boxes)]

    train_images, gt_masks, fmaps, object_ids = [], [], [], []
    exposure_rng = np.random.default_rng(spec.seed + 4)
    for i, cam in enumerate(cams_train):
        prims = list(static_prims)
        for (k, progress, d_rng) in placements[i]:
            prim = _place_distractor(spec, spec.distractors[k], cam, progress, d_rng)
            prims.append((prim, 1 + n_static + k))
        img, ids = _render_scene(cam, prims, light)
        mask = (ids <= n_static).astype(np.float64)  # 1 = static/background

        if spec.exposure_jitter:
            gain = 1.0 + exposure_rng.uniform(-spec.exposure_gain, spec.exposure_gain)
            bias = exposure_rng.uniform(-spec.exposure_bias, spec.exposure_bias)
            img = np.clip(gain * img + bias, 0.0, 1.0)

        one_hot = np.zeros((spec.height, spec.width, n_ids), dtype=np.float32)
        for oid in range(n_ids):
            one_hot[:, :, oid] = (ids == oid) * ONE_HOT_SCALE
        synth = synthetic_features(img).data
        fmaps.append(FeatureMap(np.concatenate([one_hot, synth], axis=2)))

        train_images.append(img)
        gt_masks.append(mask)
        object_ids.append(ids)

    test_images = []
    for cam in cams_test:
        img, _ = _render_scene(cam, static_prims, light)
        test_images.append(img)

    points = _sample_surface_points(spec, np.random.default_rng(spec.seed + 5))
    return GeneratedDataset(spec=spec, train_images=train_images,
                            train_cams=cams_train, test_images=test_images,
                            test_cams=cams_test, gt_masks=gt_masks,
                            feature_maps=fmaps, points=points,
                            object_ids=object_ids)


def _sample_surface_points(spec: SceneSpec, rng) -> np.ndarray:
    areas = []
    prims = []
    for s in spec.spheres:
        areas.append(4 * np.pi * s.radius ** 2)
        prims.append(('sphere', s))
    for b in spec.boxes:
        e = b.hi - b.lo
        areas.append(2 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2]))
        prims.append(('box', b))
    areas = np.array(areas)
    probs = areas / areas.sum()
    choices = rng.choice(len(prims), size=spec.n_points, p=probs)
    pts = np.empty((spec.n_points, 3))
    for i, c in enumerate(choices):
        kind, prim = prims[c]
        if kind == 'sphere':
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            pts[i] = prim.center + prim.radius * v
        else:
            e = prim.hi - prim.lo
            face_areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2],
                                   e[0] * e[2], e[0] * e[1], e[0] * e[1]])
            f = rng.choice(6, p=face_areas / face_areas.sum())
            p = prim.lo + e * rng.random(3)
            axis = f // 2
            p[axis] = prim.lo[axis] if f % 2 == 0 else prim.hi[axis]
            pts[i] = p
    return pts


def save_dataset(gen: GeneratedDataset, out_dir) -> None:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    for sub in ('train', 'test', 'masks', 'features'):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(gen.train_images):
        io.write_png(out / 'train' / f'{i:04d}.png', img)
        io.write_mask_png(out / 'masks' / f'{i:04d}.png', gen.gt_masks[i])
        save_feature_map(gen.feature_maps[i], out / 'features' / f'{i:04d}.fmap')
    for i, img in enumerate(gen.test_images):
        io.write_png(out / 'test' / f'{i:04d}.png', img)
    io.write_cameras(out / 'cameras_train.txt', gen.train_cams)
    io.write_cameras(out / 'cameras_test.txt', gen.test_cams)
    io.write_points(out / 'points.txt', gen.points)
    spec = gen.spec
    io.write_manifest(out / 'manifest.txt', {
        'seed': spec.seed, 'width': spec.width, 'height': spec.height,
        'n_train': spec.n_train, 'n_test': spec.n_test,
        'n_distractors': len(spec.distractors),
        'exposure_jitter': int(spec.exposure_jitter),
        'tool_version': '0.1.0',
    })


# --- evaluation ----------------------------------------------------------

def eval_masks(predicted: List[np.ndarray], gt: List[np.ndarray]):
    """IoU between predicted-outlier (mask == 0) and GT-distractor pixel sets."""
    ious = []
    for p, g in zip(predicted, gt):
        if p.shape != g.shape:
            raise ValueError("mask shapes differ")
        a = p == 0
        b = g == 0
        union = np.logical_or(a, b).sum()
        inter = np.logical_and(a, b).sum()
        ious.append(1.0 if union == 0 else float(inter / union))
    return ious, float(np.mean(ious)) if ious else 1.0


_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_WIN = 11


def _gaussian_kernel():
    r = _SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def metrics(rendered: np.ndarray, reference: np.ndarray):
    """(PSNR dB capped at 99, SSIM with an 11x11 sigma-1.5 Gaussian window)."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    psnr = 99.0 if mse <= 0 else min(10.0 * np.log10(1.0 / mse), 99.0)

    if min(a.shape[0], a.shape[1]) < _SSIM_WIN:
        raise ValueError("images must be at least 11x11 for SSIM")
    kern = _gaussian_kernel()
    r = _SSIM_WIN // 2
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2

    def filt(x):
        return correlate(x, kern, mode='constant')[r:-r, r:-r]

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x, mu_y = filt(x), filt(y)
        sxx = filt(x * x) - mu_x ** 2
        syy = filt(y * y) - mu_y ** 2
        sxy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(psnr), float(np.mean(vals))
