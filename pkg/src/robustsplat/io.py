"""On-disk dataset and run-artifact formats.

Images are 8-bit PNGs mapped linearly to [0, 1] (value / 255, no gamma).
Cameras are plain text, one frame per line: 12 world-to-camera transform floats
(3x4 row-major), fx fy cx cy, width height. Masks are 8-bit grayscale PNGs with
0 = outlier and 255 = inlier. Manifests are sorted key=value lines.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image as PILImage

from .core import Camera


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(data).save(path, format='PNG')


def read_png(path) -> np.ndarray:
    img = np.asarray(PILImage.open(path).convert('RGB'), dtype=np.float64)
    return img / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    PILImage.fromarray(data, mode='L').save(path, format='PNG')


def read_mask_png(path) -> np.ndarray:
    img = np.asarray(PILImage.open(path).convert('L'), dtype=np.float64)
    return (img >= 128).astype(np.float64)


def write_cameras(path, cams: List[Camera]) -> None:
    lines = []
    for c in cams:
        tf = np.concatenate([c.R, c.t[:, None]], axis=1).ravel()
        nums = [f'{v:.17g}' for v in tf] + \
            [f'{v:.17g}' for v in (c.fx, c.fy, c.cx, c.cy)] + \
            [str(c.width), str(c.height)]
        lines.append(' '.join(nums))
    Path(path).write_text('\n'.join(lines) + '\n')


def read_cameras(path) -> List[Camera]:
    cams = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 18:
            raise ValueError(f"{path}: expected 18 fields per camera line, "
                             f"got {len(parts)}")
        vals = [float(v) for v in parts[:16]]
        tf = np.array(vals[:12]).reshape(3, 4)
        cams.append(Camera(R=tf[:, :3], t=tf[:, 3], fx=vals[12], fy=vals[13],
                           cx=vals[14], cy=vals[15],
                           width=int(parts[16]), height=int(parts[17])))
    return cams


def write_points(path, points: np.ndarray) -> None:
    lines = [' '.join(f'{v:.17g}' for v in row) for row in np.asarray(points)]
    Path(path).write_text('\n'.join(lines) + '\n')


def read_points(path) -> np.ndarray:
    rows = [[float(v) for v in line.split()]
            for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_manifest(path, entries: dict) -> None:
    lines = [f'{k}={entries[k]}' for k in sorted(entries)]
    Path(path).write_text('\n'.join(lines) + '\n')


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if '=' in line:
            k, v = line.split('=', 1)
            out[k] = v
    return out


def content_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


@dataclass
class Dataset:
    """Posed multi-view capture with optional ground truth and features."""
    root: Path
    train_images: List[np.ndarray]
    train_cams: List[Camera]
    test_images: List[np.ndarray]
    test_cams: List[Camera]
    gt_masks: Optional[List[np.ndarray]] = None       # per train frame
    feature_paths: Optional[List[Path]] = None        # per train frame
    points: Optional[np.ndarray] = None
    manifest: dict = field(default_factory=dict)

    @property
    def image_size(self):
        h, w = self.train_images[0].shape[:2]
        return w, h


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / 'cameras_train.txt').exists():
        raise FileNotFoundError(f"{root}: not a dataset directory "
                                "(missing cameras_train.txt)")
    train_cams = read_cameras(root / 'cameras_train.txt')
    test_cams = read_cameras(root / 'cameras_test.txt') \
        if (root / 'cameras_test.txt').exists() else []
    train_images = [read_png(root / 'train' / f'{i:04d}.png')
                    for i in range(len(train_cams))]
    test_images = [read_png(root / 'test' / f'{i:04d}.png')
                   for i in range(len(test_cams))]
    gt_masks = None
    if (root / 'masks').is_dir():
        gt_masks = [read_mask_png(root / 'masks' / f'{i:04d}.png')
                    for i in range(len(train_cams))]
    feature_paths = None
    if (root / 'features').is_dir():
        paths = [root / 'features' / f'{i:04d}.fmap' for i in range(len(train_cams))]
        if all(p.exists() for p in paths):
            feature_paths = paths
    points = read_points(root / 'points.txt') if (root / 'points.txt').exists() else None
    manifest = read_manifest(root / 'manifest.txt') \
        if (root / 'manifest.txt').exists() else {}
    return Dataset(root=root, train_images=train_images, train_cams=train_cams,
                   test_images=test_images, test_cams=test_cams,
                   gt_masks=gt_masks, feature_paths=feature_paths,
                   points=points, manifest=manifest)
