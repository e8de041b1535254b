"""Feature-map ingestion and generation plus constrained agglomerative clustering.

Feature maps arrive either from .fmap files (pre-extracted elsewhere) or from
the built-in synthetic extractor. Clustering over-segments an image into C
spatially 8-connected clusters by greedy Ward merges and is the backbone of the
cluster-vote masking path.
"""
from __future__ import annotations

import hashlib
import heapq
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


class FeatureMapError(ValueError):
    """Malformed .fmap container; message carries the failing byte offset."""


@dataclass
class FeatureMap:
    """Dense per-image feature tensor, possibly coarser than the image."""
    data: np.ndarray  # (H', W', D) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise ValueError("feature map must be (H, W, D) with D >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    def at_resolution(self, height: int, width: int) -> np.ndarray:
        """Bilinear, corner-aligned upsampling to the requested resolution."""
        return bilinear_upsample(self.data, height, width)


def bilinear_upsample(data: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = data.shape[:2]
    if (h, w) == (height, width):
        return np.asarray(data, dtype=np.float64)
    ys = np.linspace(0.0, h - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, width) if width > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    d = np.asarray(data, dtype=np.float64)
    top = d[y0][:, x0] * (1 - fx) + d[y0][:, x1] * fx
    bot = d[y1][:, x0] * (1 - fx) + d[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def save_feature_map(fmap: FeatureMap, path) -> None:
    h, w, d = fmap.data.shape
    with open(path, 'wb') as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack('<IIII', FMAP_VERSION, h, w, d))
        f.write(fmap.data.astype('<f4').tobytes())


def load_feature_map(path) -> FeatureMap:
    blob = Path(path).read_bytes()
    if blob[:4] != FMAP_MAGIC:
        raise FeatureMapError(f"{path}: bad magic at byte 0 "
                              f"(expected {FMAP_MAGIC!r}, found {blob[:4]!r})")
    if len(blob) < 20:
        raise FeatureMapError(f"{path}: truncated header at byte {len(blob)}")
    version, h, w, d = struct.unpack('<IIII', blob[4:20])
    if version != FMAP_VERSION:
        raise FeatureMapError(f"{path}: unsupported version {version} at byte 4")
    expected = 20 + h * w * d * 4
    if len(blob) < expected:
        raise FeatureMapError(f"{path}: truncated payload at byte {len(blob)} "
                              f"(expected {expected} bytes)")
    data = np.frombuffer(blob[20:expected], dtype='<f4').reshape(h, w, d)
    return FeatureMap(data=data.copy())


def positional_encoding(coords: np.ndarray, degree: int = 20) -> np.ndarray:
    """Per band k: [sin(2^k pi x), cos(2^k pi x), sin(2^k pi y), cos(2^k pi y)].

    coords (..., 2) in [0, 1]^2 -> (..., 4 * degree).
    """
    if degree < 1:
        raise ValueError("positional encoding degree must be >= 1")
    coords = np.asarray(coords, dtype=np.float64)
    x, y = coords[..., 0], coords[..., 1]
    out = np.empty(coords.shape[:-1] + (4 * degree,))
    for k in range(degree):
        f = (2.0 ** k) * np.pi
        out[..., 4 * k + 0] = np.sin(f * x)
        out[..., 4 * k + 1] = np.cos(f * x)
        out[..., 4 * k + 2] = np.sin(f * y)
        out[..., 4 * k + 3] = np.cos(f * y)
    return out


N_SYNTHETIC_CHANNELS = 16


def synthetic_features(image: np.ndarray) -> FeatureMap:
    """Hand-crafted 16-channel stand-in for learned features.

    3 blurred RGB (sigma 2), 8 oriented gradient magnitudes (sigma-1 derivative
    filters), 3 coarse RGB (sigma 8), 2 normalized coordinates; every channel
    standardized to zero mean / unit variance over the image.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    chans = []
    for c in range(3):
        chans.append(gaussian_filter(img[:, :, c], sigma=2.0))
    gray = img.mean(axis=2)
    gx = gaussian_filter(gray, sigma=1.0, order=(0, 1))
    gy = gaussian_filter(gray, sigma=1.0, order=(1, 0))
    for k in range(8):
        theta = k * np.pi / 8.0
        chans.append(np.abs(np.cos(theta) * gx + np.sin(theta) * gy))
    for c in range(3):
        chans.append(gaussian_filter(img[:, :, c], sigma=8.0))
    yy, xx = np.mgrid[0:h, 0:w]
    chans.append(xx / max(w - 1, 1))
    chans.append(yy / max(h - 1, 1))
    stack = np.stack(chans, axis=2)
    mean = stack.mean(axis=(0, 1), keepdims=True)
    std = stack.std(axis=(0, 1), keepdims=True)
    stack = (stack - mean) / (std + 1e-8)
    return FeatureMap(data=stack.astype(np.float32))


@dataclass
class ClusterAssignment:
    """Dense pixel-to-cluster labels; every cluster is 8-connected."""
    labels: np.ndarray  # (H, W) int32 in [0, n_clusters)
    n_clusters: int


def _pixel_neighbors(h: int, w: int):
    """8-adjacency sets per flat pixel index."""
    neigh = [set() for _ in range(h * w)]
    for i in range(h):
        for j in range(w):
            p = i * w + j
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        neigh[p].add(ii * w + jj)
    return neigh


def ward_cost(n_a, mean_a, n_b, mean_b) -> float:
    d = mean_a - mean_b
    return (n_a * n_b) / (n_a + n_b) * float(d @ d)


def agglomerative_cluster(features: np.ndarray, n_clusters: int) -> ClusterAssignment:
    """Greedy Ward agglomeration restricted to 8-adjacent cluster pairs.

    Starts from one cluster per pixel, always merging the adjacent pair with
    the minimum variance-increase cost n_a n_b / (n_a + n_b) * ||mean diff||^2,
    ties broken by the lexicographically smallest (min id, max id) pair, until
    exactly n_clusters remain.
    """
    features = np.asarray(features, dtype=np.float64)
    h, w, _ = features.shape
    n = h * w
    if not 1 <= n_clusters <= n:
        raise ValueError("cluster count must lie in [1, pixel count]")

    feats = features.reshape(n, -1)
    size = np.ones(n)
    mean = feats.copy()
    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    parent = np.arange(n)
    neigh = _pixel_neighbors(h, w)

    heap = []
    for a in range(n):
        for b in neigh[a]:
            if a < b:
                heap.append((ward_cost(size[a], mean[a], size[b], mean[b]),
                             a, b, 0, 0))
    heapq.heapify(heap)

    remaining = n
    while remaining > n_clusters:
        cost, a, b, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        # merge b into a (a < b by construction)
        tot = size[a] + size[b]
        mean[a] = (size[a] * mean[a] + size[b] * mean[b]) / tot
        size[a] = tot
        alive[b] = False
        parent[b] = a
        version[a] += 1
        nb_union = (neigh[a] | neigh[b]) - {a, b}
        neigh[a] = nb_union
        for c in nb_union:
            neigh[c].discard(b)
            neigh[c].add(a)
            lo, hi = (a, c) if a < c else (c, a)
            heapq.heappush(heap, (ward_cost(size[lo], mean[lo], size[hi], mean[hi]),
                                  lo, hi, version[lo], version[hi]))
        remaining -= 1

    # resolve every pixel to its surviving root, then relabel compactly in
    # row-major first-appearance order so labels are deterministic
    roots = parent.copy()
    while True:
        nxt = parent[roots]
        if np.array_equal(nxt, roots):
            break
        roots = nxt
    labels = np.empty(n, dtype=np.int32)
    mapping = {}
    for p in range(n):
        r = roots[p]
        if r not in mapping:
            mapping[r] = len(mapping)
        labels[p] = mapping[r]
    assert len(mapping) == n_clusters
    return ClusterAssignment(labels=labels.reshape(h, w), n_clusters=n_clusters)


def standardize_channels(features: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel; classifier input normalization so
    arbitrarily scaled feature sources behave alike."""
    f = np.asarray(features, dtype=np.float64)
    mean = f.mean(axis=(0, 1), keepdims=True)
    std = f.std(axis=(0, 1), keepdims=True)
    return (f - mean) / (std + 1e-8)


def feature_content_key(features: np.ndarray, n_clusters: int) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(features, dtype=np.float32).tobytes())
    h.update(struct.pack('<I', n_clusters))
    return h.hexdigest()


def cached_cluster(features: np.ndarray, n_clusters: int,
                   cache_dir=None) -> ClusterAssignment:
    """Cluster once per image content; reuse a disk cache when given.

    Cache entries are .fmap containers with D=1 and float32-encoded labels.
    """
    if cache_dir is None:
        return agglomerative_cluster(features, n_clusters)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / (feature_content_key(features, n_clusters) + '.fmap')
    if path.exists():
        labels = load_feature_map(path).data[:, :, 0].astype(np.int32)
        return ClusterAssignment(labels=labels, n_clusters=int(labels.max()) + 1)
    assignment = agglomerative_cluster(features, n_clusters)
    save_feature_map(FeatureMap(assignment.labels[:, :, None].astype(np.float32)),
                     path)
    return assignment
