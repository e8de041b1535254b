"""Per-image appearance latents mapped to an affine SH color transform.

Each training view owns a 64-dim latent; a two-layer network turns it into a
per-channel multiplicative factor a (applied to every SH coefficient of the
channel) and an additive offset b (applied to the DC coefficient). The output
layer is zero-initialized so the transform starts as the identity.
"""
from __future__ import annotations

import struct
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .optim import AdamState, adam_update

LATENT_DIM = 64
HIDDEN = 64
MAGIC = b"APPR"


class AppearanceModel:
    def __init__(self, n_images: int, latent_dim: int = LATENT_DIM,
                 hidden: int = HIDDEN, lr: float = 1e-3,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.n_images = n_images
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.lr = lr
        self.latents = np.zeros((n_images, latent_dim))
        lim = np.sqrt(6.0 / (latent_dim + hidden))
        self.W1 = rng.uniform(-lim, lim, size=(hidden, latent_dim))
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((6, hidden))  # zero init: identity transform
        self.b2 = np.zeros(6)
        self._adam = {name: AdamState.like(p) for name, p in self._params()}

    def _params(self):
        yield "latents", self.latents
        yield "W1", self.W1
        yield "b1", self.b1
        yield "W2", self.W2
        yield "b2", self.b2

    def _transform_from_latent(self, z: np.ndarray):
        h = np.tanh(self.W1 @ z + self.b1)
        out = self.W2 @ h + self.b2
        a = 1.0 + out[:3]
        b = out[3:]
        return a, b, h

    def transform(self, image_index: int):
        """(a, b) for a training view's latent."""
        if not 0 <= image_index < self.n_images:
            warnings.warn(f"no appearance latent for image {image_index}; "
                          "using the identity transform")
            return np.ones(3), np.zeros(3)
        a, b, _ = self._transform_from_latent(self.latents[image_index])
        return a, b

    def mean_transform(self):
        """Transform from the mean trained latent (held-out views)."""
        a, b, _ = self._transform_from_latent(self.latents.mean(axis=0))
        return a, b

    def step(self, image_index: int, d_a: np.ndarray, d_b: np.ndarray) -> None:
        """Adam step on the latent and network given gradients w.r.t. (a, b)."""
        grads = self.gradients(image_index, d_a, d_b)
        for name, param in self._params():
            adam_update(param, grads[name], self._adam[name], self.lr)

    def gradients(self, image_index: int, d_a: np.ndarray, d_b: np.ndarray):
        z = self.latents[image_index]
        h = np.tanh(self.W1 @ z + self.b1)
        d_out = np.concatenate([d_a, d_b])
        dW2 = np.outer(d_out, h)
        db2 = d_out
        d_h = self.W2.T @ d_out
        d_pre = d_h * (1 - h ** 2)
        dW1 = np.outer(d_pre, z)
        db1 = d_pre
        d_z = self.W1.T @ d_pre
        d_lat = np.zeros_like(self.latents)
        d_lat[image_index] = d_z
        return {"latents": d_lat, "W1": dW1, "b1": db1, "W2": dW2, "b2": db2}

    def save(self, path) -> None:
        with open(path, 'wb') as f:
            f.write(MAGIC)
            f.write(struct.pack('<IIII', 1, self.n_images, self.latent_dim,
                                self.hidden))
            for _, p in self._params():
                f.write(p.astype('<f4').tobytes())

    @classmethod
    def load(cls, path) -> "AppearanceModel":
        blob = Path(path).read_bytes()
        if blob[:4] != MAGIC:
            raise ValueError(f"{path}: not an appearance checkpoint")
        _, n_images, latent_dim, hidden = struct.unpack('<IIII', blob[4:20])
        model = cls(n_images=n_images, latent_dim=latent_dim, hidden=hidden)
        vec = np.frombuffer(blob[20:], dtype='<f4').astype(np.float64)
        i = 0
        for _, p in model._params():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
        return model


def appearance_apply(model: AppearanceModel, image_index: int,
                     sh: np.ndarray) -> np.ndarray:
    """Adjusted coefficients: every channel scaled by a[ch], b[ch] added to DC."""
    a, b = model.transform(image_index)
    out = np.asarray(sh, dtype=np.float64) * a[..., :, None]
    out[..., :, 0] += b
    return out
