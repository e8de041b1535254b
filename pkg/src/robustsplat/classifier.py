"""Per-pixel inlier classifier with hinge self-supervision and a learnable
Lipschitz bound per layer.

The network is three affine layers applied pixel-wise (equivalent to 1x1
convolutions) with tanh between them and a sigmoid output. Each layer's weight
rows are rescaled so the matrix inf-norm stays below softplus(c_l); the product
of the bounds is penalized, which regularizes the network's Lipschitz constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import sigmoid
from .optim import AdamState, adam_update
from .robust import ResidualHistogram, robust_filter_mask

HIDDEN_WIDTH = 96
DEFAULT_LR = 1e-3
LABEL_TAU_LOW = 0.5
LABEL_TAU_HIGH = 0.9


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _softplus_grad(x):
    return sigmoid(x)


@dataclass
class LabelPair:
    """Hinge supervision bands: U from tau=0.5 (confident inliers push up),
    L from tau=0.9 (confident outliers push down); U <= L elementwise."""
    U: np.ndarray
    L: np.ndarray


def make_labels(res: np.ndarray, hist: ResidualHistogram) -> LabelPair:
    rho_low = hist.quantile(LABEL_TAU_LOW)
    if rho_low is None:
        shape = np.asarray(res).shape
        return LabelPair(U=np.zeros(shape), L=np.ones(shape))
    rho_high = hist.quantile(LABEL_TAU_HIGH)
    return LabelPair(U=robust_filter_mask(res, rho_low),
                     L=robust_filter_mask(res, rho_high))


class MaskClassifier:
    """3-layer pixel-wise MLP: (D + posenc) -> 96 -> 96 -> 1."""

    def __init__(self, in_dim: int, hidden: int = HIDDEN_WIDTH,
                 rng: Optional[np.random.Generator] = None, lr: float = DEFAULT_LR):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden
        self.lr = lr
        dims = [(hidden, in_dim), (hidden, hidden), (1, hidden)]
        self.W: List[np.ndarray] = []
        self.b: List[np.ndarray] = []
        for out_d, in_d in dims:
            lim = np.sqrt(6.0 / (in_d + out_d))
            self.W.append(rng.uniform(-lim, lim, size=(out_d, in_d)))
            self.b.append(np.zeros(out_d))
        # bounds start just above the actual inf-norms so rescaling is inactive
        self.c = np.array([softplus_inv(1.2 * np.abs(W).sum(axis=1).max())
                           for W in self.W])
        self._adam = {name: AdamState.like(p) for name, p in self._params()}

    def _params(self):
        for i in range(3):
            yield f"W{i}", self.W[i]
            yield f"b{i}", self.b[i]
        yield "c", self.c

    @property
    def n_params(self) -> int:
        return sum(p.size for _, p in self._params())

    def _scaled_weights(self):
        """Row-rescaled weights and the per-layer scale vectors."""
        out = []
        for W, c in zip(self.W, self.c):
            rowsum = np.abs(W).sum(axis=1)
            bound = softplus(c)
            scale = np.minimum(1.0, bound / np.maximum(rowsum, 1e-30))
            out.append((W * scale[:, None], scale, rowsum))
        return out

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Pixel-wise inlier probabilities; features (..., in_dim) -> (...)."""
        p, _ = self._forward_cached(features)
        return p

    def _forward_cached(self, features):
        """Heavy math runs in the input's float dtype (float32 inputs keep the
        training loop fast; float64 inputs keep gradient tests exact)."""
        x = np.asarray(features)
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} feature channels, "
                             f"got {x.shape[-1]}")
        dt = x.dtype
        flat = x.reshape(-1, self.in_dim)
        scaled = self._scaled_weights()
        a1 = flat @ scaled[0][0].T.astype(dt) + self.b[0].astype(dt)
        h1 = np.tanh(a1)
        a2 = h1 @ scaled[1][0].T.astype(dt) + self.b[1].astype(dt)
        h2 = np.tanh(a2)
        logit = (h2 @ scaled[2][0].T.astype(dt) + self.b[2].astype(dt))[:, 0]
        prob = sigmoid(logit.astype(np.float64))
        cache = (flat, h1, h2, logit, prob, scaled)
        return prob.reshape(x.shape[:-1]), cache

    def lipschitz_penalty(self) -> float:
        return float(np.prod(softplus(self.c)))

    def lipschitz_bound(self) -> float:
        """Upper bound on the logit's Lipschitz constant w.r.t. the inf-norm
        (tanh slope bound is 1)."""
        bounds = [min(softplus(c), np.abs(Ws).sum(axis=1).max() if Ws.size else 0.0)
                  for (Ws, _, _), c in zip(self._scaled_weights(), self.c)]
        return float(np.prod([max(b, 0.0) for b in bounds]))

    def loss(self, pred: np.ndarray, labels: LabelPair, lam: float = 0.5) -> float:
        """Mean hinge supervision plus lam * product-of-bounds penalty."""
        if pred.shape != labels.U.shape:
            raise ValueError("prediction and label shapes differ")
        sup = np.maximum(labels.U - pred, 0.0) + np.maximum(pred - labels.L, 0.0)
        return float(sup.mean() + lam * self.lipschitz_penalty())

    def _backward(self, cache, labels: LabelPair, lam: float):
        flat, h1, h2, logit, prob, scaled = cache
        dt = flat.dtype
        n = prob.size
        U = labels.U.ravel()
        L = labels.L.ravel()
        d_pred = (-(prob < U).astype(np.float64) + (prob > L)) / n
        d_logit = (d_pred * prob * (1 - prob)).astype(dt)

        grads = {}
        d_c = np.zeros(3)

        def affine_back(d_out, inputs, layer):
            Ws, scale, rowsum = scaled[layer]
            W = self.W[layer]
            c = self.c[layer]
            dW_scaled = (d_out.T @ inputs).astype(np.float64)
            db = d_out.sum(axis=0).astype(np.float64)
            d_in = d_out @ Ws.astype(dt)
            active = scale < 1.0
            bound = softplus(c)
            dot = (dW_scaled * W).sum(axis=1)  # per-row <g, w>
            dW = dW_scaled * scale[:, None]
            corr = np.where(active, dot * bound / rowsum ** 2, 0.0)
            dW -= corr[:, None] * np.sign(W)
            d_c[layer] += float((np.where(active, dot / rowsum, 0.0)).sum()
                                * _softplus_grad(c))
            return dW, db, d_in

        d_a3 = d_logit[:, None]
        dW3, db3, d_h2 = affine_back(d_a3, h2, 2)
        d_a2 = d_h2 * (1 - h2 ** 2)
        dW2, db2, d_h1 = affine_back(d_a2, h1, 1)
        d_a1 = d_h1 * (1 - h1 ** 2)
        dW1, db1, _ = affine_back(d_a1, flat, 0)

        sp = softplus(self.c)
        prod = np.prod(sp)
        d_c += lam * prod / sp * _softplus_grad(self.c)

        grads["W0"], grads["b0"] = dW1, db1
        grads["W1"], grads["b1"] = dW2, db2
        grads["W2"], grads["b2"] = dW3, db3
        grads["c"] = d_c
        return grads

    def loss_and_grads(self, features: np.ndarray, labels: LabelPair,
                       lam: float = 0.5):
        pred, cache = self._forward_cached(features)
        value = self.loss(pred, LabelPair(labels.U, labels.L), lam)
        return value, self._backward(cache, labels, lam)

    def step(self, features: np.ndarray, labels: LabelPair,
             lam: float = 0.5) -> float:
        """One Adam step on the classifier loss; the splat model is untouched."""
        value, grads = self.loss_and_grads(features, labels, lam)
        for name, param in self._params():
            adam_update(param, grads[name], self._adam[name], self.lr)
        return value

    def step_and_predict(self, features: np.ndarray, labels: LabelPair,
                         lam: float = 0.5):
        """One step sharing a single forward pass; returns that pass's
        probabilities (pre-update parameters)."""
        pred, cache = self._forward_cached(features)
        value = self.loss(pred, labels, lam)
        grads = self._backward(cache, labels, lam)
        for name, param in self._params():
            adam_update(param, grads[name], self._adam[name], self.lr)
        return pred, value

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self._params()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for _, p in self._params():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    # --- checkpoint blob -------------------------------------------------
    MAGIC = b"MCLF"

    def save(self, path) -> None:
        import struct
        with open(path, 'wb') as f:
            f.write(self.MAGIC)
            f.write(struct.pack('<III', 1, self.in_dim, self.hidden))
            f.write(self.get_flat_params().astype('<f4').tobytes())

    @classmethod
    def load(cls, path) -> "MaskClassifier":
        import struct
        from pathlib import Path
        blob = Path(path).read_bytes()
        if blob[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not a classifier checkpoint")
        _, in_dim, hidden = struct.unpack('<III', blob[4:16])
        clf = cls(in_dim=in_dim, hidden=hidden)
        params = np.frombuffer(blob[16:], dtype='<f4').astype(np.float64)
        if params.size != clf.n_params:
            raise ValueError(f"{path}: parameter count mismatch "
                             f"({params.size} != {clf.n_params})")
        clf.set_flat_params(params)
        return clf


def classifier_forward(clf: MaskClassifier, features: np.ndarray) -> np.ndarray:
    return clf.forward(features)


def classifier_loss(pred: np.ndarray, labels: LabelPair, lam: float,
                    clf: MaskClassifier) -> float:
    return clf.loss(pred, labels, lam)


def lipschitz_penalty(clf: MaskClassifier) -> float:
    return clf.lipschitz_penalty()


def classifier_step(clf: MaskClassifier, features: np.ndarray,
                    labels: LabelPair, lam: float = 0.5) -> float:
    return clf.step(features, labels, lam)
