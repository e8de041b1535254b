"""Minimal Adam with support for growing/shrinking parameter rows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def like(param: np.ndarray) -> "AdamState":
        return AdamState(m=np.zeros_like(param, dtype=np.float64),
                         v=np.zeros_like(param, dtype=np.float64))


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """One in-place Adam step with per-state bias correction."""
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.step)
    vhat = state.v / (1 - beta2 ** state.step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class AdamGroup:
    """Adam moments for a stack of per-splat rows that can be pruned/extended."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def like(param: np.ndarray) -> "AdamGroup":
        return AdamGroup(m=np.zeros_like(param, dtype=np.float64),
                         v=np.zeros_like(param, dtype=np.float64))

    def update(self, param, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        mhat = self.m / (1 - beta1 ** self.step)
        vhat = self.v / (1 - beta2 ** self.step)
        param -= lr * mhat / (np.sqrt(vhat) + eps)

    def keep_rows(self, keep: np.ndarray) -> None:
        self.m = self.m[keep]
        self.v = self.v[keep]

    def extend_rows(self, n_new: int) -> None:
        pad = (n_new,) + self.m.shape[1:]
        self.m = np.concatenate([self.m, np.zeros(pad)])
        self.v = np.concatenate([self.v, np.zeros(pad)])
