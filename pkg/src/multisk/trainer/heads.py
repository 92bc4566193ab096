"""Gated-linear projection heads and anchor initialisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..losses import AnchorSet, ZeroNormError

PARAMETER_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class HeadCache:
    x: np.ndarray
    h: np.ndarray
    gate: np.ndarray
    norms: np.ndarray
    out: np.ndarray


@dataclass(eq=False)
class ProjectionHead:
    """
    One gated linear layer followed by L2 normalisation.

        h = x W1 + b1;  g = sigmoid(h W2 + b2);  out = (h * g) / |h * g|
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> ProjectionHead:
        return cls(
            w1=rng.standard_normal((d_in, d_out)) / np.sqrt(d_in),
            b1=np.zeros(d_out),
            w2=rng.standard_normal((d_out, d_out)) / np.sqrt(d_out),
            b2=np.zeros(d_out),
        )

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, HeadCache]:
        x = np.asarray(x, dtype=np.float64)
        h = x @ self.w1 + self.b1
        gate = expit(h @ self.w2 + self.b2)
        y = h * gate
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ZeroNormError("Projection produced a zero vector")
        out = y / norms
        return out, HeadCache(x, h, gate, norms, out)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: HeadCache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given dL/d(out)."""
        out = cache.out
        grad_y = (grad_out - out * np.sum(grad_out * out, axis=1, keepdims=True)) / cache.norms
        grad_u = grad_y * cache.h * cache.gate * (1.0 - cache.gate)
        grad_h = grad_y * cache.gate + grad_u @ self.w2.T
        return {
            "w1": cache.x.T @ grad_h,
            "b1": grad_h.sum(axis=0),
            "w2": cache.h.T @ grad_u,
            "b2": grad_u.sum(axis=0),
        }


def init_anchor_set(
    n_anchors: int, dim: int, modality: str, space: str, rng: np.random.Generator
) -> AnchorSet:
    """Unit-norm Gaussian anchors."""
    vectors = rng.standard_normal((n_anchors, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return AnchorSet(vectors, modality, space)
