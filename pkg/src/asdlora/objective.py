"""ArcFace head: additive angular margin softmax over attribute classes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COS_CLAMP = 1e-7


@dataclass
class ArcFaceHead:
    """Class weight matrix ``W`` of shape (d_model, n_classes)."""

    W: np.ndarray
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[1] < 2:
            raise ValueError("ArcFace head needs at least two classes")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")

    @classmethod
    def initialize(cls, d_model: int, n_classes: int, seed: int, scale: float = 30.0,
                   margin: float = 0.5, dtype=np.float64) -> "ArcFaceHead":
        rng = np.random.default_rng([seed, 7919])
        W = rng.standard_normal((d_model, n_classes)) / math.sqrt(d_model)
        return cls(W.astype(dtype), scale, margin)

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]


def _as_batch(x):
    x = np.asarray(x)
    return x[None] if x.ndim == 1 else x


def raw_cosines(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    x = _as_batch(x)
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    wn = np.linalg.norm(W, axis=0, keepdims=True)
    if np.any(xn == 0):
        raise ValueError("zero embedding vector")
    if np.any(wn == 0):
        raise ValueError("zero class weight column")
    return (x @ W) / (xn * wn)


def cosines(x: np.ndarray, head: ArcFaceHead) -> np.ndarray:
    """Clamped cosine similarity to every class column, shape (N, C)."""
    return np.clip(raw_cosines(x, head.W), -1 + COS_CLAMP, 1 - COS_CLAMP)


def _margin_target(c: np.ndarray, m: float):
    """cos(theta + m) with the linear fallback past theta = pi - m; also d/dc."""
    sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    main = c * math.cos(m) - sin_t * math.sin(m)
    fallback = c - m * math.sin(m)
    use_main = c > math.cos(math.pi - m)
    value = np.where(use_main, main, fallback)
    with np.errstate(divide="ignore", invalid="ignore"):
        dmain = math.cos(m) + c * math.sin(m) / sin_t
    deriv = np.where(use_main, dmain, 1.0)
    return value, deriv


def arcface_logits(cos: np.ndarray, y, s: float, m: float) -> np.ndarray:
    cos = _as_batch(cos)
    y = np.atleast_1d(np.asarray(y))
    if np.any((y < 0) | (y >= cos.shape[1])):
        raise ValueError(f"labels outside [0, {cos.shape[1]})")
    rows = np.arange(cos.shape[0])
    logits = s * cos.copy()
    target, _ = _margin_target(cos[rows, y], m)
    logits[rows, y] = s * target
    return logits


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def arcface_loss(x: np.ndarray, y, head: ArcFaceHead) -> float:
    x = _as_batch(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.atleast_1d(np.asarray(y))
    logits = arcface_logits(cosines(x, head), y, head.scale, head.margin)
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def arcface_grad(x: np.ndarray, y, head: ArcFaceHead):
    """Loss and its exact gradients: returns ``(loss, d_x, d_W)``."""
    x = _as_batch(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.atleast_1d(np.asarray(y))
    N = x.shape[0]
    rows = np.arange(N)
    s, m, W = head.scale, head.margin, head.W

    raw = raw_cosines(x, W)
    inside = (raw > -1 + COS_CLAMP) & (raw < 1 - COS_CLAMP)
    cos = np.clip(raw, -1 + COS_CLAMP, 1 - COS_CLAMP)
    target, dtarget = _margin_target(cos[rows, y], m)
    logits = s * cos
    logits[rows, y] = s * target
    logp = _log_softmax(logits)
    loss = float(-logp[rows, y].mean())

    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= N
    dcos = s * dlogits
    dcos[rows, y] *= dtarget
    dcos = dcos * inside

    xn = np.linalg.norm(x, axis=1, keepdims=True)
    wn = np.linalg.norm(W, axis=0, keepdims=True)
    xu, wu = x / xn, W / wn
    # d cos_ij / d x_i = (w_j/|w_j| - cos_ij x_i/|x_i|) / |x_i|
    dx = (dcos @ wu.T - (dcos * raw).sum(axis=1, keepdims=True) * xu) / xn
    # d cos_ij / d W_j = (x_i/|x_i| - cos_ij w_j/|w_j|) / |w_j|
    dW = (xu.T @ dcos - wu * (dcos * raw).sum(axis=0, keepdims=True)) / wn
    return loss, dx, dW


def predict(x: np.ndarray, head: ArcFaceHead) -> np.ndarray:
    return raw_cosines(x, head.W).argmax(axis=1)
