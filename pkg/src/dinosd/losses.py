"""Training losses: scale-invariant log, edge-aware smoothness, three-way JS consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import EPS, DimensionError, Tensor


@dataclass
class LossWeights:
    lambda_silog: float = 0.85
    alpha_smooth: float = 1e-3
    beta_augmix: float = 1e-2

    def __post_init__(self):
        for name in ("lambda_silog", "alpha_smooth", "beta_augmix"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class SparseDepthTarget:
    gt: np.ndarray  # [B, 1, H, W] metres
    valid: np.ndarray  # bool, same shape

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.gt.shape != self.valid.shape:
            raise DimensionError(f"gt {self.gt.shape} and mask {self.valid.shape} differ")
        if np.any(self.gt[self.valid] <= 0):
            raise ValueError("ground truth must be positive wherever valid")


def silog_loss(pred: Tensor, target: SparseDepthTarget, lam: float = 0.85) -> Tensor:
    """(1/n) sum d^2 - (lam/n^2)(sum d)^2 with d = log pred - log gt over valid pixels.

    n counts valid pixels over the whole batch.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if pred.shape != target.gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.gt.shape}")
    mask = target.valid
    n = int(mask.sum())
    if n == 0:
        raise ValueError("silog_loss: no valid pixels in target mask")
    d = T.log(pred[mask]) - np.log(target.gt[mask])
    s = d.sum()
    return T.square(d).sum() * (1.0 / n) - T.square(s) * (lam / (n * n))


def _gray(image) -> Tensor:
    image = T.as_tensor(image)
    return image.mean(axis=-3, keepdims=True)


def smooth_loss(depth: Tensor, image) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalised depth.

    ``depth`` is [B, 1, H, W]; ``image`` is [B, 3, H, W]. The x and y terms
    are each averaged over their difference maps and then added.
    """
    gray = _gray(image)
    norm = depth / depth.mean(axis=(2, 3), keepdims=True)
    dx = norm[:, :, :, 1:] - norm[:, :, :, :-1]
    dy = norm[:, :, 1:, :] - norm[:, :, :-1, :]
    gx = np.abs(gray.data[:, :, :, 1:] - gray.data[:, :, :, :-1])
    gy = np.abs(gray.data[:, :, 1:, :] - gray.data[:, :, :-1, :])
    terms = []
    if dx.size:
        terms.append((T.tabs(dx) * np.exp(-gx)).mean())
    if dy.size:
        terms.append((T.tabs(dy) * np.exp(-gy)).mean())
    if not terms:
        raise DimensionError(f"smooth_loss needs at least 2 pixels, got {depth.shape}")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def _kl(p: Tensor, m: Tensor, axis) -> Tensor:
    return (p * (T.log(p) - T.log(m))).sum(axis=axis)


def js_divergence3(p: Tensor, q: Tensor, r: Tensor, axis=-1) -> Tensor:
    """Mean KL of three distributions to their average, along ``axis``.

    Zero-probability entries contribute exactly zero.
    """
    # written as an offset from p so identical inputs give a mixture equal to p bit for bit
    mix = p + (q - p) * (1.0 / 3.0) + (r - p) * (1.0 / 3.0)
    return (_kl(p, mix, axis) + _kl(q, mix, axis) + _kl(r, mix, axis)) * (1.0 / 3.0)


def pixel_distribution(depth: Tensor) -> Tensor:
    """Normalise each [H, W] map of a [B, 1, H, W] batch into a distribution over pixels."""
    b = depth.shape[0]
    flat = depth.reshape(b, -1)
    p = flat / flat.sum(axis=1, keepdims=True)
    floored = p.data < EPS
    if floored.any():
        p = p + Tensor(np.where(floored, EPS - p.data, 0.0))
        p = p / p.sum(axis=1, keepdims=True)
    return p


def augmix_js_loss(d_s: Tensor, d_a1: Tensor, d_a2: Tensor) -> Tensor:
    """Jensen-Shannon consistency between clean and two augmented depth maps, averaged over views."""
    if not d_s.shape == d_a1.shape == d_a2.shape:
        raise DimensionError(f"shape mismatch: {d_s.shape}, {d_a1.shape}, {d_a2.shape}")
    for name, d in (("clean", d_s), ("aug1", d_a1), ("aug2", d_a2)):
        if np.any(d.data <= 0):
            raise ValueError(f"augmix_js_loss: {name} depth map has non-positive values")
    ps = [pixel_distribution(d) for d in (d_s, d_a1, d_a2)]
    return js_divergence3(*ps, axis=1).mean()


def total_loss(
    pred_clean: Tensor,
    pred_aug1: Tensor | None,
    pred_aug2: Tensor | None,
    target: SparseDepthTarget,
    image_clean,
    w: LossWeights | None = None,
    supervise_augmented: bool = False,
) -> Tensor:
    """silog + alpha * smooth + beta * JS, supervised on the clean prediction.

    Pass ``None`` for the augmented predictions to skip the consistency term
    (only allowed when ``beta_augmix`` is 0).
    """
    w = w or LossWeights()
    loss = silog_loss(pred_clean, target, w.lambda_silog)
    if w.alpha_smooth:
        loss = loss + smooth_loss(pred_clean, image_clean) * w.alpha_smooth
    if pred_aug1 is None or pred_aug2 is None:
        if w.beta_augmix:
            raise ValueError("augmented predictions are required when beta_augmix > 0")
        return loss
    if w.beta_augmix:
        loss = loss + augmix_js_loss(pred_clean, pred_aug1, pred_aug2) * w.beta_augmix
    if supervise_augmented:
        loss = loss + silog_loss(pred_aug1, target, w.lambda_silog) + silog_loss(pred_aug2, target, w.lambda_silog)
    return loss
