"""Image-space robustness tools.

Images are float arrays of shape [3, H, W] with values in [0, 1]. Nothing
here is differentiable; every function is pure and, where random, driven
only by the seed it is given.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "brightness", "contrast", "pixelate")

# one entry per severity 1..5; see docs/corruptions.md
SEVERITY_TABLE = {
    "gaussian_noise": (0.08, 0.12, 0.18, 0.26, 0.38),  # noise std
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photon count scale
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # salt-and-pepper fraction
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # contrast factor
    "pixelate": (2, 3, 4, 5, 6),  # block size in pixels
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; known: {', '.join(CORRUPTIONS)}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        if int(self.seed) < 0:
            raise ValueError("seed must be a non-negative integer")


def read_corruption_manifest(path) -> list[CorruptionSpec]:
    items = json.loads(Path(path).read_text())
    if not isinstance(items, list):
        raise ValueError(f"{path}: corruption manifest must be a JSON array")
    try:
        return [CorruptionSpec(**item) for item in items]
    except TypeError as exc:
        raise ValueError(f"{path}: malformed corruption entry: {exc}") from None


def write_corruption_manifest(path, specs) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in specs], indent=2))


def _block_average(img: np.ndarray, b: int) -> np.ndarray:
    out = img.copy()
    _, h, w = img.shape
    for y in range(0, h, b):
        for x in range(0, w, b):
            blk = img[:, y : y + b, x : x + b]
            flat = blk.reshape(blk.shape[0], -1)
            lo, hi = flat.min(axis=1), flat.max(axis=1)
            # constant blocks keep their exact value, so pixelate is idempotent
            val = np.where(lo == hi, lo, flat.mean(axis=1))
            out[:, y : y + b, x : x + b] = val[:, None, None]
    return out


def corrupt(img: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    p = SEVERITY_TABLE[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        out = img + rng.normal(0.0, p, img.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(img * p) / p
    elif spec.kind == "impulse_noise":
        out = img.copy()
        u = rng.random(img.shape)
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 1.0
    elif spec.kind == "brightness":
        out = img + p
    elif spec.kind == "contrast":
        m = img.mean(axis=(1, 2), keepdims=True)
        out = (img - m) * p + m
    else:
        out = _block_average(img, int(p))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# test-time preprocessing


def haar2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-level orthonormal 2-D Haar transform of an even-sized [H, W] array."""
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    return (a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2


def ihaar2(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape
    x = np.empty((2 * h, 2 * w))
    x[0::2, 0::2] = (ll + lh + hl + hh) / 2
    x[0::2, 1::2] = (ll - lh + hl - hh) / 2
    x[1::2, 0::2] = (ll + lh - hl - hh) / 2
    x[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return x


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def denoise_wavelet(img: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Haar wavelet shrinkage with the universal threshold, per channel.

    The threshold is sigma * sqrt(2 ln N) with sigma = median(|HH|) / 0.6745
    and N the channel's pixel count. Pass ``threshold`` to override it.
    """
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    ph, pw = h % 2, w % 2
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        x = np.pad(img[ch], ((0, ph), (0, pw)), mode="reflect") if ph or pw else img[ch]
        ll, lh, hl, hh = haar2(x)
        if threshold is None:
            sigma = np.median(np.abs(hh)) / 0.6745
            t = sigma * math.sqrt(2.0 * math.log(h * w))
        else:
            t = threshold
        y = ihaar2(ll, soft_threshold(lh, t), soft_threshold(hl, t), soft_threshold(hh, t))
        out[ch] = y[:h, :w]
    return np.clip(out, 0.0, 1.0)


def equalize_hist(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Per-channel histogram equalisation: each level maps to its cumulative frequency."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        level = np.clip(np.round(img[ch] * (bins - 1)), 0, bins - 1).astype(np.int64)
        cdf = np.cumsum(np.bincount(level.ravel(), minlength=bins)) / level.size
        out[ch] = cdf[level]
    return out


def preprocess_test(img: np.ndarray, denoise: bool = True, equalize: bool = True, equalize_first: bool = False):
    out = np.asarray(img, dtype=np.float64)
    steps = [(denoise, denoise_wavelet), (equalize, equalize_hist)]
    if equalize_first:
        steps.reverse()
    for enabled, fn in steps:
        if enabled:
            out = fn(out)
    return out


# ---------------------------------------------------------------------------
# AugMix

AUGMIX_OPS = ("rotate", "translate", "shear", "equalize", "posterize", "solarize", "autocontrast")


@dataclass
class AugMixSpec:
    chain_width: int = 3
    min_depth: int = 1
    max_depth: int = 3
    alpha: float = 1.0  # Dirichlet and Beta concentration
    ops: tuple[str, ...] = field(default=AUGMIX_OPS)
    skip_weight: float | None = None  # force the clean-image blend weight

    def __post_init__(self):
        bad = set(self.ops) - set(AUGMIX_OPS)
        if bad:
            raise ValueError(f"unknown AugMix ops {sorted(bad)}")
        if set(self.ops) & set(CORRUPTIONS):
            raise ValueError("AugMix ops must not overlap the test corruptions")


def _affine(img: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    """Warp each channel with output->input map ``in = M (out - c) + c + shift`` (row, col)."""
    _, h, w = img.shape
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre + np.asarray(shift)
    return np.stack([ndimage.affine_transform(c, matrix, offset=offset, order=1, mode="nearest") for c in img])


def _op(name: str, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if name == "rotate":
        t = math.radians(rng.uniform(-15, 15))
        return _affine(img, np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]))
    if name == "translate":
        if rng.random() < 0.5:
            shift = (rng.uniform(-0.1, 0.1) * h, 0.0)
        else:
            shift = (0.0, rng.uniform(-0.1, 0.1) * w)
        return _affine(img, np.eye(2), shift)
    if name == "shear":
        s = math.tan(math.radians(rng.uniform(-10, 10)))
        m = np.array([[1.0, 0.0], [s, 1.0]]) if rng.random() < 0.5 else np.array([[1.0, s], [0.0, 1.0]])
        return _affine(img, m)
    if name == "equalize":
        return equalize_hist(img)
    if name == "posterize":
        bits = int(rng.integers(4, 8))
        q = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        return ((q >> (8 - bits)) << (8 - bits)) / 255.0
    if name == "solarize":
        t = rng.uniform(0.5, 1.0)
        return np.where(img >= t, 1.0 - img, img)
    if name == "autocontrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, (img - lo) / span, img)
    raise ValueError(f"unknown AugMix op {name!r}")


def augmix(img: np.ndarray, spec: AugMixSpec | None = None, seed=0) -> np.ndarray:
    """Dirichlet-weighted mix of ``chain_width`` random op chains, Beta-blended with the input."""
    spec = spec or AugMixSpec()
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ws = rng.dirichlet([spec.alpha] * spec.chain_width)
    m = rng.beta(spec.alpha, spec.alpha)
    if spec.skip_weight is not None:
        m = spec.skip_weight
    mix = np.zeros_like(img)
    for wi in ws:
        x = img
        for _ in range(int(rng.integers(spec.min_depth, spec.max_depth + 1))):
            x = np.clip(_op(spec.ops[int(rng.integers(len(spec.ops)))], x, rng), 0.0, 1.0)
        mix += wi * x
    if m == 1.0:
        return img.copy()
    return np.clip(m * img + (1.0 - m) * mix, 0.0, 1.0)


def augmix_views(views: np.ndarray, seed, spec: AugMixSpec | None = None) -> np.ndarray:
    """AugMix each image of a [B, 3, H, W] stack with its own derived seed."""
    seq = np.random.SeedSequence(seed)
    seeds = seq.generate_state(len(views), dtype=np.uint64)
    return np.stack([augmix(v, spec, int(s)) for v, s in zip(views, seeds)])
