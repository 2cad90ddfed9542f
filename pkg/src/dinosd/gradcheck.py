"""Finite-difference checks for every differentiable op, the attention blocks and the losses.

Each registered case builds a scalar function and its inputs from a random
generator. Vector-valued ops are reduced with a fixed random projection so
every output coordinate contributes to the checked gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, adjacent_view_cross_attention, cross_view_self_attention, scaled_dot_product
from .losses import LossWeights, SparseDepthTarget, augmix_js_loss, js_divergence3, silog_loss, smooth_loss, total_loss
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
REGISTRY: dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = fn
        return fn

    return deco


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} trials={self.trials:<3} max_rel_err={self.max_error:.2e} ({self.seconds:.2f}s)"


def _projected(fn: Callable[..., Tensor], out_shape, rng: np.random.Generator) -> Callable[..., Tensor]:
    proj = rng.normal(size=out_shape)
    return lambda *xs: (fn(*xs) * proj).sum()


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, shape)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _unary(fn, sampler):
    def build(rng):
        x = sampler(rng, (3, 4))
        return _projected(fn, x.shape, rng), [_t(x)]

    return build


def _binary(fn, sample_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = sample_b(rng, (4,)) if sample_b else rng.normal(size=(4,))
        return _projected(fn, (3, 4), rng), [_t(a), _t(b)]

    return build


_normal = lambda rng, shape: rng.normal(size=shape)  # noqa: E731

register("add")(_binary(T.add))
register("sub")(_binary(T.sub))
register("mul")(_binary(T.mul))
# div clamps its denominator below at EPS, so it is only checked on positive ones
register("div")(_binary(T.div, lambda rng, s: rng.uniform(0.5, 2.0, s)))
register("neg")(_unary(T.neg, _normal))
register("square")(_unary(T.square, _normal))
register("log")(_unary(T.log, lambda rng, s: rng.uniform(0.2, 3.0, s)))
register("exp")(_unary(T.exp, _normal))
register("sigmoid")(_unary(T.sigmoid, lambda rng, s: rng.normal(size=s) * 3))
register("relu")(_unary(T.relu, _away_from_zero))
register("abs")(_unary(T.tabs, _away_from_zero))
register("gelu")(_unary(T.gelu, lambda rng, s: rng.normal(size=s) * 2))


@register("clamp")
def _clamp(rng):
    x = rng.uniform(-1.0, 1.0, (3, 4))
    x[np.abs(np.abs(x) - 0.5) < 0.01] = 0.25  # keep clear of the clip points
    return _projected(lambda a: T.clamp(a, -0.5, 0.5), x.shape, rng), [_t(x)]


@register("sum")
def _sum(rng):
    x = rng.normal(size=(2, 3, 4))
    return _projected(lambda a: T.tsum(a, axis=(0, 2), keepdims=True), (1, 3, 1), rng), [_t(x)]


@register("mean")
def _mean(rng):
    x = rng.normal(size=(2, 3, 4))
    return _projected(lambda a: T.mean(a, axis=1), (2, 4), rng), [_t(x)]


@register("reshape_transpose")
def _reshape(rng):
    x = rng.normal(size=(2, 3, 4))
    return _projected(lambda a: a.reshape(4, 6).transpose(1, 0), (6, 4), rng), [_t(x)]


@register("getitem")
def _getitem(rng):
    x = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) < 0.5
    mask[0, 0] = True
    rows = np.array([0, 2, 2, 3])  # repeated index accumulates

    def f(a):
        return (a[1:, ::2] * 1.5).sum() + (T.square(a[mask])).sum() + (a[rows] * a[rows]).sum()

    return f, [_t(x)]


@register("concat")
def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
    return _projected(lambda x, y: T.concat([x, y], axis=1), (2, 8), rng), [_t(a), _t(b)]


@register("matmul")
def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    return _projected(T.matmul, (2, 3, 5), rng), [_t(a), _t(b)]


@register("softmax")
def _softmax(rng):
    x = rng.normal(size=(3, 5)) * 2
    return _projected(lambda a: T.softmax(a, axis=-1), x.shape, rng), [_t(x)]


@register("layer_norm")
def _layer_norm(rng):
    x = rng.normal(size=(2, 3, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    return _projected(T.layer_norm, x.shape, rng), [_t(x), _t(g), _t(b)]


@register("conv2d")
def _conv(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)) * 0.3, rng.normal(size=4)
    return _projected(T.conv2d, (2, 4, 5, 6), rng), [_t(x), _t(w), _t(b)]


@register("resample_up")
def _up(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    return _projected(lambda a: T.resample_bilinear(a, 2.0), (1, 2, 6, 8), rng), [_t(x)]


@register("resample_down")
def _down(rng):
    x = rng.normal(size=(1, 2, 6, 8))
    return _projected(lambda a: T.resample_bilinear(a, 0.5), (1, 2, 3, 4), rng), [_t(x)]


@register("resample_size")
def _resize(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    return _projected(lambda a: T.resample_bilinear(a, size=(7, 5)), (1, 2, 7, 5), rng), [_t(x)]


def _attn_inputs(rng, shape):
    c = shape[-1]
    return [_t(rng.normal(size=shape))] + [_t(rng.normal(size=(c, c)) * 0.5) for _ in range(3)]


@register("scaled_dot_product")
def _sdp(rng):
    xs = _attn_inputs(rng, (2, 3, 4))
    kv = _t(rng.normal(size=(2, 5, 4)))
    f = lambda q, wq, wk, wv, kv: scaled_dot_product(q, kv, AttentionParams(wq, wk, wv, 2))  # noqa: E731
    return _projected(f, (2, 3, 4), rng), xs + [kv]


@register("cross_view_self_attention")
def _self_attn(rng):
    xs = _attn_inputs(rng, (1, 6, 2, 4))
    f = lambda x, wq, wk, wv: cross_view_self_attention(x, AttentionParams(wq, wk, wv, 2))  # noqa: E731
    return _projected(f, (1, 6, 2, 4), rng), xs


@register("adjacent_view_attention")
def _adj_attn(rng):
    xs = _attn_inputs(rng, (1, 6, 2, 4))
    f = lambda x, wq, wk, wv: adjacent_view_cross_attention(x, AttentionParams(wq, wk, wv, 2))  # noqa: E731
    return _projected(f, (1, 6, 2, 4), rng), xs


def _depth_case(rng, shape=(6, 1, 4, 5), d_max=50.0):
    gt = rng.uniform(1.0, d_max, shape)
    valid = rng.random(shape) < 0.4
    valid.flat[0] = True
    pred = gt * np.exp(rng.normal(0, 0.3, shape))
    image = rng.random((shape[0], 3) + shape[2:])
    return pred, SparseDepthTarget(gt, valid), image


@register("silog_loss")
def _silog(rng):
    pred, tgt, _ = _depth_case(rng)
    return (lambda p: silog_loss(p, tgt, 0.85)), [_t(pred)]


@register("smooth_loss")
def _smooth(rng):
    pred, _, image = _depth_case(rng)
    return (lambda p: smooth_loss(p, image)), [_t(pred)]


@register("js_divergence3")
def _js3(rng):
    ps = [rng.dirichlet(np.ones(6), size=2) for _ in range(3)]
    return _projected(js_divergence3, (2,), rng), [_t(p) for p in ps]


@register("augmix_js_loss")
def _js(rng):
    pred, _, _ = _depth_case(rng)
    augs = [pred * rng.uniform(0.7, 1.3, pred.shape) for _ in range(2)]
    return augmix_js_loss, [_t(pred)] + [_t(a) for a in augs]


@register("total_loss")
def _total(rng):
    # With the training weights the augmented maps only see beta = 1e-2 times a
    # gradient of order 1 / sum(depth), about 1e-9 here, which is below what a
    # central difference can resolve. Unit-scale weights and depths keep every
    # term measurable; the default weights are exercised by the model-level check.
    pred, tgt, image = _depth_case(rng, d_max=4.0)
    augs = [pred * rng.uniform(0.7, 1.3, pred.shape) for _ in range(2)]
    w = LossWeights(lambda_silog=0.85, alpha_smooth=0.5, beta_augmix=1.0)
    return (lambda p, a, b: total_loss(p, a, b, tgt, image, w)), [_t(pred)] + [_t(a) for a in augs]


def run_case(name: str, trials: int = 10, samples: int = 20, seed: int = 0, tol: float = TOLERANCE) -> CheckResult:
    """Run one registered case on ``trials`` independently drawn inputs."""
    build = REGISTRY[name]
    start = time.perf_counter()
    worst = 0.0
    for k in range(trials):
        rng = np.random.default_rng([seed, k, len(name)])
        f, inputs = build(rng)
        worst = max(worst, finite_diff_check(f, inputs, samples=samples, rng=rng))
    T.reset_tape()
    return CheckResult(name, trials, worst, time.perf_counter() - start, tol)


def run_all(trials: int = 10, samples: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    return [run_case(n, trials, samples, seed) for n in (names or REGISTRY)]


def model_loss_check(coords: int = 20, seed: int = 0, tol: float = TOLERANCE) -> CheckResult:
    """Gradient of the full training loss w.r.t. model parameters on one 6-view 32x48 scene.

    The loss includes both AugMix forwards, the consistency term and the smoothness term.
    """
    from .augment import augmix_views
    from .data import SceneConfig, make_batch
    from .model import DinoSD, EncoderConfig, ModelConfig

    start = time.perf_counter()
    batch = make_batch(seed, SceneConfig(height=32, view_width=48))
    model = DinoSD(ModelConfig(encoder=EncoderConfig(height=32, width=48), seed=seed))
    images = batch.images
    a1, a2 = augmix_views(images, [seed, 1]), augmix_views(images, [seed, 2])
    stacked = np.concatenate([images, a1, a2])
    names = list(model.params)
    w = LossWeights()

    def f(*params):
        model.params = dict(zip(names, params))
        pred = model(stacked)
        return total_loss(pred[:6], pred[6:12], pred[12:], batch.target, images, w)

    original = model.params
    try:
        err = finite_diff_check(f, [original[n] for n in names], samples=coords, rng=np.random.default_rng(seed))
    finally:
        model.params = original
        T.reset_tape()
    return CheckResult("dinosd_total_loss", coords, err, time.perf_counter() - start, tol)
