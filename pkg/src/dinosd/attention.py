"""Attention over the six-camera ring.

Views are carried as one stacked tensor of shape [N, 6, T, C] (scene batch,
ring position, patch tokens, channels). Ring position k is physically next
to k-1 and k+1 modulo 6. Tokens are row vectors, so projections are
``tokens @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

NUM_VIEWS = 6
MODES = ("none", "self", "adjacent")


def ring_neighbors(i: int) -> tuple[int, int]:
    if not 0 <= i < NUM_VIEWS:
        raise IndexError(f"view index {i} outside 0..{NUM_VIEWS - 1}")
    return (i - 1) % NUM_VIEWS, (i + 1) % NUM_VIEWS


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    head_count: int = 2

    def __post_init__(self):
        c = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (c, c):
                raise DimensionError(f"projection weights must be square {c}x{c}, got {w.shape}")
        if self.head_count < 1 or c % self.head_count:
            raise ValueError(f"head_count {self.head_count} must divide channel dim {c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, channels: int, head_count: int = 2, rng=None, std: float = 0.02):
        rng = rng or np.random.default_rng(0)

        def w():
            return Tensor(_trunc_normal(rng, (channels, channels), std), requires_grad=True)

        return cls(w(), w(), w(), head_count)

    @classmethod
    def identity(cls, channels: int, head_count: int = 1):
        eye = np.eye(channels)
        return cls(Tensor(eye), Tensor(eye.copy()), Tensor(eye.copy()), head_count)

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def scaled_dot_product(q_tokens: Tensor, kv_tokens: Tensor, p: AttentionParams, record=None) -> Tensor:
    """Multi-head softmax(Q K^T / sqrt(C/h)) V for [B, Tq, C] queries over [B, Tk, C] keys."""
    b, tq, c = q_tokens.shape
    tk = kv_tokens.shape[1]
    if c != p.channels or kv_tokens.shape[2] != c:
        raise DimensionError(f"token channels {q_tokens.shape}/{kv_tokens.shape} vs params C={p.channels}")
    h = p.head_count
    d = c // h

    def heads(x: Tensor, n: int) -> Tensor:
        return x.reshape(b, n, h, d).transpose(0, 2, 1, 3)

    q = heads(q_tokens @ p.w_q, tq)
    k = heads(kv_tokens @ p.w_k, tk)
    v = heads(kv_tokens @ p.w_v, tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    if record is not None:
        record["score_shape"] = scores.shape
        record["score_elements"] = scores.size
    attn = T.softmax(scores, axis=-1)
    return (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, c)


def _check_views(views: Tensor) -> tuple[int, int, int, int]:
    if views.ndim != 4 or views.shape[1] != NUM_VIEWS:
        raise DimensionError(f"expected view stack [N, 6, T, C], got {views.shape}")
    return views.shape


def stack_views(views) -> Tensor:
    """Turn a list of six [N, T, C] tensors into one [N, 6, T, C] stack."""
    views = list(views)
    if len(views) != NUM_VIEWS:
        raise DimensionError(f"expected {NUM_VIEWS} views, got {len(views)}")
    first = views[0].shape
    for i, v in enumerate(views):
        if v.shape != first:
            raise DimensionError(f"view {i} has shape {v.shape}, view 0 has {first}")
    n, t, c = first
    return T.concat([T.as_tensor(v).reshape(n, 1, t, c) for v in views], axis=1)


def unstack_views(stack: Tensor) -> list[Tensor]:
    return [stack[:, i] for i in range(NUM_VIEWS)]


def _apply(fn, views, p, residual, record):
    as_list = not isinstance(views, Tensor)
    stack = stack_views(views) if as_list else views
    out = fn(stack, p, residual, record)
    return unstack_views(out) if as_list else out


def _self(stack: Tensor, p: AttentionParams, residual: bool, record) -> Tensor:
    n, v, t, c = _check_views(stack)
    flat = stack.reshape(n, v * t, c)
    att = scaled_dot_product(flat, flat, p, record).reshape(n, v, t, c)
    return stack + att if residual else att


def _adjacent(stack: Tensor, p: AttentionParams, residual: bool, record) -> Tensor:
    n, v, t, c = _check_views(stack)
    prev = T.concat([stack[:, v - 1 :], stack[:, : v - 1]], axis=1)
    nxt = T.concat([stack[:, 1:], stack[:, :1]], axis=1)
    kv = T.concat([prev, nxt], axis=2).reshape(n * v, 2 * t, c)
    q = stack.reshape(n * v, t, c)
    att = scaled_dot_product(q, kv, p, record).reshape(n, v, t, c)
    return stack + att if residual else att


def cross_view_self_attention(views, p: AttentionParams, residual: bool = True, record=None):
    """All 6T tokens of a scene attend jointly to each other."""
    return _apply(_self, views, p, residual, record)


def adjacent_view_cross_attention(views, p: AttentionParams, residual: bool = True, record=None):
    """Each view's tokens attend to the 2T tokens of its two ring neighbours."""
    return _apply(_adjacent, views, p, residual, record)


def multiview_attention(stack: Tensor, mode: str, p: AttentionParams | None, residual: bool = True):
    if mode == "none":
        return stack
    if mode == "self":
        return _self(stack, p, residual, None)
    if mode == "adjacent":
        return _adjacent(stack, p, residual, None)
    raise ValueError(f"unknown attention mode {mode!r}; expected one of {MODES}")
