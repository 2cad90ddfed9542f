"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a node on the active :class:`Tape` when at
least one input requires a gradient. :func:`backward` walks the tape in
reverse recording order (which is a topological order by construction) and
accumulates gradients into the ``grad`` field of leaf tensors.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Backward called on a consumed, reset or otherwise unusable tape."""


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def release(self) -> None:
        # Break the tensor <-> node cycles so intermediate arrays are freed
        # immediately instead of waiting for the cyclic collector.
        for nd in self.nodes:
            nd.inputs = ()
            nd.out = None
            nd.backward = None
        self.nodes = []
        self.consumed = True

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("tape", "index", "inputs", "out", "backward")

    def __init__(self, tape, index, inputs, out, backward):
        self.tape = tape
        self.index = index
        self.inputs = inputs
        self.out = out
        self.backward = backward


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def reset_tape() -> Tape:
    """Drop everything recorded so far and start a fresh tape."""
    _state.tape.release()
    _state.tape = Tape()
    return _state.tape


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _state.tape
        out._node = _Node(tape, len(tape.nodes), tuple(inputs), out, backward_fn)
        tape.nodes.append(out._node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The tape is released afterwards; a second call on the same loss raises
    :class:`TapeError`.
    """
    if loss.data.size != 1 or loss.ndim > 1 and any(n != 1 for n in loss.shape):
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = node.tape
    if tape.consumed:
        raise TapeError("tape already consumed or reset; rerun the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(nd.out), None)
        if g is None:
            continue
        for t, gi in zip(nd.inputs, nd.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.release()
    if tape is _state.tape:
        _state.tape = Tape()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    """a / b with the denominator clamped below at ``EPS``."""
    a, b = as_tensor(a), as_tensor(b)
    ad = a.data
    live = b.data > EPS
    bd = np.where(live, b.data, EPS)

    def bw(g):
        ga = unbroadcast(g / bd, ad.shape)
        gb = unbroadcast(np.where(live, -g * ad / (bd * bd), 0.0), bd.shape)
        return ga, gb

    return _record(ad / bd, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def log(a) -> Tensor:
    """Natural log with the input clamped below at ``EPS``."""
    a = as_tensor(a)
    live = a.data > EPS
    ad = np.where(live, a.data, EPS)
    return _record(np.log(ad), (a,), lambda g: (np.where(live, g / ad, 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(np.minimum(a.data, 700.0))
    return _record(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes wherever the value was already inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(ax % ndim if -ndim <= ax < ndim else _bad_axis(ax, ndim) for ax in axis))
    if not axes:
        raise DimensionError("empty reduction set")
    return axes


def _bad_axis(ax: int, ndim: int):
    raise DimensionError(f"axis {ax} out of range for rank {ndim}")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    if a.size == 0:
        raise DimensionError("empty reduction set")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("empty reduction set")
    return tsum(a, axes, keepdims) * (1.0 / count)


def reduce(a, kind: str, axes=None) -> Tensor:
    if kind == "sum":
        return tsum(a, axes)
    if kind == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    # plain slices and boolean masks never repeat an element
    basic = all(
        p is None or p is Ellipsis or isinstance(p, (int, slice))
        or (isinstance(p, np.ndarray) and p.dtype == bool)
        for p in parts
    )

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]}: {exc}") from None
    return _record(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and friends


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (a, gamma, beta), bw)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[N, C, H, W] -> [N*H*W, k*k*C] patches of the zero-padded input, channels innermost."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p : p + h, p : p + w, :] = x.transpose(0, 2, 3, 1)
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # N,H,W,C,k,k
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 same-size cross-correlation with zero padding ``k // 2``.

    ``x``: [N, C, H, W]; ``w``: [O, C, k, k] with odd ``k``; ``b``: [O].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {w.shape}")
    cols = _im2col(x.data, k)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        # input gradient is a correlation with the flipped, channel-swapped kernel
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
        gx = (_im2col(g, k) @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bw)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear weights, align-corners=false, source index clamped at 0."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def resample_bilinear(x, scale: float | None = None, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resize of [N, C, H, W] by ``scale`` or to an explicit ``size``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"resample expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        size = (int(round(scale * h)), int(round(scale * w)))
    ho, wo = size
    if ho < 1 or wo < 1:
        raise DimensionError(f"resample output {size} is empty")
    if (ho, wo) == (h, w):
        return _record(x.data.copy(), (x,), lambda g: (g,))
    rh = interp_matrix(h, ho)
    rw = interp_matrix(w, wo)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return _record(out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    samples: int | None = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps the input tensor(s) to a scalar tensor. Up to ``samples``
    coordinates are drawn across all inputs (all of them if ``samples`` is
    None). Error per coordinate is |analytic - numeric| / (|analytic| + 1e-10).
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    reset_tape()
    loss = f(*leaves)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    coords = [(i, j) for i, t in enumerate(leaves) for j in range(t.size)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[p] for p in pick]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = leaves[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            up = f(*leaves).item()
            flat[j] = orig - h
            down = f(*leaves).item()
            flat[j] = orig
            num = (up - down) / (2 * h)
            ana = analytic[i].reshape(-1)[j]
            worst = max(worst, abs(ana - num) / (abs(ana) + 1e-10))
    return worst
