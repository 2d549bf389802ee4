"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op executed inside an active :class:`Tape` is recorded
together with a closure that maps the output gradient to input gradients.
``backward`` replays the recorded ops in exact reverse execution order.

    >>> with Tape() as tape:
    ...     x = Tensor(np.ones(3), requires_grad=True)
    ...     loss = sum_all(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 2., 2.])
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; ops only record while a tape is active.
    A tape can be replayed once; call :meth:`reset` to reuse it.

    ``kink_margin`` tracks the smallest distance to a non-differentiable
    point seen by relu/maxpool, which gradient checks use to reject
    evaluation points sitting on a kink.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self.kink_margin = np.inf

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        self.ops.clear()
        self.consumed = False
        self.kink_margin = np.inf

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before recording again")
        out.requires_grad = True
        out.tape = self
        self.ops.append((out, tuple(inputs), backward_fn))

    def note_kink(self, margin: float) -> None:
        self.kink_margin = min(self.kink_margin, float(margin))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward called twice on the same tape without reset()")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if not np.all(np.isfinite(loss.data)):
            raise NumericalError("loss is not finite")
        self.consumed = True
        pending = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.ops):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape is self:
                    # intermediate: accumulate until its producer is replayed
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    if loss.tape is None:
        raise TapeError("loss is not on a tape (was it computed inside `with Tape():`?)")
    loss.tape.backward(loss)


def _track(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _track(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _track(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    ad, bd = a.data, b.data
    return _track(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _track(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _track(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _track(out, (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis, row-major."""
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    x = a.data
    tape = active_tape()
    if tape is not None and a.requires_grad and x.size:
        tape.note_kink(np.abs(x).min())
    mask = x > 0
    return _track(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- convolution

def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OCkk weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} with kernel {weight.shape} gives empty output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wdata = weight.data

    def _bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            cols = np.tensordot(g, wdata, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, inputs, _bw)


# ---------------------------------------------------------------- pooling

def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; gradient goes to the first (row-major) argmax of each window."""
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"maxpool2d: window {k} does not fit input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    tape = active_tape()
    if tape is not None and x.requires_grad and k * k > 1:
        top2 = np.sort(flat, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        tape.note_kink(np.nanmin(np.where(np.isfinite(gap), gap, np.inf)))

    def _bw(g):
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                sel = idx == i * k + j
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _track(out, (x,), _bw)


def avgpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, k, stride, 0), _out_extent(w, k, stride, 0)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"avgpool2d: window {k} does not fit input {x.shape}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(4, 5))

    def _bw(g):
        gx = np.zeros(x.shape)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return _track(out, (x,), _bw)


def global_avgpool(x: Tensor) -> Tensor:
    """Average over H and W: N×C×H×W -> N×C."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _track(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- dense

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N×D) @ weight (D×E) + bias (E)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, inputs, _bw)


# ---------------------------------------------------------------- normalization

class RunningStats:
    """Batchnorm running mean/variance buffers."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, mode: str = "train",
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma {gamma.shape}/beta {beta.shape} do not match {c} channels")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var + eps)
        scale = gamma.data * inv
        shift = beta.data - state.mean * scale
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]
        xhat = (x.data - state.mean[None, :, None, None]) * inv[None, :, None, None]

        def _bw_eval(g):
            return (g * scale[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _track(out, (x, gamma, beta), _bw_eval)

    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    m = n * h * w
    if m == 0:
        raise ShapeError("batchnorm2d: empty batch in train mode")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gd + bd

    unbiased = var * m / (m - 1) if m > 1 else var
    state.mean = (1 - momentum) * state.mean + momentum * mu
    state.var = (1 - momentum) * state.var + momentum * unbiased

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return gx, ggamma, gbeta

    return _track(out, (x, gamma, beta), _bw)


# ---------------------------------------------------------------- heads

def _check_logits(z: np.ndarray) -> None:
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"expected N×K logits with K >= 2, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    _check_logits(logits.data)
    p = _softmax_np(logits.data)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _track(p, (logits,), _bw)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    z = logits.data
    _check_logits(z)
    y = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: {len(y)} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), y]
    p = np.exp(shifted - logz[:, None])

    def _bw(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (float(g) / n),)

    return _track(np.array(nll.mean()), (logits,), _bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], mode: str = "train") -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _track(x.data * keep, (x,), lambda g: (g * keep,))
