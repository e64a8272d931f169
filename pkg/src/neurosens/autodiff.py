"""Dense float64 tensors with a reverse-mode gradient tape.

Only the primitives needed by small convolutional classifiers, gradient
attacks and the sensitivity losses are provided. Layout is row-major with
NCHW ordering for image activations. Broadcasting is limited to
scalar-tensor operations; everything else must match shapes exactly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-dimensional array of float64 values."""

    __slots__ = ("_data",)

    def __init__(self, data, *, _trusted: bool = False):
        if _trusted:
            arr = np.asarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)})"

    # operator sugar for the common arithmetic primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, scalar):
        return mul_scalar(self, scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Records primitive operations touching watched tensors.

    A tape belongs to the thread that entered it and can be differentiated
    exactly once::

        with Tape() as tape:
            tape.watch(x)
            loss = f(x)
        (gx,) = tape.gradient(loss, [x])
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []
        self._consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("only Tensor objects can be watched")
            self._tracked.add(id(t))
            self._keep.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, inputs: tuple, output: Tensor, vjp: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        if any(id(t) in self._tracked for t in inputs):
            self._nodes.append(_Node(inputs, output, vjp))
            self._tracked.add(id(output))

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(target) for every target, in order."""
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {list(loss.shape)}")
        for t in wrt:
            if id(t) not in self._tracked:
                raise TapeError(f"target {t!r} is not on the tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or id(t) not in self._tracked:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._nodes.clear()
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


def backward(loss: Tensor, wrt: Sequence[Tensor], tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Gradient map keyed by target position; uses the active tape by default."""
    tape = tape or _active_tape()
    if tape is None:
        raise TapeError("no active tape")
    return dict(enumerate(tape.gradient(loss, wrt)))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("non-finite operand")


def _emit(out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    t = Tensor(out, _trusted=True)
    tape = _active_tape()
    if tape is not None:
        tape._record(inputs, t, vjp)
    return t


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    _check_finite(np.asarray(c))
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    if bias.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {list(x.shape)} and {list(bias.shape)}")
    if x.data.ndim == 2:
        out = x.data + bias.data
        axes = (0,)
    else:
        out = x.data + bias.data[None, :, None, None]
        axes = (0, 2, 3)
    return _emit(out, (x, bias), lambda g: (g, g.sum(axis=axes)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)]"""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need a batch dimension, got {list(x.shape)}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Stack two batches along axis 0."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    n = a.shape[0]
    return _emit(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:]))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sign(x: Tensor) -> Tensor:
    return _emit(np.sign(x.data), (x,), lambda g: (np.zeros_like(g),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def channel_scale(x: Tensor, multipliers) -> Tensor:
    """Multiply channel ``c`` (axis 1) by ``multipliers[c]``; multipliers are constants."""
    m = np.asarray(multipliers, dtype=np.float64)
    if x.data.ndim < 2 or m.shape != (x.shape[1],):
        raise ShapeError(f"channel_scale: {list(m.shape)} multipliers for input {list(x.shape)}")
    _check_finite(m)
    m = m.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    return _emit(x.data * m, (x,), lambda g: (g * m,))


def take_channels(x: Tensor, channels: Sequence[int]) -> Tensor:
    """Select channels (axis 1) in the given order."""
    idx = np.asarray(channels, dtype=np.intp)
    if x.data.ndim < 2 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[1])):
        raise ShapeError(f"take_channels: indices {list(idx)} out of range for {list(x.shape)}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _emit(x.data[:, idx], (x,), vjp)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """sum |a - b|"""
    _same_shape("l1_distance", a, b)
    diff = a.data - b.data
    s = np.sign(diff)
    return _emit(np.asarray(np.abs(diff).sum()), (a, b), lambda g: (g * s, -g * s))


def l2_norm_squared(a: Tensor) -> Tensor:
    A = a.data
    return _emit(np.asarray((A * A).sum()), (a,), lambda g: (2.0 * g * A,))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    ``logits`` is [B, C] with integer labels [B], or [C] with one label.
    """
    z = logits.data
    lab = np.asarray(labels, dtype=np.intp)
    single = z.ndim == 1
    if single:
        z = z[None, :]
        lab = lab.reshape(1)
    if z.ndim != 2 or lab.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {list(logits.shape)} vs labels {list(lab.shape)}")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: label out of range for {z.shape[1]} classes")
    n = z.shape[0]
    lsm = log_softmax(z)
    loss = -lsm[np.arange(n), lab].mean()

    def vjp(g):
        p = np.exp(lsm)
        p[np.arange(n), lab] -= 1.0
        p *= float(g) / n
        return (p[0] if single else p,)

    return _emit(np.asarray(loss), (logits,), vjp)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with w [O,C,kh,kw] plus optional bias [O]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {list(b.shape)} for weight {list(w.shape)}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {list(x.shape)} with pad {pad}")
    xp = _pad(x.data, pad)
    sB, sC, sH, sW = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, C, kh, kw), (sB, sH * stride, sW * stride, sC, sH, sW), writeable=False
    ).reshape(B * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    tape = _active_tape()
    need_x = tape is not None and tape.is_tracked(x)
    need_w = tape is not None and tape.is_tracked(w)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            gcols = (gm @ wm).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(out, inputs, vjp)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the lowest linear index."""
    if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"maxpool2d: input {list(x.shape)} not divisible by window {k}")
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    win = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)  # first maximal element
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((B, C, Ho, Wo, k * k))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C]"""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {list(x.shape)}")
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)
    return _emit(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] * scale, (B, C, H, W)).copy(),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_scalar": mul_scalar,
    "matmul": matmul,
    "bias_add": bias_add,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "global_avg_pool": global_avg_pool,
    "flatten": flatten,
    "reshape": reshape,
    "concat": concat,
    "sum": sum_all,
    "softmax_cross_entropy": softmax_cross_entropy,
    "l1_distance": l1_distance,
    "l2_norm_squared": l2_norm_squared,
    "clamp": clamp,
    "sign": sign,
    "channel_scale": channel_scale,
    "take_channels": take_channels,
}


def tensor_op(kind: str, *operands, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``tensor_op("conv2d", x, w, b, stride=1, pad=1)``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*operands, **params)


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-4,
               tolerance: float | None = None) -> float:
    """Compare tape gradients with central differences.

    Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|). When
    ``tolerance`` is given, an AssertionError is raised if it is exceeded.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    _check_finite(x0)
    x = Tensor(x0)
    with Tape() as tape:
        tape.watch(x)
        y = function(x)
    (analytic,) = tape.gradient(y, [x])
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = function(Tensor(x0)).item()
        flat[i] = orig - step
        fm = function(Tensor(x0)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * step)
    _check_finite(analytic, numeric)
    a = analytic.reshape(-1)
    err = float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
    if tolerance is not None and err > tolerance:
        raise AssertionError(f"gradient check failed: relative error {err:.3e} > {tolerance:.3e}")
    return err
