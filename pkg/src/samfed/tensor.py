"""Dense float32 arrays with tape-based reverse-mode differentiation.

Only the handful of operations needed to train small per-pixel segmentation
networks are provided. Every op checks its inputs' shapes explicitly; there is
no implicit broadcasting except against python scalars.

Recording happens on the tape that is active in the *current thread*, so
independent models can be trained concurrently from different threads::

    with Tape() as tape:
        loss = mean(mul(x, x))
    backward(tape, loss)
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFinite, NonScalarLoss, ShapeMismatch, TapeReuse

DTYPE = np.float32
LOG_FLOOR = 1e-12

_local = threading.local()


def _dt():
    return getattr(_local, "dtype", DTYPE)


class precision:
    """Run ops in another float type in this thread (float64 for FD oracles)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._prev = _dt()
        _local.dtype = self.dtype

    def __exit__(self, *exc):
        _local.dtype = self._prev


class Tensor:
    """An n-d float32 array that may take part in gradient recording.

    ``data`` is a C-contiguous numpy array (row-major flat buffer + shape).
    Leaf tensors created with ``requires_grad=True`` are parameters; their
    gradient lands in ``grad`` after :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_dt())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def sgd_update(self, step: np.ndarray) -> None:
        """The one sanctioned in-place mutation: ``data -= step``."""
        if step.shape != self.data.shape:
            raise ShapeMismatch(f"update {step.shape} vs param {self.data.shape}")
        self.data -= step.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: Tensor, inputs: tuple, rule: Callable):
        self.out = out
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of differentiable ops, consumed once by :func:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.frozen = False
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        if self.frozen:
            raise TapeReuse("tape already consumed by backward")
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None


def active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


class no_grad:
    """Suspend recording in the current thread."""

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape_id is not None


def _all_finite(a: np.ndarray) -> bool:
    # NaN/Inf propagate through a sum; only a non-finite total (or an overflowing
    # one) needs the full scan
    return bool(np.isfinite(a.sum())) or bool(np.isfinite(a).all())


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if not _all_finite(out_data):
        raise NonFinite(f"{op} produced NaN/Inf")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or not any(_tracked(t) for t in inputs):
        return out
    if tape.frozen:
        raise TapeReuse("cannot record on a consumed tape")
    out.tape_id = len(tape.nodes)
    tape.nodes.append(_Node(out, tuple(inputs), rule))
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every parameter reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers. The tape is frozen
    afterwards; calling again raises :class:`TapeReuse`.
    """
    if tape.frozen:
        raise TapeReuse("backward already ran on this tape")
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape.frozen = True
    if loss.tape_id is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.rule(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not _tracked(t):
                continue
            if t.tape_id is None:
                # leaf parameter
                t.grad = gi.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = _dt()(s)
    return _finish(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.maximum(a.data, _dt()(0)), (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs floored at ``floor``; zero gradient where floored."""
    x = a.data
    clipped = x < floor
    safe = np.where(clipped, _dt()(floor), x)
    return _finish(np.log(safe), (a,), lambda g: (np.where(clipped, _dt()(0), g / safe),), "log")


# -- reductions / shape ----------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=_dt()).reshape(())
    return _finish(out, (a,), lambda g: (np.full(shape, g, dtype=_dt()),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=_dt()).reshape(())
    return _finish(out, (a,), lambda g: (np.full(shape, g / _dt()(n), dtype=_dt()),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _finish(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-d tensor")
    return _finish(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _finish(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]), "concat")


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """'Same' zero-padded, stride-1 convolution (cross-correlation).

    ``x`` is ``[H,W,Cin]`` or batched ``[B,H,W,Cin]``; ``kernel`` is
    ``[kh,kw,Cin,Cout]`` with odd kh, kw; ``bias`` is ``[Cout]``. Computed as a
    fixed-order sum of one matmul per kernel tap.
    """
    if kernel.data.ndim != 4:
        raise ShapeMismatch(f"kernel must be 4-d, got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("kernel spatial dims must be odd")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[-1] != cin:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape}, expected ({cout},)")
    B, H, W, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    kd = kernel.data
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd
    out = np.zeros((B, H, W, cout), dtype=_dt())
    for dy in range(kh):
        for dx in range(kw):
            out += xp[:, dy:dy + H, dx:dx + W, :] @ kd[dy, dx]
    if bias is not None:
        out += bias.data
    if unbatched:
        out = out[0]

    def rule(g):
        g4 = g[None] if unbatched else g
        g2 = g4.reshape(B * H * W, cout)
        gk = gx = gb = None
        if _tracked(kernel):
            gk = np.empty(kd.shape, dtype=_dt())
            for dy in range(kh):
                for dx in range(kw):
                    win = np.ascontiguousarray(xp[:, dy:dy + H, dx:dx + W, :]).reshape(-1, cin)
                    gk[dy, dx] = win.T @ g2
        if _tracked(x):
            gp = np.zeros(xp.shape, dtype=_dt())
            for dy in range(kh):
                for dx in range(kw):
                    gp[:, dy:dy + H, dx:dx + W, :] += g4 @ kd[dy, dx].T
            gx = gp[:, ph:ph + H, pw:pw + W, :]
            gx = gx[0] if unbatched else np.ascontiguousarray(gx)
        if bias is not None:
            gb = g2.sum(axis=0)
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _finish(out, inputs, rule, "conv2d")


# -- resampling ----------------------------------------------------------------

def upsample2x_nearest(x: Tensor) -> Tensor:
    """``[...,H,W,C] -> [...,2H,2W,C]`` by pixel replication."""
    ax = x.data.ndim - 3
    out = np.repeat(np.repeat(x.data, 2, axis=ax), 2, axis=ax + 1)

    def rule(g):
        s = g.shape
        g6 = g.reshape(s[:ax] + (s[ax] // 2, 2, s[ax + 1] // 2, 2, s[-1]))
        return (g6.sum(axis=(ax + 1, ax + 3)),)

    return _finish(out, (x,), rule, "upsample2x")


def downsample2x_avg(x: Tensor) -> Tensor:
    """2×2 average pooling; H and W must be even."""
    ax = x.data.ndim - 3
    s = x.shape
    if s[ax] % 2 or s[ax + 1] % 2:
        raise ShapeMismatch(f"downsample2x: odd spatial dims {s}")
    v = x.data.reshape(s[:ax] + (s[ax] // 2, 2, s[ax + 1] // 2, 2, s[-1]))
    out = v.mean(axis=(ax + 1, ax + 3), dtype=_dt())

    def rule(g):
        q = g * _dt()(0.25)
        return (np.repeat(np.repeat(q, 2, axis=ax), 2, axis=ax + 1),)

    return _finish(out, (x,), rule, "downsample2x")


# -- channel softmax family -------------------------------------------------------

def softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the last axis, stabilised by max subtraction."""
    if logits.shape[-1] < 2:
        raise ShapeMismatch("softmax_channels needs at least 2 channels")
    if not np.isfinite(logits.data).all():
        raise NonFinite("softmax_channels: non-finite logits")
    p = softmax_np(logits.data)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _finish(p, (logits,), rule, "softmax")


def log_softmax_channels(logits: Tensor) -> Tensor:
    if logits.shape[-1] < 2:
        raise ShapeMismatch("log_softmax_channels needs at least 2 channels")
    if not np.isfinite(logits.data).all():
        raise NonFinite("log_softmax_channels: non-finite logits")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _finish(out, (logits,), rule, "log_softmax")


def pick_channels(x: Tensor, labels: np.ndarray) -> Tensor:
    """Select ``x[..., labels[...]]``; output has ``x.shape[:-1]``."""
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise ShapeMismatch(f"pick: labels {labels.shape} vs {x.shape}")
    idx = labels[..., None].astype(np.intp)
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=_dt())
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _finish(np.ascontiguousarray(out), (x,), rule, "pick")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def take(x: Tensor, i: int) -> Tensor:
    """Item ``i`` along the leading (batch) axis."""
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=_dt())
        gx[i] = g
        return (gx,)

    return _finish(x.data[i].copy(), (x,), rule, "take")
