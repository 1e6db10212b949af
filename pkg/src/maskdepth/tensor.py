"""Minimal reverse-mode autodiff on numpy arrays.

Every operation below computes its result eagerly and, when gradients are
being recorded, appends one record to the active :class:`GradTape`.  A record
pairs the output tensor with a closure that routes the output's gradient to
the inputs.  ``backward(loss)`` replays the records in reverse execution
order, which is sufficient because each tensor is produced by exactly one
record and all of its consumers were recorded later.

Memory discipline: records are dropped as the replay consumes them and the
gradients of non-leaf tensors are released as soon as their own record has
run.  After ``backward`` only leaf tensors (those created directly by the
caller with ``requires_grad=True``, i.e. parameters and probe inputs) still
hold a ``.grad``.  This keeps the peak footprint of a full-resolution
forward+backward pass within a small multiple of the forward activations.

Supported array ranks go up to 4 (batch, channel, height, width).  Scalars
are 0-d arrays.
"""

from __future__ import annotations

import math
import threading
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensors hold float data, got dtype {arr.dtype}")
        if arr.ndim > 4:
            raise ValueError(f"tensors support at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


class _Record:
    __slots__ = ("out", "fn")

    def __init__(self, out: Tensor, fn: Callable[[np.ndarray], None]):
        self.out = out
        self.fn = fn


class GradTape:
    """Ordered list of operation records; also usable as a context manager.

    A thread-local stack always holds at least one tape, so ops can record
    without any explicit setup.  Entering a ``GradTape`` pushes a fresh tape
    so that nested work (e.g. a finite-difference probe inside a larger run)
    stays isolated.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _STATE.stack.pop()
        if popped is not self:
            raise RuntimeError("GradTape stack corrupted: exited out of order")


class _TapeState(threading.local):
    def __init__(self):
        self.stack = [GradTape()]
        self.enabled = True
        self.finite_checks = False


_STATE = _TapeState()


class no_grad:
    """Context manager that disables gradient recording."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.enabled = self._prev


class finite_checks:
    """Context manager that validates every op output for NaN/Inf.

    Off by default; the trainer re-runs a diverged step under this to name
    the first offending operation.
    """

    def __enter__(self):
        self._prev = _STATE.finite_checks
        _STATE.finite_checks = True
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.finite_checks = self._prev


def active_tape() -> GradTape:
    return _STATE.stack[-1]


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are live."""
    if _STATE.finite_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = _STATE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.is_leaf = not needs
    if needs:
        active_tape().records.append(_Record(out, fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Replay the active tape in reverse, populating leaf gradients.

    The tape is consumed: records are freed as they run, and a second call
    without new forward work raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not tape.records:
        raise RuntimeError("backward called on an empty tape (no recorded operations)")
    records = tape.records
    tape.records = []
    loss.grad = np.ones_like(loss.data)
    while records:
        rec = records.pop()
        out = rec.out
        if out.grad is not None:
            rec.fn(out.grad)
            if not out.is_leaf:
                out.grad = None
        rec.out = None
        rec.fn = None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _relu_bwd(x, out, g):
    _accum(x, g * (out.data > 0))


def _sigmoid_bwd(x, out, g):
    _accum(x, g * out.data * (1.0 - out.data))


def _abs_bwd(x, out, g):
    _accum(x, g * np.sign(x.data))


_UNARY = {
    "relu": (lambda a: np.maximum(a, 0), _relu_bwd),
    # computed via exp(-|x|) for stability on both tails
    "sigmoid": (lambda a: _stable_sigmoid(a), _sigmoid_bwd),
    "abs": (np.abs, _abs_bwd),
}


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    np.exp(-a, where=pos, out=out)
    out[pos] = 1.0 / (1.0 + out[pos])
    neg = ~pos
    ea = np.exp(a[neg])
    out[neg] = ea / (1.0 + ea)
    return out


def _add_bwd(a, b, g):
    _accum(a, _unbroadcast(g, a.shape))
    _accum(b, _unbroadcast(g, b.shape))


def _sub_bwd(a, b, g):
    _accum(a, _unbroadcast(g, a.shape))
    _accum(b, -_unbroadcast(g, b.shape))


def _mul_bwd(a, b, g):
    _accum(a, _unbroadcast(g * b.data, a.shape))
    _accum(b, _unbroadcast(g * a.data, b.shape))


_BINARY = {
    "add": (np.add, _add_bwd),
    "sub": (np.subtract, _sub_bwd),
    "mul": (np.multiply, _mul_bwd),
}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name; binary ops broadcast like numpy."""
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' is unary, got two operands")
        fwd, bwd = _UNARY[kind]
        out_data = fwd(a.data)
        out_holder = []

        def fn(g, a=a):
            bwd(a, out_holder[0], g)

        out = _finish(kind, out_data, (a,), fn)
        out_holder.append(out)
        return out
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' is binary, got one operand")
        fwd, bwd = _BINARY[kind]
        out_data = fwd(a.data, b.data)

        def fn(g, a=a, b=b):
            bwd(a, b, g)

        return _finish(kind, out_data, (a, b), fn)
    raise ValueError(f"unknown elementwise op kind '{kind}'")


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def absolute(a: Tensor) -> Tensor:
    return elementwise("abs", a)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (the constant gets no gradient)."""
    c = float(c)
    out_data = a.data * c

    def fn(g, a=a, c=c):
        _accum(a, g * c)

    return _finish("scale", out_data, (a,), fn)


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a 0-d scalar."""
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def fn(g, a=a):
        _accum(a, np.broadcast_to(g, a.shape))

    return _finish("sum_all", out_data, (a,), fn)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def fn(g, a=a):
        _accum(a, g.reshape(a.shape))

    return _finish("reshape", out_data, (a,), fn)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def fn(g, a=a):
        _accum(a, g.T)

    return _finish("transpose2d", out_data, (a,), fn)


def take_batch(a: Tensor, index: int) -> Tensor:
    """Select one batch item, keeping the batch axis (result shape 1xC...)."""
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"batch index {index} out of range for shape {a.shape}")
    out_data = a.data[index:index + 1].copy()

    def fn(g, a=a, index=index):
        full = np.zeros_like(a.data)
        full[index:index + 1] = g
        _accum(a, full)

    return _finish("take_batch", out_data, (a,), fn)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise ValueError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    for ax in range(a.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise ValueError(
                f"concat shape mismatch on axis {ax}: {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def fn(g, a=a, b=b, axis=axis, split=split):
        sl_a = [slice(None)] * g.ndim
        sl_a[axis] = slice(0, split)
        sl_b = [slice(None)] * g.ndim
        sl_b[axis] = slice(split, None)
        _accum(a, g[tuple(sl_a)])
        _accum(b, g[tuple(sl_b)])

    return _finish("concat", out_data, (a, b), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects BxCxHxW operands")
    return concat(a, b, axis=1)


# ---------------------------------------------------------------------------
# matmul / softmax
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def fn(g, a=a, b=b):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish("matmul", out_data, (a, b), fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, with max subtraction for stability."""
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)
    out_holder = []

    def fn(g, a=a):
        y = out_holder[0].data
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))

    out = _finish("softmax_rows", out_data, (a,), fn)
    out_holder.append(out)
    return out


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv geometry invalid: size {n}, kernel {k}, stride {stride}, padding {padding}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, weight (C_out, C_in, k, k).

    Implemented as k*k shifted pointwise GEMMs over strided slice views, so
    no im2col buffer is ever materialized.  Accumulation order over kernel
    taps is fixed, which keeps results bit-identical run to run.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d kernels are square, got {kh}x{kw}")
    if Cin_w != Cin:
        raise ValueError(f"conv2d channel mismatch: x has {Cin}, w expects {Cin_w}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({Cout},)")
    k, s, p = kh, int(stride), int(padding)
    Hout = _conv_out_size(H, k, s, p)
    Wout = _conv_out_size(W, k, s, p)

    # Channels-last working copies.  BLAS falls off its fast path the moment
    # an operand is a strided view (a w[:, :, di, dj] slice is ~25x slower in
    # a GEMM than the same values contiguous), so weights are repacked once
    # into tap-major blocks and the input is transposed once.
    xcl = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (k, k, Cin, Cout)
    acc = np.zeros((B * Hout * Wout, Cout), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            patch = xcl[:, di:di + s * Hout:s, dj:dj + s * Wout:s, :]
            acc += patch.reshape(-1, Cin) @ wk[di, dj]
    if bias is not None:
        acc += bias.data
    out_data = acc.reshape(B, Hout, Wout, Cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def fn(g, x=x, w=w, bias=bias, k=k, s=s, p=p, Hout=Hout, Wout=Wout):
        B, Cin, H, W = x.shape
        Cout = g.shape[1]
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, gm.sum(axis=0))
        need_dx = x.requires_grad
        need_dw = w.requires_grad
        xcl = None
        if need_dw:
            xcl = np.pad(x.data.transpose(0, 2, 3, 1),
                         ((0, 0), (p, p), (p, p), (0, 0)))
        wkb = None
        if need_dx:
            wkb = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
        # dX accumulates channels-last so the strided += walks contiguous rows.
        dxcl = np.zeros((B, H + 2 * p, W + 2 * p, Cin), dtype=x.data.dtype) \
            if need_dx else None
        dwk = np.zeros((k, k, Cout, Cin), dtype=w.data.dtype) if need_dw else None
        for di in range(k):
            for dj in range(k):
                if need_dw:
                    patch = xcl[:, di:di + s * Hout:s, dj:dj + s * Wout:s, :]
                    dwk[di, dj] += gm.T @ patch.reshape(-1, Cin)
                if need_dx:
                    contrib = (gm @ wkb[di, dj]).reshape(B, Hout, Wout, Cin)
                    dxcl[:, di:di + s * Hout:s, dj:dj + s * Wout:s, :] += contrib
        if need_dw:
            _accum(w, np.ascontiguousarray(dwk.transpose(2, 3, 0, 1)))
        if need_dx:
            core = dxcl[:, p:p + H, p:p + W, :] if p else dxcl
            _accum(x, np.ascontiguousarray(core.transpose(0, 3, 1, 2)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _finish("conv2d", out_data, inputs, fn)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Transposed convolution, the exact adjoint of ``conv2d`` at the same
    stride with zero padding.  Weight layout (C_in, C_out, k, k); no bias.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-d x and w, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cin_w, Cout, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv_transpose2d kernels are square, got {kh}x{kw}")
    if Cin_w != Cin:
        raise ValueError(
            f"conv_transpose2d channel mismatch: x has {Cin}, w expects {Cin_w}")
    k, s = kh, int(stride)
    Hout = (H - 1) * s + k
    Wout = (W - 1) * s + k

    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, Cin)
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # (k, k, Cin, Cout)
    # Scatter channels-last, transpose once at the end (see conv2d).
    ocl = np.zeros((B, Hout, Wout, Cout), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            contrib = (xm @ wk[di, dj]).reshape(B, H, W, Cout)
            ocl[:, di:di + s * H:s, dj:dj + s * W:s, :] += contrib
    out_data = np.ascontiguousarray(ocl.transpose(0, 3, 1, 2))

    def fn(g, x=x, w=w, k=k, s=s):
        B, Cin, H, W = x.shape
        Cout = g.shape[1]
        gcl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        dxm = np.zeros((B * H * W, Cin), dtype=x.data.dtype) if x.requires_grad else None
        dwk = np.zeros((k, k, Cin, Cout), dtype=w.data.dtype) if w.requires_grad else None
        xm = None
        if dwk is not None:
            xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, Cin)
        wkb = None
        if dxm is not None:
            wkb = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
        for di in range(k):
            for dj in range(k):
                patch = gcl[:, di:di + s * H:s, dj:dj + s * W:s, :]
                m = patch.reshape(-1, Cout)
                if dxm is not None:
                    dxm += m @ wkb[di, dj]
                if dwk is not None:
                    dwk[di, dj] += xm.T @ m
        if dxm is not None:
            _accum(x, dxm.reshape(B, H, W, Cin).transpose(0, 3, 1, 2))
        if dwk is not None:
            _accum(w, np.ascontiguousarray(dwk.transpose(2, 3, 0, 1)))

    return _finish("conv_transpose2d", out_data, (x, w), fn)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  On ties the gradient goes to the
    first maximum in row-major window order.
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects BxCxHxW, got shape {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    Hh, Wh = H // 2, W // 2
    win = x.data.reshape(B, C, Hh, 2, Wh, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, Hh, Wh, 4)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g, x=x, idx=idx):
        B, C, H, W = x.shape
        Hh, Wh = H // 2, W // 2
        dwin = np.zeros((B, C, Hh, Wh, 4), dtype=x.data.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, C, Hh, Wh, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, dx.reshape(B, C, H, W))

    return _finish("maxpool2", out_data, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: BxCxHxW -> BxC."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects BxCxHxW, got shape {x.shape}")
    B, C, H, W = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def fn(g, x=x):
        B, C, H, W = x.shape
        _accum(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape))

    return _finish("global_avg_pool", out_data, (x,), fn)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BNState:
    """Running statistics for one batchnorm layer (not trainable)."""

    __slots__ = ("running_mean", "running_var", "eps", "momentum")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
                mode: str) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics (biased variance, which is
    also what feeds the running averages) and updates ``state`` in place;
    eval mode reads the running statistics and never touches them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got '{mode}'")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects BxCxHxW, got shape {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(
            f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    if B * H * W == 0:
        raise ValueError("batchnorm2d got an empty batch")

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        mom = state.momentum
        state.running_mean += mom * (mean.astype(state.running_mean.dtype) - state.running_mean)
        state.running_var += mom * (var.astype(state.running_var.dtype) - state.running_var)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        inv = 1.0 / np.sqrt(state.running_var.astype(x.data.dtype) + state.eps)

    mean4 = mean.reshape(1, C, 1, 1)
    inv4 = inv.reshape(1, C, 1, 1)
    xhat = (x.data - mean4) * inv4
    out_data = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    if mode == "train":

        def fn(g, x=x, gamma=gamma, beta=beta, mean4=mean4, inv4=inv4):
            B, C, H, W = x.shape
            m = B * H * W
            xhat = (x.data - mean4) * inv4
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(1, C, 1, 1)
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                _accum(x, (inv4 / m) * (m * dxhat - s1 - xhat * s2))

    else:

        def fn(g, x=x, gamma=gamma, beta=beta, mean4=mean4, inv4=inv4):
            C = x.shape[1]
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                xhat = (x.data - mean4) * inv4
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accum(x, g * (gamma.data.reshape(1, C, 1, 1) * inv4))

    return _finish("batchnorm2d", out_data, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _linear_resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix for 1-d linear resampling.

    Source coordinates follow the half-pixel convention
    ``src = (dst + 0.5) * n_in / n_out - 0.5`` with edge clamping, so a
    same-size resample is exactly the identity.
    """
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        lo = math.floor(src)
        frac = src - lo
        i0 = min(max(lo, 0), n_in - 1)
        i1 = min(max(lo + 1, 0), n_in - 1)
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


@lru_cache(maxsize=64)
def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    ratio = n_in / n_out
    idx = np.floor(np.arange(n_out) * ratio).astype(np.intp)
    return np.clip(idx, 0, n_in - 1)


def interpolate(x: Tensor, out_h: int, out_w: int, mode: str) -> Tensor:
    """Resize BxCxHxW to (out_h, out_w); 'bilinear' or 'nearest'.

    Bilinear is evaluated as two separable matrix products
    ``R_h @ x @ R_w^T``, which makes the backward pass a pair of transposed
    products rather than scatter-adds.
    """
    if x.ndim != 4:
        raise ValueError(f"interpolate expects BxCxHxW, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"interpolate target {out_h}x{out_w} must be positive")
    B, C, H, W = x.shape

    if mode == "nearest":
        ri = _nearest_index(out_h, H)
        ci = _nearest_index(out_w, W)
        out_data = np.ascontiguousarray(x.data[:, :, ri][:, :, :, ci])

        def fn(g, x=x, ri=ri, ci=ci):
            dx = np.zeros_like(x.data)
            np.add.at(dx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
            _accum(x, dx)

        return _finish("interpolate", out_data, (x,), fn)

    if mode == "bilinear":
        rh = _linear_resample_matrix(out_h, H).astype(x.data.dtype)
        rw = _linear_resample_matrix(out_w, W).astype(x.data.dtype)
        out_data = np.matmul(np.matmul(rh, x.data), rw.T)

        def fn(g, x=x, rh=rh, rw=rw):
            _accum(x, np.matmul(np.matmul(rh.T, g), rw))

        return _finish("interpolate", out_data, (x,), fn)

    raise ValueError(f"interpolate mode must be 'bilinear' or 'nearest', got '{mode}'")
