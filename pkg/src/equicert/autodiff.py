"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. While a Tape is active, every primitive
appends a node in execution order (hence topologically sorted); backward
walks the record once in reverse. Ops never broadcast two tensors against
each other: the only implicit broadcast is the bias add inside affine and
conv2d, everything else goes through explicit shape ops (tile_to, reshape).

Kernels are pure functions of their input arrays, so a tape can be replayed
to verify that the recorded forward pass reproduces itself bit for bit.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12  # clamp for probabilities entering logs


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def grad_or_zero(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("op", "inputs", "output", "aux", "backward")

    def __init__(self, op, inputs, output, aux, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.aux = aux
        self.backward = backward


_TAPE_STACK: list["Tape"] = []

# running count of backward passes, for instrumentation in training tests
_BACKWARD_CALLS = 0


def backward_call_count() -> int:
    return _BACKWARD_CALLS


def reset_backward_call_count() -> None:
    global _BACKWARD_CALLS
    _BACKWARD_CALLS = 0


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of a scalar loss into .grad of every input."""
        global _BACKWARD_CALLS
        _BACKWARD_CALLS += 1
        if loss.data.shape != ():
            raise ShapeError("backward requires a scalar loss")
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)

    def replay(self, atol: float = 0.0) -> bool:
        """Re-execute every recorded kernel and compare with stored outputs."""
        for node in self.nodes:
            fresh = _KERNELS[node.op]([t.data for t in node.inputs], node.aux)
            if atol == 0.0:
                if not np.array_equal(fresh, node.output.data):
                    return False
            elif not np.allclose(fresh, node.output.data, atol=atol):
                return False
        return True


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or not t.is_leaf


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


_KERNELS: dict[str, Callable] = {}


def _make(op: str, inputs: tuple[Tensor, ...], aux, backward) -> Tensor:
    data = _KERNELS[op]([t.data for t in inputs], aux)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        out.is_leaf = False
        tape.nodes.append(_Node(op, inputs, out, aux, backward(inputs, out, aux)))
    return out


def _kernel(name):
    def deco(fn):
        _KERNELS[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------------------
# elementwise and constant ops
# ---------------------------------------------------------------------------

@_kernel("add")
def _k_add(d, aux):
    return d[0] + d[1]


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")

    def bwd(inputs, out, aux):
        x, y = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g)
            if _needs_grad(y):
                _accum(y, g)
        return run
    return _make("add", (a, b), None, bwd)


@_kernel("sub")
def _k_sub(d, aux):
    return d[0] - d[1]


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} vs {b.shape}")

    def bwd(inputs, out, aux):
        x, y = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g)
            if _needs_grad(y):
                _accum(y, -g)
        return run
    return _make("sub", (a, b), None, bwd)


@_kernel("mul")
def _k_mul(d, aux):
    return d[0] * d[1]


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")

    def bwd(inputs, out, aux):
        x, y = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g * y.data)
            if _needs_grad(y):
                _accum(y, g * x.data)
        return run
    return _make("mul", (a, b), None, bwd)


@_kernel("scale")
def _k_scale(d, aux):
    return d[0] * aux


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g * aux)
        return run
    return _make("scale", (a,), c, bwd)


@_kernel("add_const")
def _k_add_const(d, aux):
    return d[0] + aux


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g)
        return run
    return _make("add_const", (a,), c, bwd)


@_kernel("mul_const")
def _k_mul_const(d, aux):
    return d[0] * aux


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant array; the constant may broadcast."""
    c = np.asarray(c, dtype=np.float64)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                ga = g * aux
                if ga.shape != x.data.shape:
                    ga = _reduce_to_shape(ga, x.data.shape)
                _accum(x, ga)
        return run
    return _make("mul_const", (a,), c, bwd)


@_kernel("rsub_const")
def _k_rsub_const(d, aux):
    return aux - d[0]


def rsub_const(c: float, a: Tensor) -> Tensor:
    """c - a, for complements like 1 - p."""
    c = float(c)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, -g)
        return run
    return _make("rsub_const", (a,), c, bwd)


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


@_kernel("relu")
def _k_relu(d, aux):
    return np.maximum(d[0], 0.0)


def relu(a: Tensor) -> Tensor:
    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g * (x.data > 0.0))
        return run
    return _make("relu", (a,), None, bwd)


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


@_kernel("sigmoid")
def _k_sigmoid(d, aux):
    x = d[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep outputs strictly inside (0, 1) even at saturated logits
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(a: Tensor) -> Tensor:
    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                y = out.data
                _accum(x, g * y * (1.0 - y))
        return run
    return _make("sigmoid", (a,), None, bwd)


@_kernel("softmax")
def _k_softmax(d, aux):
    x = d[0]
    shifted = x - x.max(axis=aux, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=aux, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                y = out.data
                dot = (g * y).sum(axis=aux, keepdims=True)
                _accum(x, y * (g - dot))
        return run
    return _make("softmax", (a,), axis, bwd)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

@_kernel("reshape")
def _k_reshape(d, aux):
    return d[0].reshape(aux)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g.reshape(x.data.shape))
        return run
    return _make("reshape", (a,), shape, bwd)


@_kernel("select")
def _k_select(d, aux):
    return d[0][aux]


def select(a: Tensor, index: int) -> Tensor:
    """Take one slice along axis 0."""
    index = int(index)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                full = np.zeros_like(x.data)
                full[aux] = g
                _accum(x, full)
        return run
    return _make("select", (a,), index, bwd)


@_kernel("tile_to")
def _k_tile_to(d, aux):
    return np.broadcast_to(d[0], aux).copy()


def tile_to(a: Tensor, shape) -> Tensor:
    """Explicitly broadcast a tensor up to a target shape."""
    shape = tuple(shape)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, _reduce_to_shape(g, x.data.shape))
        return run
    return _make("tile_to", (a,), shape, bwd)


@_kernel("sum")
def _k_sum(d, aux):
    return d[0].sum(axis=aux)


def tsum(a: Tensor, axis=None) -> Tensor:
    axis = tuple(axis) if isinstance(axis, (list, tuple)) else axis

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                if aux is None:
                    _accum(x, np.broadcast_to(g, x.data.shape).copy())
                else:
                    axes = aux if isinstance(aux, tuple) else (aux,)
                    gg = np.expand_dims(g, axes)
                    _accum(x, np.broadcast_to(gg, x.data.shape).copy())
        return run
    return _make("sum", (a,), axis, bwd)


@_kernel("mean")
def _k_mean(d, aux):
    return d[0].mean(axis=aux)


def tmean(a: Tensor, axis=None) -> Tensor:
    axis = tuple(axis) if isinstance(axis, (list, tuple)) else axis

    def bwd(inputs, out, aux):
        (x,) = inputs
        if aux is None:
            count = x.data.size
        else:
            axes = aux if isinstance(aux, tuple) else (aux,)
            count = int(np.prod([x.data.shape[i] for i in axes]))

        def run(g):
            if _needs_grad(x):
                if aux is None:
                    _accum(x, np.broadcast_to(g / count, x.data.shape).copy())
                else:
                    axes = aux if isinstance(aux, tuple) else (aux,)
                    gg = np.expand_dims(g / count, axes)
                    _accum(x, np.broadcast_to(gg, x.data.shape).copy())
        return run
    return _make("mean", (a,), axis, bwd)


@_kernel("l2norm")
def _k_l2norm(d, aux):
    return np.sqrt((d[0] ** 2).sum(axis=aux))


def l2norm(a: Tensor, axis: int = 0) -> Tensor:
    """Euclidean norm along one axis with subgradient 0 at the origin."""
    axis = int(axis)

    def bwd(inputs, out, aux):
        (x,) = inputs

        def run(g):
            if _needs_grad(x):
                norms = np.expand_dims(out.data, aux)
                gg = np.expand_dims(g, aux)
                with np.errstate(invalid="ignore", divide="ignore"):
                    direction = np.where(norms > 0.0, x.data / np.where(norms == 0, 1.0, norms), 0.0)
                _accum(x, gg * direction)
        return run
    return _make("l2norm", (a,), axis, bwd)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

@_kernel("matmul")
def _k_matmul(d, aux):
    return d[0] @ d[1]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} vs {b.shape}")

    def bwd(inputs, out, aux):
        x, y = inputs

        def run(g):
            if _needs_grad(x):
                _accum(x, g @ y.data.T)
            if _needs_grad(y):
                _accum(y, x.data.T @ g)
        return run
    return _make("matmul", (a, b), None, bwd)


@_kernel("affine")
def _k_affine(d, aux):
    return d[0] @ d[1] + d[2]


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows (the one permitted broadcast)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine shapes {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} vs ({w.shape[1]},)")

    def bwd(inputs, out, aux):
        xx, ww, bb = inputs

        def run(g):
            if _needs_grad(xx):
                _accum(xx, g @ ww.data.T)
            if _needs_grad(ww):
                _accum(ww, xx.data.T @ g)
            if _needs_grad(bb):
                _accum(bb, g.sum(axis=0))
        return run
    return _make("affine", (x, w, b), None, bwd)


# ---------------------------------------------------------------------------
# 2-D convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, oh, ow),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    cols = windows.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(gcols, b, c, h, w, kh, kw, stride, pad, oh, ow):
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    gwin = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, :, i, j]
    if pad:
        return dxp[:, :, pad:h + pad, pad:w + pad]
    return dxp


@_kernel("conv2d")
def _k_conv2d(d, aux):
    x, k = d[0], d[1]
    stride, pad = aux
    b, c, h, w = x.shape
    f, _, kh, kw = k.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = cols @ k.reshape(f, c * kh * kw).T
    out = out.reshape(b, oh, ow, f).transpose(0, 3, 1, 2)
    if len(d) == 3:
        out = out + d[2][None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with filters (F,C,kh,kw)."""
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} vs {k.shape}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape}")
    inputs = (x, k) if bias is None else (x, k, bias)

    def bwd(inputs, out, aux):
        stride_, pad_ = aux
        xx, kk = inputs[0], inputs[1]
        bb = inputs[2] if len(inputs) == 3 else None
        b, c, h, w = xx.data.shape
        f, _, kh, kw = kk.data.shape
        oh, ow = out.data.shape[2], out.data.shape[3]

        def run(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(b * oh * ow, f))
            if _needs_grad(kk) or _needs_grad(xx):
                k2 = kk.data.reshape(f, c * kh * kw)
            if _needs_grad(kk):
                cols, _, _ = _im2col(xx.data, kh, kw, stride_, pad_)
                _accum(kk, (g2.T @ cols).reshape(f, c, kh, kw))
            if _needs_grad(xx):
                gcols = g2 @ k2
                _accum(xx, _col2im(gcols, b, c, h, w, kh, kw, stride_, pad_, oh, ow))
            if bb is not None and _needs_grad(bb):
                _accum(bb, g.sum(axis=(0, 2, 3)))
        return run
    return _make("conv2d", inputs, (int(stride), int(pad)), bwd)


@_kernel("transpose")
def _k_transpose(d, aux):
    return np.ascontiguousarray(d[0].transpose(aux))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)

    def bwd(inputs, out, aux):
        (x,) = inputs
        inverse = tuple(np.argsort(aux))

        def run(g):
            if _needs_grad(x):
                _accum(x, np.ascontiguousarray(g.transpose(inverse)))
        return run
    return _make("transpose", (a,), axes, bwd)


def _kernel_dd_major(k: np.ndarray) -> np.ndarray:
    """Reorder (F,C,3,3) filters to (9,C,F) with the patch offset major."""
    f, c = k.shape[0], k.shape[1]
    return np.ascontiguousarray(k.transpose(2, 3, 1, 0)).reshape(9, c, f)


@_kernel("conv3x3_nhwc")
def _k_conv3x3_nhwc(d, aux):
    x, k = d[0], d[1]
    b, h, w, c = x.shape
    f = k.shape[0]
    k3 = _kernel_dd_major(k)
    # one wide gemm per sample against all nine offsets at once, then
    # cache-resident shifted accumulation; far cheaper than materializing a
    # patch matrix at these channel counts
    kwide = np.ascontiguousarray(k3.transpose(1, 0, 2)).reshape(c, 9 * f)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((b, h, w, f))
    for i in range(b):
        y = (xp[i].reshape(-1, c) @ kwide).reshape(h + 2, w + 2, 9, f)
        acc = np.zeros((h, w, f))
        for dd in range(9):
            acc += y[dd // 3:dd // 3 + h, dd % 3:dd % 3 + w, dd]
        out[i] = acc
    if len(d) == 3:
        out += d[2]
    return out


def conv3x3_nhwc(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 3x3 convolution on channels-last activations.

    Behaves exactly like conv2d(stride=1, pad=1) after layout conversion but
    avoids the per-call strided transposes, which dominate at these sizes.
    The kernel keeps the (F, C, kh, kw) layout shared with conv2d.
    """
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[3] != k.shape[1]:
        raise ShapeError(f"conv3x3_nhwc shapes {x.shape} vs {k.shape}")
    if k.shape[2:] != (3, 3):
        raise ShapeError("conv3x3_nhwc requires 3x3 kernels")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ShapeError(f"conv3x3_nhwc bias shape {bias.shape}")
    inputs = (x, k) if bias is None else (x, k, bias)

    def bwd(inputs, out, aux):
        xx, kk = inputs[0], inputs[1]
        bb = inputs[2] if len(inputs) == 3 else None
        b, h, w, c = xx.data.shape
        f = kk.data.shape[0]

        def run(g):
            g2 = g.reshape(b * h * w, f)
            k3 = _kernel_dd_major(kk.data)
            if _needs_grad(kk):
                xp = np.pad(xx.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
                dk3 = np.empty((9, c, f))
                for dd in range(9):
                    xs = xp[:, dd // 3:dd // 3 + h, dd % 3:dd % 3 + w, :].reshape(-1, c)
                    dk3[dd] = xs.T @ g2
                _accum(kk, dk3.reshape(3, 3, c, f).transpose(3, 2, 0, 1))
            if _needs_grad(xx):
                kback = np.ascontiguousarray(k3.transpose(2, 0, 1)).reshape(f, 9 * c)
                dxp = np.zeros((b, h + 2, w + 2, c))
                for i in range(b):
                    gy = (g[i].reshape(-1, f) @ kback).reshape(h, w, 9, c)
                    for dd in range(9):
                        dxp[i, dd // 3:dd // 3 + h, dd % 3:dd % 3 + w, :] += gy[:, :, dd]
                _accum(xx, dxp[:, 1:h + 1, 1:w + 1, :])
            if bb is not None and _needs_grad(bb):
                _accum(bb, g2.sum(axis=0))
        return run
    return _make("conv3x3_nhwc", inputs, None, bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@_kernel("cross_entropy")
def _k_cross_entropy(d, aux):
    z, y = d
    reduction = aux
    # stable binary cross-entropy from logits
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    total = per.sum()
    if reduction == "mean":
        return np.asarray(total / z.size)
    return np.asarray(total)


def cross_entropy(logits: Tensor, targets: Tensor, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of elementwise logits against {0,1} targets."""
    if logits.shape != targets.shape:
        raise ShapeError(f"cross_entropy shapes {logits.shape} vs {targets.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(inputs, out, aux):
        z, y = inputs

        def run(g):
            p = _k_sigmoid([z.data], None)
            factor = 1.0 / z.data.size if aux == "mean" else 1.0
            if _needs_grad(z):
                _accum(z, g * factor * (p - y.data))
            if _needs_grad(y):
                _accum(y, g * factor * (-z.data))
        return run
    return _make("cross_entropy", (logits, targets), reduction, bwd)


@_kernel("kl_div")
def _k_kl_div(d, aux):
    p, q = d
    if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9) or np.any(q < -1e-9) or np.any(q > 1.0 + 1e-9):
        raise ValueError("kl_div operands must be probabilities in [0, 1]")
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    qc = np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return np.asarray((pc * (np.log(pc) - np.log(qc))).sum())


def kl_div(p: Tensor, q: Tensor, reduction: str = "sum") -> Tensor:
    """Sum of p * log(p/q) over all elements, probabilities clamped before logs.

    Pass complementary arrays as well (p, 1-p vs q, 1-q) to get the full
    divergence between per-pixel Bernoulli distributions.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shapes {p.shape} vs {q.shape}")
    if reduction != "sum":
        raise ValueError("kl_div supports sum reduction only")

    def bwd(inputs, out, aux):
        pp, qq = inputs

        def run(g):
            pc = np.clip(pp.data, PROB_FLOOR, 1.0 - PROB_FLOOR)
            qc = np.clip(qq.data, PROB_FLOOR, 1.0 - PROB_FLOOR)
            in_p = (pp.data > PROB_FLOOR) & (pp.data < 1.0 - PROB_FLOOR)
            in_q = (qq.data > PROB_FLOOR) & (qq.data < 1.0 - PROB_FLOOR)
            if _needs_grad(pp):
                _accum(pp, g * in_p * (np.log(pc) - np.log(qc) + 1.0))
            if _needs_grad(qq):
                _accum(qq, g * in_q * (-pc / qc))
        return run
    return _make("kl_div", (p, q), reduction, bwd)


def bernoulli_kl(p: Tensor, q: Tensor) -> Tensor:
    """KL divergence between per-pixel Bernoulli maps, summed over pixels."""
    return add(kl_div(p, q), kl_div(rsub_const(1.0, p), rsub_const(1.0, q)))


# ---------------------------------------------------------------------------
# gradients with respect to inputs
# ---------------------------------------------------------------------------

def grad_wrt_input(model, loss_fn, x: np.ndarray, target) -> np.ndarray:
    """Gradient of loss_fn(model, x, target) with respect to x.

    Model parameters are frozen for the duration of the call, so only the
    input path is recorded and differentiated.
    """
    params = model.parameters()
    saved = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            loss = loss_fn(model, xt, target)
            tape.backward(loss)
    finally:
        for name, p in params.items():
            p.requires_grad = saved[name]
    return xt.grad_or_zero()
