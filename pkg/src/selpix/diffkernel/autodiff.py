"""Reverse-mode automatic differentiation over float64 numpy arrays.

A `Var` wraps an array together with the recipe for propagating gradients
to its parents.  Calling :func:`backward` on a scalar `Var` walks the graph
in reverse topological order and accumulates `.grad` on every node that
requires it.  All arithmetic is double precision and deterministic:
identical inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DimensionError


class Var:
    """Graph node: a float64 array plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Var"] = (),
        _bwd: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._bwd = _bwd

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents, bwd) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(data, _parents=parents, _bwd=bwd)
    return Var(data)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def square(a) -> Var:
    a = as_var(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Var:
    a = as_var(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def vsum(a) -> Var:
    a = as_var(a)
    return _node(
        np.float64(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.data.shape).copy(),),
    )


def mean(a) -> Var:
    a = as_var(a)
    n = a.data.size
    return _node(
        np.float64(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),),
    )


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = as_var(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# spatial ops on (B, C, H, W) stacks
# ---------------------------------------------------------------------------

def conv2d_op(x, w, b=None, stride: int = 1, pad: int = 0) -> Var:
    """Cross-correlation of a (B,C,H,W) stack with (Cout,Cin,kh,kw) kernels.

    Zero padding, integer stride; bias (Cout,) added per output channel when
    given.  im2col + GEMM on the forward path, col2im scatter on the way back.
    """
    x, w = as_var(x), as_var(w)
    if b is not None:
        b = as_var(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.data.shape}, {w.data.shape}"
        )
    bsz, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"channel mismatch: input has {cin}, kernel expects {cin_w}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * pad, wid + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}"
        )
    if b is not None and b.data.shape != (cout,):
        raise DimensionError(f"bias shape {b.data.shape} != ({cout},)")

    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, OH, OW, kh, kw) -> (B*OH*OW, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * oh * ow, cin * kh * kw
    )
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_mat = cols @ wmat.T
    if b is not None:
        out_mat = out_mat + b.data
    out = out_mat.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            bsz * oh * ow, cout
        )
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            g6 = gcols.reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((bsz, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + oh * stride : stride,
                        j : j + ow * stride : stride] += g6[:, :, :, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        gw = (gmat.T @ cols).reshape(w.data.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = gmat.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd)


def maxpool2x(x) -> Var:
    """2x2 max pooling; spatial extents must be even.

    Ties route the gradient to the first maximum in window scan order, which
    keeps the backward pass deterministic.
    """
    x = as_var(x)
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x requires even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    r = (
        x.data.reshape(bsz, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, c, h2, w2, 4)
    )
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        g4 = np.zeros((bsz, c, h2, w2, 4))
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = (
            g4.reshape(bsz, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, h, w)
        )
        return (gx,)

    return _node(out, (x,), bwd)


def upsample2x(x) -> Var:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    x = as_var(x)
    bsz, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), bwd)


def concat_channels(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    na = a.data.shape[1]
    return _node(
        np.concatenate((a.data, b.data), axis=1),
        (a, b),
        lambda g: (g[:, :na], g[:, na:]),
    )


def binarize_ste(latent) -> Var:
    """Sign with a straight-through backward pass.

    Forward maps every entry to +1 (value >= 0) or -1.  The gradient passes
    through unchanged where |value| <= 1 and is zeroed outside that window.
    """
    latent = as_var(latent)
    window = np.abs(latent.data) <= 1.0
    out = np.where(latent.data >= 0, 1.0, -1.0)
    return _node(out, (latent,), lambda g: (g * window,))


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(root: Var) -> None:
    """Accumulate gradients of a scalar `root` into every reachable Var."""
    if root.data.ndim != 0:
        raise DimensionError(f"backward needs a scalar root, got shape {root.data.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
