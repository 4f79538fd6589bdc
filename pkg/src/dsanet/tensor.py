"""Dense feature-map arithmetic with a recorded graph and reverse-mode gradients.

A ``Graph`` records every primitive in creation order, which is already a
topological order. ``Graph.backward`` walks the record in reverse and
accumulates adjoints. Feature maps are float64 arrays shaped (C, H, W);
matrices are plain 2-D arrays.

Only the convolution shapes the detector needs are supported::

    1x1, stride 1 or 2, padding 0
    3x3, stride 2, padding 1
    7x7, stride 1, padding 3
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

SUPPORTED_CONV = {
    (1, 1, 0),
    (1, 2, 0),
    (3, 2, 1),
    (7, 1, 3),
}


class ShapeError(ValueError):
    pass


# -- multiply-accumulate instrumentation -------------------------------------

_counter = threading.local()


@contextmanager
def count_madds():
    """Count multiply-accumulates and exponentials executed by the kernels.

    Yields a dict with ``madds`` and ``exps`` that is filled in as ops run.
    """
    prev = getattr(_counter, "active", None)
    tally = {"madds": 0, "exps": 0}
    _counter.active = tally
    try:
        yield tally
    finally:
        _counter.active = prev


def _tally(key: str, n: int) -> None:
    active = getattr(_counter, "active", None)
    if active is not None:
        active[key] += int(n)


# -- feature map helpers ------------------------------------------------------

def as_real(x) -> np.ndarray:
    """Array view of ``x``; floating dtypes (incl. longdouble) pass through uncopied."""
    arr = np.asarray(x)
    return arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(DTYPE)


def as_feature_map(x) -> np.ndarray:
    arr = as_real(x)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"feature map must be (channels, height, width) with positive dims, got {arr.shape}")
    return arr


def write_fmap(path, fmap: np.ndarray) -> None:
    """Write a feature map in the ``FMAP v1`` text format.

    Line one holds ``C H W``; the remaining tokens are the values in
    row-major (c, y, x) order. ``repr`` gives shortest round-trip decimals.
    """
    fmap = as_feature_map(fmap)
    c, h, w = fmap.shape
    body = " ".join(map(repr, fmap.ravel().tolist()))
    Path(path).write_text(f"{c} {h} {w}\n{body}\n")


def read_fmap(path) -> np.ndarray:
    text = Path(path).read_text()
    head, _, body = text.partition("\n")
    try:
        c, h, w = (int(t) for t in head.split())
    except ValueError:
        raise ShapeError(f"{path}: malformed FMAP header {head!r}") from None
    values = np.array(body.split(), dtype=DTYPE)
    if values.size != c * h * w:
        raise ShapeError(f"{path}: header says {c}x{h}x{w}={c * h * w} values, found {values.size}")
    return values.reshape(c, h, w)


@dataclass
class ConvWeights:
    """Weights (out, in, kh, kw) and bias (out,) of one convolution."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = as_real(self.weight)
        self.bias = as_real(self.bias)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias length {self.bias.shape} does not match out_channels {self.weight.shape[0]}")
        check_conv_shape(self.weight.shape, self.stride, self.padding)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def check_conv_shape(wshape, stride: int, padding: int) -> None:
    kh, kw = wshape[2], wshape[3]
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if (kh, stride, padding) not in SUPPORTED_CONV:
        raise ShapeError(f"unsupported conv: kernel {kh}x{kw}, stride {stride}, padding {padding}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# -- graph --------------------------------------------------------------------

class Node:
    __slots__ = ("graph", "id", "op", "parents", "value", "grad", "backward_fn", "requires_grad", "name")

    def __init__(self, graph, op, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.shape}>"


class Graph:
    """Record of primitive ops, in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[int, Node] = {}

    def input(self, value, requires_grad=False, name=None) -> Node:
        return Node(self, "input", as_real(value), requires_grad=requires_grad, name=name)

    def const(self, value) -> Node:
        return Node(self, "const", as_real(value))

    def param(self, array: np.ndarray, name=None) -> Node:
        """Bind a parameter array; the same array object maps to one node."""
        key = id(array)
        node = self._params.get(key)
        if node is None or node.value is not array:
            node = Node(self, "param", array, requires_grad=True, name=name)
            self._params[key] = node
        return node

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "param"]

    def backward(self, out: Node, seed=None) -> None:
        """Populate ``grad`` on every node that ``out`` depends on."""
        if out.graph is not self:
            raise ValueError("output node belongs to another graph")
        if seed is None:
            if out.value.size != 1:
                raise ShapeError(f"seed required for non-scalar output of shape {out.shape}")
            seed = np.ones_like(out.value)
        seed = as_real(seed)
        if seed.shape != out.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {out.shape}")
        for n in self.nodes:
            n.grad = None
        out.grad = seed.copy()
        for n in reversed(self.nodes[: out.id + 1]):
            if n.grad is None or n.backward_fn is None:
                continue
            grads = n.backward_fn(n.grad)
            for parent, g in zip(n.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, copy=True).reshape(parent.shape)
                else:
                    parent.grad += g


def _op(op: str, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    graph = parents[0].graph
    needs = any(p.requires_grad for p in parents)
    return Node(graph, op, value, parents, backward_fn if needs else None, needs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------------

def conv2d(x: Node, w: Node, b: Node | None, stride: int = 1, padding: int = 0) -> Node:
    xv, wv = x.value, w.value
    if xv.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {xv.shape}")
    if wv.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {wv.shape}")
    check_conv_shape(wv.shape, stride, padding)
    cout, cin, k, _ = wv.shape
    if xv.shape[0] != cin:
        raise ShapeError(f"in_channels: weights expect {cin}, input has {xv.shape[0]}")
    if b is not None and b.value.shape != (cout,):
        raise ShapeError(f"out_channels: bias has {b.value.shape}, weights give {cout}")
    _, h, wd = xv.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"height/width: input {h}x{wd} too small for kernel {k}")

    if k == 1:
        xs = xv[:, ::stride, ::stride]
        cols = xs.reshape(cin, -1)
        out = (wv[:, :, 0, 0] @ cols).reshape(cout, ho, wo)
    else:
        xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * k * k, ho * wo)
        out = (wv.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.value[:, None, None]
    _tally("madds", cout * cin * k * k * ho * wo)

    def backward(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(wv.shape) if w.requires_grad else None
        gb = g.sum(axis=(1, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            if k == 1:
                gs = (wv[:, :, 0, 0].T @ g2).reshape(cin, ho, wo)
                if stride == 1:
                    gx = gs
                else:
                    gx = np.zeros_like(xv)
                    gx[:, ::stride, ::stride] = gs
            else:
                gcols = (wv.reshape(cout, -1).T @ g2).reshape(cin, k, k, ho, wo)
                gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
                gx = gxp[:, padding:padding + h, padding:padding + wd]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _op("conv2d", out, parents, backward)


def conv(x: Node, cw: ConvWeights, name: str = "") -> Node:
    """Apply a ``ConvWeights`` bundle, binding its arrays as parameters."""
    g = x.graph
    return conv2d(x, g.param(cw.weight, f"{name}.w"), g.param(cw.bias, f"{name}.b"), cw.stride, cw.padding)


def channel_pool_concat(x: Node) -> Node:
    """Stack the per-position channel max and channel mean into a 2xHxW map."""
    xv = x.value
    if xv.ndim != 3:
        raise ShapeError(f"channel_pool_concat input must be (C, H, W), got {xv.shape}")
    c = xv.shape[0]
    arg = xv.argmax(axis=0)
    mx = np.take_along_axis(xv, arg[None], axis=0)[0]
    out = np.stack([mx, xv.mean(axis=0)])

    def backward(g):
        gx = np.broadcast_to(g[1] / c, xv.shape).copy()
        np.put_along_axis(gx, arg[None], np.take_along_axis(gx, arg[None], axis=0) + g[0][None], axis=0)
        return (gx,)

    return _op("channel_pool_concat", out, (x,), backward)


def softmax_rows(m: Node) -> Node:
    mv = m.value
    if mv.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {mv.shape}")
    e = np.exp(mv - mv.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    _tally("exps", mv.size)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _op("softmax_rows", y, (m,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _op("sigmoid", y, (x,), backward)


sigmoid_map = sigmoid


def relu(x: Node) -> Node:
    mask = x.value > 0
    y = np.where(mask, x.value, 0.0)

    def backward(g):
        return (g * mask,)

    return _op("relu", y, (x,), backward)


def nearest_upsample(x: Node, factor: int) -> Node:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    xv = x.value
    if factor == 1:
        out = xv.copy()
    else:
        out = xv.repeat(factor, axis=1).repeat(factor, axis=2)
    c, h, w = xv.shape

    def backward(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _op("nearest_upsample", out, (x,), backward)


def crop(x: Node, height: int, width: int) -> Node:
    """Keep the top-left ``height`` x ``width`` window."""
    xv = x.value
    if height > xv.shape[1] or width > xv.shape[2]:
        raise ShapeError(f"crop {height}x{width} larger than map {xv.shape[1]}x{xv.shape[2]}")
    if (height, width) == xv.shape[1:]:
        return x
    out = xv[:, :height, :width].copy()

    def backward(g):
        gx = np.zeros_like(xv)
        gx[:, :height, :width] = g
        return (gx,)

    return _op("crop", out, (x,), backward)


def add(a: Node, b: Node) -> Node:
    out = a.value + b.value
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _op("add", out, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting (scalar gamma, 1xHxW masks)."""
    av, bv = a.value, b.value
    out = av * bv

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _op("mul", out, (a, b), backward)


def scale(x: Node, c: float) -> Node:
    out = x.value * c

    def backward(g):
        return (g * c,)

    return _op("scale", out, (x,), backward)


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner dimension: {av.shape} @ {bv.shape}")
    out = av @ bv
    _tally("madds", av.shape[0] * av.shape[1] * bv.shape[1])

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _op("matmul", out, (a, b), backward)


def transpose(x: Node, axes=None) -> Node:
    axes = tuple(reversed(range(x.value.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.value.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _op("transpose", out, (x,), backward)


def reshape(x: Node, shape) -> Node:
    src = x.shape
    out = x.value.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return _op("reshape", out, (x,), backward)


def concat(xs: Sequence[Node], axis: int) -> Node:
    out = np.concatenate([n.value for n in xs], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _op("concat", out, tuple(xs), backward)


def flatten_levels(maps: Sequence[Node]) -> Node:
    """Concatenate (C, H_l, W_l) maps into one (C, 1, sum H_l W_l) map."""
    flat = [reshape(m, (m.shape[0], 1, m.shape[1] * m.shape[2])) for m in maps]
    return flat[0] if len(flat) == 1 else concat(flat, axis=2)


def unflatten_levels(x: Node, shapes) -> list[Node]:
    """Inverse of ``flatten_levels`` given the per-level (H, W) shapes."""
    c = x.shape[0]
    out = []
    start = 0
    for h, w in shapes:
        stop = start + h * w
        out.append(_slice_positions(x, start, stop, c, h, w))
        start = stop
    return out


def _slice_positions(x: Node, start: int, stop: int, c: int, h: int, w: int) -> Node:
    xv = x.value
    val = xv[:, 0, start:stop].reshape(c, h, w).copy()

    def backward(g):
        gx = np.zeros_like(xv)
        gx[:, 0, start:stop] = g.reshape(c, -1)
        return (gx,)

    return _op("slice", val, (x,), backward)


def total(x: Node) -> Node:
    out = np.asarray(x.value.sum())
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return _op("sum", out, (x,), backward)


def weighted_total(x: Node, weights: np.ndarray) -> Node:
    """Scalar sum of ``x * weights`` for a fixed weight array."""
    weights = as_real(weights)
    out = np.asarray((x.value * weights).sum())

    def backward(g):
        return (g * weights,)

    return _op("weighted_sum", out, (x,), backward)


def add_scalars(terms: Sequence[tuple[float, Node]]) -> Node:
    """Weighted sum of scalar nodes."""
    nodes = tuple(n for _, n in terms)
    coefs = [c for c, _ in terms]
    out = np.asarray(sum(c * n.value for c, n in terms))

    def backward(g):
        return tuple(g * c for c in coefs)

    return _op("add_scalars", out, nodes, backward)
