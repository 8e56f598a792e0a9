"""Minimal reverse-mode automatic differentiation over a fixed op vocabulary.

Arrays are wrapped in `Tensor` nodes; ops build a DAG whose backward pass
runs in reverse topological order. The vocabulary is exactly what the
denoiser and translator need: 3x3 same-padding convolution, dense layers,
SiLU/sigmoid nonlinearities, 2x average-pool down / nearest-neighbour up,
broadcast add, elementwise arithmetic and reductions.

Feature maps are channels-last (N, H, W, C), which keeps every convolution a
single contiguous matmul plus strided tap accumulation. Everything works in
whatever dtype the arrays carry (float32 in production, float64 in
gradient-check tests).
"""

import numpy as np


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def _accum(self, g):
        # grads are never mutated in place, so aliasing is safe
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Backpropagate from this (scalar) node."""
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(1.0, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def leaf(data, requires_grad=False):
    return Tensor(np.asarray(data), requires_grad=requires_grad)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(g, shape):
    """Reduce gradient g to `shape` by summing over broadcast axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(-_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bw(g):
        if a.requires_grad:
            a._accum(g * s)

    return Tensor(a.data * s, (a,), bw)


def _sigmoid(x):
    # overflow-safe in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def bw(g):
        if a.requires_grad:
            a._accum(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return Tensor(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (sig * (1.0 - sig)))

    return Tensor(sig, (a,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding stride-1 convolution (cross-correlation).

    Layouts: x (N, H, W, C), w (k, k, C, Co), b (Co,). Implemented as one
    matmul on the zero-padded input against all kernel taps at once followed
    by strided accumulation of the tap planes; the backward pass reuses the
    same padded buffers, so no im2col transposes are ever materialized.
    """
    n, h, wd, c = x.data.shape
    kh, kw, ci, co = w.data.shape
    p = kh // 2
    taps = kh * kw
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    hp, wp = h + 2 * p, wd + 2 * p
    xf = xp.reshape(-1, c)
    w_all = np.ascontiguousarray(w.data.reshape(taps, c, co).transpose(1, 0, 2)).reshape(c, taps * co)
    z = (xf @ w_all).reshape(n, hp, wp, taps, co)
    out_data = np.zeros((n, h, wd, co), dtype=x.data.dtype)
    for tap in range(taps):
        dy, dx = divmod(tap, kw)
        out_data += z[:, dy:dy + h, dx:dx + wd, tap, :]
    if b is not None:
        out_data += b.data

    def bw(g):
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 1, 2)))
        dz = np.zeros((n, hp, wp, taps, co), dtype=g.dtype)
        for tap in range(taps):
            dy, dx = divmod(tap, kw)
            dz[:, dy:dy + h, dx:dx + wd, tap, :] = g
        dzf = dz.reshape(-1, taps * co)
        if w.requires_grad:
            dw_all = xf.T @ dzf
            w._accum(np.ascontiguousarray(
                dw_all.reshape(c, taps, co).transpose(1, 0, 2)).reshape(w.data.shape))
        if x.requires_grad:
            dxp = (dzf @ w_all.T).reshape(n, hp, wp, c)
            x._accum(np.ascontiguousarray(dxp[:, p:p + h, p:p + wd, :]))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out_data, parents, bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, D) @ w (D, M) + b (M,)."""
    out_data = x.data @ w.data + b.data

    def bw(g):
        if b.requires_grad:
            b._accum(g.sum(axis=0))
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if x.requires_grad:
            x._accum(g @ w.data.T)

    return Tensor(out_data, (x, w, b), bw)


def avg_pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {x.data.shape}")
    out_data = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        if x.requires_grad:
            quarter = (g * x.data.dtype.type(0.25))[:, :, None, :, None, :]
            gx = np.broadcast_to(quarter, (n, h // 2, 2, w // 2, 2, c)).reshape(n, h, w, c)
            x._accum(np.ascontiguousarray(gx))

    return Tensor(out_data, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        if x.requires_grad:
            x._accum(g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor(out_data, (x,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), bw)


def mean(a: Tensor) -> Tensor:
    inv = a.data.dtype.type(1.0 / a.data.size)

    def bw(g):
        if a.requires_grad:
            a._accum(np.full(a.data.shape, g * inv, dtype=a.data.dtype))

    return Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(np.full(a.data.shape, g, dtype=a.data.dtype))

    return Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw)


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return Tensor(out_data, (a,), bw)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data + a.data))

    return Tensor(out_data, (a,), bw)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return mean(square(sub(pred, leaf(target))))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return mean(abs_(sub(pred, leaf(target))))


def dot_with_const(a: Tensor, g_const: np.ndarray) -> Tensor:
    """sum(a * g_const) with g_const held constant; backward seeds a with
    g_const. Used to inject externally computed gradients into the graph."""
    return sum_all(mul(a, leaf(np.asarray(g_const, dtype=a.data.dtype))))
