"""Dense float tensors plus the reverse-mode autodiff ops the network needs.

Compute dtype is float32; float64 exists for gradient-check builds. Every op
validates that its output (and every gradient it later produces) is finite and
raises NumericsError otherwise, so NaN/Inf never propagates silently.

Recording model: ops run eagerly on numpy arrays. While a GradTape is active,
each op appends one node holding its inputs' node ids and a backward closure.
The append order is already a topological order, so the backward pass is a
single reverse sweep that visits each node exactly once.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import ConfigError, NumericsError, ShapeError, UnsupportedOpError

_FLOATS = (np.float32, np.float64)

# Ops with registered adjoints. _record refuses anything else.
REGISTERED_OPS = frozenset({
    "leaf", "add", "sub", "mul", "div", "scale", "matmul", "transpose",
    "reshape", "concat", "sum", "relu", "gelu", "softmax_lastdim",
    "layer_norm", "group_norm_2d", "conv2d", "bilinear_resize",
    "cross_entropy_logits",
})


def _ensure_finite(arr, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced in {where}")


class Tensor:
    """Immutable dense row-major array, optionally tied to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: "GradTape | None" = None,
                 node: int | None = None):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap an array-like as a constant Tensor (f32 unless already f64)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(dtype if dtype is not None else np.float32)
    elif dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    _ensure_finite(arr, "as_tensor")
    return Tensor(arr)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


_ACTIVE: "GradTape | None" = None  # one logical training thread owns the tape


class GradTape:
    """Append-only operation record; use as a context manager while recording."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("another GradTape is already recording")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, op, inputs, backward) -> int:
        self._nodes.append(_Node(op, inputs, backward))
        return len(self._nodes) - 1

    def watch(self, x) -> Tensor:
        """Register an array as a leaf whose gradient backward() will report."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.dtype not in _FLOATS:
            raise ShapeError("only float tensors can be watched")
        return Tensor(arr, self, self._push("leaf", (), None))

    def gradients(self, loss: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar loss for each watched tensor (zeros if unused)."""
        grads = backward(self, loss)
        out = []
        for t in wrt:
            if t.tape is not self or t.node is None:
                raise ShapeError("gradient requested for a tensor not on this tape")
            out.append(grads.get(t.node, np.zeros_like(t.data)))
        return out


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn) -> Tensor:
    if op not in REGISTERED_OPS:
        raise UnsupportedOpError(f"op '{op}' has no registered adjoint")
    _ensure_finite(out_data, op)
    tape = _ACTIVE
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if (t.tape is tape and t.node is not None) else None
                for t in inputs)
    if all(i is None for i in ids):
        return Tensor(out_data)
    return Tensor(out_data, tape, tape._push(op, ids, backward_fn))


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns node id -> gradient.

    Leaf nodes keep their accumulated gradients in the result; interior nodes
    are consumed as the sweep passes them.
    """
    if loss.tape is not tape or loss.node is None:
        raise ShapeError("loss tensor was not recorded on this tape")
    if loss.data.shape != ():
        raise ShapeError("loss must be a scalar")
    nodes = tape._nodes
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.data.dtype)}
    for nid in range(loss.node, -1, -1):
        node = nodes[nid]
        if node.backward is None:  # leaf: keep its gradient
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        parts = node.backward(g)
        for iid, part in zip(node.inputs, parts):
            if iid is None or part is None:
                continue
            _ensure_finite(part, f"backward:{node.op}")
            acc = grads.get(iid)
            grads[iid] = part if acc is None else acc + part
    return {nid: g for nid, g in grads.items() if nodes[nid].backward is None}


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor):
        a = as_tensor(a, b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = a.data * a.data.dtype.type(s)
    return _record("scale", out, (a,), lambda g: (g * a.data.dtype.type(s),))


def matmul(a, b) -> Tensor:
    """Matrix product with an optional broadcast leading batch axis."""
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), bwd)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.dtype for t in ts}) != 1:
        raise ShapeError("concat operands must share a dtype")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", out, tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return _record("sum", np.asarray(out), (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0
    return _record("relu", out, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, not tanh)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0, dtype=x.dtype)))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _record("gelu", out, (a,), bwd)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax_lastdim", y, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma = _pair(x, gamma)
    beta = as_tensor(beta, x.dtype)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("gamma/beta must match the normalized axis extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xn = xc * inv
    out = xn * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        t = g * gamma.data
        m1 = t.mean(axis=-1, keepdims=True)
        m2 = (t * xn).mean(axis=-1, keepdims=True)
        dx = inv * (t - m1 - xn * m2)
        return dx, (g * xn).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", out, (x, gamma, beta), bwd)


def group_norm_2d(x, gamma, beta, groups: int, eps: float = 1e-6) -> Tensor:
    """Group normalization over a (C, H, W) map with per-channel affine."""
    x, gamma = _pair(x, gamma)
    beta = as_tensor(beta, x.dtype)
    if x.data.ndim != 3:
        raise ShapeError("group_norm_2d expects a (C, H, W) tensor")
    c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must have one entry per channel")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xn = (xc * inv).reshape(c, h, w)
    out = xn * gamma.data[:, None, None] + beta.data[:, None, None]

    def bwd(g):
        t = (g * gamma.data[:, None, None]).reshape(groups, -1)
        xng = xn.reshape(groups, -1)
        m1 = t.mean(axis=1, keepdims=True)
        m2 = (t * xng).mean(axis=1, keepdims=True)
        dx = (inv * (t - m1 - xng * m2)).reshape(c, h, w)
        return dx, (g * xn).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _record("group_norm_2d", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution

def _conv_windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :oh, :ow]  # (C, oh, ow, k, k)


def _im2col(xp, k, stride, oh, ow, groups):
    c = xp.shape[0]
    win = _conv_windows(xp, k, stride, oh, ow)
    win = win.transpose(0, 3, 4, 1, 2)  # (C, k, k, oh, ow)
    return win.reshape(groups, (c // groups) * k * k, oh * ow)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D correlation of a (C,H,W) map with zero padding and channel groups."""
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x:(C,H,W) and w:(Cout,Cin/g,k,k)")
    c, h, wd = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c % groups != 0 or cout % groups != 0:
        raise ConfigError(f"channels ({c} in, {cout} out) not divisible by groups {groups}")
    if cin_g != c // groups:
        raise ShapeError(f"weight expects {cin_g * groups} input channels, got {c}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError("input smaller than kernel after padding")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, oh, ow, groups)
    wg = w.data.reshape(groups, cout // groups, cin_g * k * k)
    out = np.matmul(wg, cols).reshape(cout, oh, ow)
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.shape != (cout,):
            raise ShapeError("bias must have one entry per output channel")
        out = out + b.data[:, None, None]

    def bwd(g):
        gg = g.reshape(groups, cout // groups, oh * ow)
        cols_b = _im2col(xp, k, stride, oh, ow, groups)
        dw = np.matmul(gg, cols_b.transpose(0, 2, 1)).reshape(w.shape)
        dcols = np.matmul(wg.transpose(0, 2, 1), gg)
        d6 = dcols.reshape(c, k, k, oh, ow)
        dxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                dxp[:, u:u + stride * oh:stride, v:v + stride * ow:stride] += d6[:, u, v]
        dx = dxp[:, pad:pad + h, pad:pad + wd]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, align-corners disabled)

def _resize_axis(src: int, dst: int, dtype):
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = (coords - i0).astype(dtype)
    return i0, i1, frac


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resample a (C,H,W) map; identity (same object) when sizes match."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("bilinear_resize expects a (C, H, W) tensor")
    if out_h < 1 or out_w < 1:
        raise ShapeError("target extents must be positive")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    y0, y1, fy = _resize_axis(h, out_h, x.data.dtype)
    x0, x1, fx = _resize_axis(w, out_w, x.data.dtype)

    rows = x.data[:, y0, :] * (1 - fy)[None, :, None] + x.data[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx

    def bwd(g):
        # scatter along width, then height; add.at handles duplicate indices
        tmp_w = np.zeros((w, c, out_h), dtype=g.dtype)
        np.add.at(tmp_w, x0, (g * (1 - fx)).transpose(2, 0, 1))
        np.add.at(tmp_w, x1, (g * fx).transpose(2, 0, 1))
        drows = tmp_w.transpose(1, 2, 0)  # (C, out_h, W)
        tmp_h = np.zeros((h, c, w), dtype=g.dtype)
        np.add.at(tmp_h, y0, (drows * (1 - fy)[None, :, None]).transpose(1, 0, 2))
        np.add.at(tmp_h, y1, (drows * fy[None, :, None]).transpose(1, 0, 2))
        return (tmp_h.transpose(1, 0, 2),)

    return _record("bilinear_resize", out.astype(x.data.dtype, copy=False), (x,), bwd)


# ---------------------------------------------------------------------------
# classification loss

def cross_entropy_logits(logits, target: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean -log softmax(logits)[target] over pixels not equal to ignore_index.

    logits: (K, H, W); target: (H, W) integer grid. All pixels ignored gives a
    zero loss (and a zero gradient).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 3:
        raise ShapeError("cross_entropy expects (K, H, W) logits")
    k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {(h, w)}")
    scored = target != ignore_index
    if np.any((target < 0) | ((target >= k) & ~np.equal(target, ignore_index))):
        raise ShapeError("target contains class indices outside [0, K)")
    n = int(scored.sum())
    z = logits.data
    m = z.max(axis=0)
    e = np.exp(z - m)
    s = e.sum(axis=0)
    p = e / s
    tc = np.where(scored, target, 0)
    zt = np.take_along_axis(z, tc[None], axis=0)[0]
    nll = (m + np.log(s)) - zt
    if n == 0:
        loss = np.asarray(0.0, dtype=z.dtype)
    else:
        loss = np.asarray(nll[scored].sum() / n, dtype=z.dtype)

    def bwd(g):
        if n == 0:
            return (np.zeros_like(z),)
        dz = p.copy()
        hh, ww = np.nonzero(scored)
        dz[tc[hh, ww], hh, ww] -= 1.0
        dz *= scored * (float(g) / n)
        return (dz.astype(z.dtype, copy=False),)

    return _record("cross_entropy_logits", loss, (logits,), bwd)
