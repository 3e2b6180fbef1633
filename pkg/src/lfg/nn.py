"""Minimal differentiable layer set on NCHW numpy arrays.

A Tensor wraps a float array plus an optional gradient buffer. Operations
record a reverse-mode tape; each op's backward rule is itself written in
terms of taped operations, so gradients of gradients (needed by the
critic's gradient penalty) come out analytically rather than by nesting
finite differences.

Masks are plain {0,1} float arrays of shape (batch, 1|C, H, W) and are
treated as non-differentiable constants of the step. Partial convolution
renormalizes each window by valid_pixels / unmasked_pixels, where the
valid count excludes zero padding; with an all-ones mask the factor is
exactly 1 everywhere and the op collapses to the standard convolution.

Storage is float32 by default with float64 accumulation in reductions.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

_TAPE_ON = True


@contextmanager
def no_grad():
    """Disable taping inside the block (pure inference)."""
    global _TAPE_ON
    prev = _TAPE_ON
    _TAPE_ON = False
    try:
        yield
    finally:
        _TAPE_ON = prev


class Tensor:
    """Array with optional grad buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None  # ndarray buffer, filled by backward()
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, rg={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __truediv__(self, other):
        return mul(self, pow_const(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), pow_const(self, -1.0))

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into each requiring leaf's .grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        for node, g in _run_backward(self, Tensor(grad), create_graph=False):
            if node.grad is None:
                node.grad = g.data.copy()
            else:
                node.grad = node.grad + g.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(parents) -> bool:
    return _TAPE_ON and any(p.requires_grad or p._vjp is not None for p in parents)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _needs_tape(parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _topo(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, seed: Tensor, create_graph: bool):
    """Yield (leaf, grad Tensor) pairs for every requires_grad leaf reached."""
    if seed.data.shape != root.data.shape:
        raise ValueError("gradient seed shape mismatch")
    order = _topo(root)
    grads: dict[int, Tensor] = {id(root): seed}
    global _TAPE_ON
    prev = _TAPE_ON
    _TAPE_ON = bool(create_graph)
    try:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                yield node, g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if not (parent.requires_grad or parent._vjp is not None):
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = pg if held is None else add(held, pg)
    finally:
        _TAPE_ON = prev


def grad(output: Tensor, inputs, create_graph: bool = False):
    """Return d(output)/d(input) for each input, zeros where no path.

    With create_graph=True the returned Tensors stay on the tape, so
    expressions built from them can be differentiated again.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise ValueError("grad() expects a scalar output")
    seed = Tensor(np.ones_like(output.data))
    found: dict[int, Tensor] = {}
    for node, g in _run_backward(output, seed, create_graph):
        held = found.get(id(node))
        found[id(node)] = g if held is None else add(held, g)
    return [found.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a.shape),
                            _unbroadcast(mul(g, a), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g):
        return (mul(mul(g, pow_const(a, p - 1.0)), Tensor(np.asarray(p, dtype=a.dtype))),)

    return _node(a.data ** p, (a,), vjp)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (mul(g, pow_const(a, -1.0)),))


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    if _needs_tape((a,)):
        out._parents = (a,)
        out._vjp = lambda g: (mul(g, out),)
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    in_shape = a.shape

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            kept = list(in_shape)
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in axes:
                kept[ax] = 1
            gd = reshape(gd, tuple(kept))
        elif axis is None and not keepdims:
            gd = reshape(gd, (1,) * len(in_shape))
        return (broadcast_to(gd, in_shape),)

    return _node(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _node(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _node(np.reshape(a.data, shape), (a,), lambda g: (reshape(g, in_shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def _swap_last(a: Tensor) -> Tensor:
    order = list(range(a.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return transpose(a, tuple(order))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_unbroadcast(matmul(g, _swap_last(b)), a.shape),
                _unbroadcast(matmul(_swap_last(a), g), b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), vjp)


def concat(a, b, axis: int = 1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ca = a.shape[axis]
    cb = b.shape[axis]

    def vjp(g):
        return (narrow(g, axis, 0, ca), narrow(g, axis, ca, cb))

    return _node(np.concatenate([a.data, b.data], axis=axis), (a, b), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    before = start
    after = a.shape[axis] - start - length

    def vjp(g):
        pads = []
        if before:
            sh = list(g.shape)
            sh[axis] = before
            pads.append(Tensor(np.zeros(sh, dtype=g.dtype)))
        pads.append(g)
        if after:
            sh = list(g.shape)
            sh[axis] = after
            pads.append(Tensor(np.zeros(sh, dtype=g.dtype)))
        out = pads[0]
        for piece in pads[1:]:
            out = concat(out, piece, axis=axis)
        return (out,)

    return _node(np.ascontiguousarray(a.data[tuple(idx)]), (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    passed = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, Tensor(passed)),))


# ----------------------------------------------------------------------
# im2col convolution
# ----------------------------------------------------------------------

def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DataError(f"convolution output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def _unfold_raw(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def _fold_raw(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    g6 = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += g6[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def unfold(x, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    x = as_tensor(x)
    x_shape = x.shape

    def vjp(g):
        return (fold(g, x_shape, kh, kw, stride, padding),)

    return _node(_unfold_raw(x.data, kh, kw, stride, padding), (x,), vjp)


def fold(cols, x_shape, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    cols = as_tensor(cols)

    def vjp(g):
        return (unfold(g, kh, kw, stride, padding),)

    return _node(_fold_raw(cols.data, x_shape, kh, kw, stride, padding), (cols,), vjp)


@dataclass
class ConvParams:
    """Kernel weights (out, in, kh, kw), bias (out,), stride, padding."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DataError("conv weight must be 4-D (out, in, kh, kw)")
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1 or self.stride < 1:
            raise DataError("kernel dims and stride must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]


def conv2d(x, p: ConvParams, weight: Tensor | None = None) -> Tensor:
    """Standard zero-padded cross-correlation; `weight` overrides p.weight
    (used by spectral normalization to inject the normalized kernel)."""
    x = as_tensor(x)
    w = weight if weight is not None else p.weight
    b_, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise DataError(f"conv2d channel mismatch: input {c}, kernel expects {cin}")
    ho, wo = conv_out_hw(h, wd, kh, kw, p.stride, p.padding)
    cols = unfold(x, kh, kw, p.stride, p.padding)          # (B, CK, L)
    ck = cin * kh * kw
    flat = reshape(transpose(cols, (1, 0, 2)), (ck, b_ * ho * wo))
    w2 = reshape(w, (cout, ck))
    out = matmul(w2, flat)                                  # one gemm
    out = transpose(reshape(out, (cout, b_, ho * wo)), (1, 0, 2))
    out = reshape(out, (b_, cout, ho, wo))
    if p.bias is not None:
        out = add(out, reshape(p.bias, (1, cout, 1, 1)))
    return out


# ----------------------------------------------------------------------
# partial convolution and mask update
# ----------------------------------------------------------------------

_VALID_CACHE: dict[tuple, np.ndarray] = {}


def _spatial_valid_counts(h, w, kh, kw, stride, padding) -> np.ndarray:
    """In-bounds pixel count of each window position, shape (1, 1, Ho, Wo)."""
    key = (h, w, kh, kw, stride, padding)
    hit = _VALID_CACHE.get(key)
    if hit is None:
        ones = np.ones((1, 1, h, w), dtype=np.float64)
        hit = _unfold_raw(ones, kh, kw, stride, padding).sum(axis=1, dtype=np.float64)
        ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
        hit = hit.reshape(1, 1, ho, wo)
        _VALID_CACHE[key] = hit
    return hit


def check_mask(m: np.ndarray):
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise DataError("mask must be binary {0,1}")


def mask_update(m: np.ndarray, kernel_hw, stride: int = 1, padding: int = 1) -> np.ndarray:
    """New mask is 1 wherever the window saw any unmasked pixel (dilation
    by the kernel footprint)."""
    check_mask(m)
    kh, kw = kernel_hw
    b, c, h, w = m.shape
    if c != 1:
        raise DataError("mask_update expects a single-channel mask")
    sums = _unfold_raw(m.astype(np.float64), kh, kw, stride, padding).sum(axis=1, dtype=np.float64)
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    return (sums.reshape(b, 1, ho, wo) > 0).astype(np.float32)


def _window_sum_1ch(m: np.ndarray, kh, kw, stride, padding) -> np.ndarray:
    """Per-window sum of a (B,1,H,W) mask, shape (B,1,Ho,Wo), float64."""
    b = m.shape[0]
    h, w = m.shape[2:]
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    sums = _unfold_raw(np.ascontiguousarray(m, dtype=np.float64),
                       kh, kw, stride, padding).sum(axis=1, dtype=np.float64)
    return sums.reshape(b, 1, ho, wo)


def partial_conv2d(x, m, p: ConvParams, weight: Tensor | None = None):
    """Mask-renormalized convolution (returns output tensor and new mask).

    Windows with no unmasked pixel output exactly 0; the new mask marks
    windows that saw at least one unmasked pixel. `m` is either a {0,1}
    array of shape (B,1,H,W) (broadcast over input channels) or
    (B,C,H,W), or a list of (mask, channel_count) groups covering the
    input channels in order (how the decoder passes per-branch masks).
    """
    x = as_tensor(x)
    b_, c, h, wd = x.shape
    w = weight if weight is not None else p.weight
    kh, kw = w.shape[2:]

    if isinstance(m, (list, tuple)):
        groups = [(np.asarray(g), int(n)) for g, n in m]
    else:
        m = np.asarray(m)
        if m.shape[0] != b_ or m.shape[2:] != (h, wd):
            raise DataError("mask dims must match input spatially")
        if m.shape[1] == 1:
            groups = [(m, c)]
        elif m.shape[1] == c:
            groups = [(m[:, i:i + 1], 1) for i in range(c)]
        else:
            raise DataError("mask channels must be 1 or match the input")
    if sum(n for _, n in groups) != c:
        raise DataError("mask channel groups must cover the input channels")

    sums = None
    for g, n in groups:
        check_mask(g)
        if g.shape != (b_, 1, h, wd):
            raise DataError("each mask group must be (B,1,H,W)")
        part = n * _window_sum_1ch(g, kh, kw, p.stride, p.padding)
        sums = part if sums is None else sums + part
    valid = c * _spatial_valid_counts(h, wd, kh, kw, p.stride, p.padding)
    ratio = np.divide(valid, sums, out=np.zeros_like(sums), where=sums > 0)
    new_mask = (sums > 0).astype(np.float32)

    if len(groups) == 1:
        m_mul = Tensor(groups[0][0].astype(x.dtype))  # broadcast over channels
    else:
        m_mul = Tensor(np.concatenate(
            [np.broadcast_to(g, (b_, n, h, wd)) for g, n in groups],
            axis=1).astype(x.dtype))
    xm = mul(x, m_mul)
    raw = conv2d(xm, ConvParams(p.weight, None, p.stride, p.padding), weight=w)
    out = mul(raw, Tensor(ratio.astype(x.dtype)))
    if p.bias is not None:
        out = add(out, reshape(p.bias, (1, p.out_channels, 1, 1)))
    out = mul(out, Tensor(new_mask.astype(x.dtype)))
    return out, new_mask


# ----------------------------------------------------------------------
# normalization, activations, resampling
# ----------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean=None, running_var=None,
               training: bool = True, eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel normalization. Train mode uses batch statistics and
    returns updated running stats; eval mode normalizes by the running
    stats. Returns (out, running_mean, running_var)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.size != c or beta.size != c:
        raise DataError(f"batch norm expects {c}-channel parameters")
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = tmean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        if running_mean is not None:
            running_mean = ((1 - momentum) * running_mean
                            + momentum * mu.data.reshape(-1)).astype(running_mean.dtype)
            running_var = ((1 - momentum) * running_var
                           + momentum * var.data.reshape(-1)).astype(running_var.dtype)
    else:
        if running_mean is None:
            raise DataError("eval-mode batch norm needs running statistics")
        mu = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype))
        var = Tensor(running_var.reshape(1, c, 1, 1).astype(x.dtype))
        xc = x - mu
    inv = pow_const(add(var, Tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    y = mul(xc, inv)
    y = mul(y, reshape(gamma, (1, c, 1, 1)))
    y = add(y, reshape(beta, (1, c, 1, 1)))
    return y, running_mean, running_var


class BatchNorm2d:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out, rm, rv = batch_norm(x, self.gamma, self.beta,
                                 self.running_mean, self.running_var,
                                 training=training, eps=self.eps,
                                 momentum=self.momentum)
        if training:
            self.running_mean, self.running_var = rm, rv
        return out

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def relu(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, Tensor((x.data > 0).astype(x.dtype)))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, x.dtype.type(1), x.dtype.type(slope))
    return mul(x, Tensor(factor))


def activation(x, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "none":
        return as_tensor(x)
    raise DataError(f"unknown activation kind: {kind}")


def upsample2x(x) -> Tensor:
    """Nearest-neighbor doubling of both spatial dims."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    y = reshape(x, (b, c, h, 1, w, 1))
    y = broadcast_to(y, (b, c, h, 2, w, 2))
    return reshape(y, (b, c, 2 * h, 2 * w))


def upsample2x_mask(m: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(m, 2, axis=2), 2, axis=3)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DataError("concat requires equal batch and spatial dims")
    return concat(a, b, axis=1)


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list = field(default_factory=list)

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def grad_check(fn, inputs, h: float = 1e-3) -> GradCheckReport:
    """Central finite differences vs analytic gradients for a scalar fn.

    Inputs are promoted to float64 leaves; relative error is
    |a - n| / max(1, |a|, |n|) elementwise.
    """
    leaves = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t,
                                dtype=np.float64), requires_grad=True)
              for t in inputs]
    out = fn(*leaves)
    analytic = [g.data for g in grad(out, leaves)]

    worst = 0.0
    per_input = []
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = fn(*leaves).item()
            flat[i] = keep - h
            lo = fn(*leaves).item()
            flat[i] = keep
            num[i] = (hi - lo) / (2 * h)
        num = num.reshape(leaf.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        err = float(np.max(np.abs(ana - num) / denom)) if ana.size else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(max_rel_err=worst, per_input=per_input)
