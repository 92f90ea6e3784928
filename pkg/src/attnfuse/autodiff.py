"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding the forward value plus one vector-Jacobian
closure per parent. Nodes whose parents all have requires_grad=False are
constant-folded (no graph recorded), so frozen subnetworks cost nothing in
the backward pass. All arithmetic is float64; accumulation order is fixed,
so repeated runs are bitwise identical.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ShapeError, StateError

Array = np.ndarray


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _node(data: Array, parents, vjps) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        return out

    def backward(self, upstream=None) -> None:
        """Accumulate gradients of this node into every reachable leaf.

        Raises StateError if no forward pass was recorded for this node
        (leaves and constant-folded results have no graph), or if the
        graph was already consumed by a previous backward call.
        """
        if not self._parents:
            raise StateError("no recorded forward pass: tensor has no graph")
        if upstream is None:
            upstream = np.ones_like(self.data)
        else:
            upstream = _as_array(upstream)
            if upstream.shape != self.data.shape:
                raise ShapeError(
                    f"upstream gradient shape {upstream.shape} != value shape {self.data.shape}"
                )

        order = self._toposort()
        grads: dict[int, Array] = {id(self): upstream}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                if parent._parents == ():
                    parent.grad = contrib if parent.grad is None else parent.grad + contrib
                else:
                    key = id(parent)
                    grads[key] = contrib if key not in grads else grads[key] + contrib
            # release the subgraph so a second backward fails loudly
            node._parents = ()
            node._vjps = ()

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return Tensor._node(y, (x,), (lambda g: g * y * (1.0 - y),))


def clamp01(x) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > 0.0) & (x.data < 1.0)
    return Tensor._node(np.clip(x.data, 0.0, 1.0), (x,), (lambda g: g * inside,))


def sigma_product(vx, vy) -> Tensor:
    """sqrt(max(vx,0) * max(vy,0)), the sigma_x * sigma_y term of windowed
    structural similarity. The backward zeroes the cusp where either clamped
    variance is zero (subgradient choice; keeps binary-mask targets finite).
    """
    vx, vy = as_tensor(vx), as_tensor(vy)
    px = np.maximum(vx.data, 0.0)
    py = np.maximum(vy.data, 0.0)
    s = np.sqrt(px * py)
    safe = s > 0.0
    inv = np.where(safe, 0.5 / np.where(safe, s, 1.0), 0.0)

    def g_vx(g):
        return np.where((vx.data > 0.0) & safe, g * py * inv, 0.0)

    def g_vy(g):
        return np.where((vy.data > 0.0) & safe, g * px * inv, 0.0)

    return Tensor._node(s, (vx, vy), (g_vx, g_vy))


# -- reductions ---------------------------------------------------------------


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return Tensor._node(
        np.asarray(x.data.mean()), (x,), (lambda g: np.full(x.data.shape, float(g) / n),)
    )


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.asarray(x.data.sum()), (x,), (lambda g: np.full(x.data.shape, float(g)),))


def global_avg_pool(x) -> Tensor:
    """(C,H,W) -> (C,) spatial mean."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    return Tensor._node(
        x.data.mean(axis=(1, 2)),
        (x,),
        (lambda g: np.broadcast_to(g[:, None, None], (c, h, w)) / (h * w),),
    )


def channel_mean(x) -> Tensor:
    """(C,H,W) -> (1,H,W)."""
    x = as_tensor(x)
    c = x.data.shape[0]
    return Tensor._node(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        (lambda g: np.broadcast_to(g / c, x.data.shape).copy(),),
    )


def channel_max(x) -> Tensor:
    """(C,H,W) -> (1,H,W); gradient routes to the first maximal channel."""
    x = as_tensor(x)
    idx = x.data.argmax(axis=0)
    out = np.take_along_axis(x.data, idx[None], axis=0)

    def vjp(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx[None], g, axis=0)
        return buf

    return Tensor._node(out, (x,), (vjp,))


# -- structure ops -------------------------------------------------------------


def concat_channels(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offs = np.cumsum([0] + sizes)

    def make_vjp(i):
        return lambda g: g[offs[i]:offs[i + 1]]

    return Tensor._node(
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return Tensor._node(x.data.reshape(shape), (x,), (lambda g: g.reshape(old),))


def linear(v, w, b=None) -> Tensor:
    """w @ v (+ b) for a vector v: w is (out, in)."""
    v, w = as_tensor(v), as_tensor(w)
    out = w.data @ v.data
    parents = [v, w]
    vjps = [lambda g: w.data.T @ g, lambda g: np.outer(g, v.data)]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)
        vjps.append(lambda g: g)
    return Tensor._node(out, tuple(parents), tuple(vjps))


# -- convolution ---------------------------------------------------------------


def _same_pad(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernels, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation: x (C,H,W), kernels (Co,C,kh,kw) -> (Co,H',W').

    `same` zero-pads so H' = ceil(H/stride); `valid` keeps full-support
    positions only.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects (C,H,W) input and (Co,C,kh,kw) kernels")
    c, h, w = x.data.shape
    co, ci, kh, kw = kernels.data.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError("input smaller than kernel in valid mode")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    if pt or pb or pl or pr:
        xp = np.zeros((c, h + pt + pb, w + pl + pr))
        xp[:, pt:pt + h, pl:pl + w] = x.data
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    out = np.tensordot(kernels.data, windows, axes=([1, 2, 3], [0, 3, 4]))

    parents = [x, kernels]

    def g_x(g):
        cols = np.tensordot(kernels.data, g, axes=([0], [0]))  # (C,kh,kw,oh,ow)
        buf = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                buf[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols[:, ki, kj]
        return buf[:, pt:pt + h, pl:pl + w]

    def g_k(g):
        return np.tensordot(g, windows, axes=([1, 2], [1, 2]))

    vjps = [g_x, g_k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (co,):
            raise ShapeError(f"bias shape {bias.data.shape} != ({co},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(1, 2)))
    return Tensor._node(out, tuple(parents), tuple(vjps))


# -- resampling ----------------------------------------------------------------


@lru_cache(maxsize=256)
def resize_weights(n_out: int, n_in: int) -> Array:
    """Row-stochastic (n_out, n_in) linear-interpolation matrix with sample
    centers at half-pixel positions: src = (dst + 0.5) * n_in/n_out - 0.5,
    clamped to the valid range. Cached; callers must not mutate the result.
    """
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """(C,H,W) -> (C,out_h,out_w) via separable half-pixel-center interpolation."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    mh = resize_weights(out_h, h)
    mw = resize_weights(out_w, w)
    tmp = np.tensordot(mh, x.data, axes=([1], [1]))        # (oh, C, W)
    out = np.tensordot(tmp, mw, axes=([2], [1]))           # (oh, C, ow)
    out = out.transpose(1, 0, 2)

    def vjp(g):
        gt = g.transpose(1, 0, 2)                          # (oh, C, ow)
        gtmp = np.tensordot(gt, mw, axes=([2], [0]))       # (oh, C, W)
        gx = np.tensordot(mh, gtmp, axes=([0], [0]))       # (H, C, W) via mh.T
        return gx.transpose(1, 0, 2)

    return Tensor._node(out, (x,), (vjp,))


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return Tensor._node(x.data.copy(), (x,), (lambda g: g,))
    _, h, w = x.data.shape
    return bilinear_resize(x, h * factor, w * factor)


def laplacian2d(x) -> Tensor:
    """Five-point second-difference stencil, valid support: (H,W) -> (H-2,W-2).

    Summed as (up+down) + (left+right) - 4*center, which is exact (all-zero
    output) for constant and dyadic-affine inputs.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"laplacian expects a 2-D image, got shape {x.data.shape}")
    h, w = x.data.shape
    if h < 3 or w < 3:
        raise ShapeError(f"image must be at least 3x3, got {h}x{w}")
    d = x.data
    out = (d[:-2, 1:-1] + d[2:, 1:-1]) + (d[1:-1, :-2] + d[1:-1, 2:]) - 4.0 * d[1:-1, 1:-1]

    def vjp(g):
        buf = np.zeros((h, w))
        buf[0:h - 2, 1:w - 1] += g
        buf[2:h, 1:w - 1] += g
        buf[1:h - 1, 0:w - 2] += g
        buf[1:h - 1, 2:w] += g
        buf[1:h - 1, 1:w - 1] -= 4.0 * g
        return buf

    return Tensor._node(out, (x,), (vjp,))


def downsample2_even(x) -> Tensor:
    """2x2 mean pooling; requires even spatial dims."""
    x = as_tensor(x)
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"even spatial dims required, got {h}x{w}")
    out = 0.25 * (
        x.data[:, 0::2, 0::2] + x.data[:, 1::2, 0::2] + x.data[:, 0::2, 1::2] + x.data[:, 1::2, 1::2]
    )

    def vjp(g):
        buf = np.empty_like(x.data)
        q = 0.25 * g
        buf[:, 0::2, 0::2] = q
        buf[:, 1::2, 0::2] = q
        buf[:, 0::2, 1::2] = q
        buf[:, 1::2, 1::2] = q
        return buf

    return Tensor._node(out, (x,), (vjp,))
