"""Dense-tensor engine with tape-based reverse-mode automatic differentiation.

Everything is float64 and CPU-only.  Each differentiable op records a
closure on the output tensor; ``backward`` on a scalar replays the tape in
reverse topological order.  Correctness over speed: the heavy ops (conv3d,
warp, trilinear upsampling) are vectorised with numpy but there is no graph
optimisation of any kind.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient and tape hook."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape ---------------------------------------------------------------

    def backward(self):
        """Populate grads of every reachable tensor; self must be scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mul(sum_all(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor):
    topo, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for prev in node._prev:
            if id(prev) not in seen:
                stack.append((prev, False))
    return topo


def _accum(t: Tensor, g: np.ndarray):
    # Intermediate nodes need grads too so the chain can continue upstream.
    if t.requires_grad or t._prev:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data, prev, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._prev for p in prev):
        out._prev = tuple(prev)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / np.sqrt(a.data))

    return _make(out_data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    factor = np.where(a.data >= 0.0, 1.0, slope)
    out_data = a.data * factor

    def backward(g):
        _accum(a, g * factor)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split positive/negative for numerical stability
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


# -- shape / reduction ------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.array(a.data.sum())

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] += g
        _accum(a, ga)

    return _make(out_data, (a,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two rank-5 tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat shapes incompatible: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _make(out_data, (a, b), backward)


# -- network primitives -----------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a (batch, features) matrix; weight is (out, in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        _accum(bias, g.sum(axis=0))

    return _make(out_data, (x, weight, bias), backward)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution (cross-correlation) over a (B,C,D,H,W) tensor."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(
            f"conv3d expects rank-5 input and kernel, got {x.shape} and {kernel.shape}")
    B, C, D, H, W = x.shape
    Co, Ci, kd, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if padding < 0:
        raise ValueError("conv3d padding must be >= 0")
    s = int(stride)
    pad = ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    # tensordot goes through BLAS; einsum on the strided view is much slower
    out_data = np.tensordot(win, kernel.data,
                            axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({Co},)")
        out_data = out_data + bias.data[None, :, None, None, None]
    Do, Ho, Wo = out_data.shape[2:]

    def backward(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        _accum(kernel, gk)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
        # one contraction for all taps, then 27 cheap slice-adds to scatter
        gcol = np.tensordot(g, kernel.data, axes=([1], [0]))  # b d h w c i j l
        gxp = np.zeros_like(xp)
        for i, j, l in itertools.product(range(kd), range(kh), range(kw)):
            gxp[:, :, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s] += \
                gcol[..., i, j, l].transpose(0, 4, 1, 2, 3)
        if padding:
            gxp = gxp[:, :, padding:padding + D, padding:padding + H,
                      padding:padding + W]
        _accum(x, gxp)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, inputs, backward)


def avg_pool3d(x: Tensor, window: int = 2) -> Tensor:
    x = _as_tensor(x)
    B, C, D, H, W = x.shape
    w = int(window)
    if D % w or H % w or W % w:
        raise ShapeError(
            f"avg_pool3d: spatial dims {(D, H, W)} not divisible by window {w}")
    r = x.data.reshape(B, C, D // w, w, H // w, w, W // w, w)
    out_data = r.mean(axis=(3, 5, 7))

    def backward(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None, :, None] / w ** 3,
            (B, C, D // w, w, H // w, w, W // w, w))
        _accum(x, gx.reshape(B, C, D, H, W))

    return _make(out_data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions, returning (batch, channel)."""
    x = _as_tensor(x)
    B, C, D, H, W = x.shape
    n = D * H * W
    out_data = x.data.reshape(B, C, n).mean(axis=2)

    def backward(g):
        _accum(x, np.broadcast_to(
            g[:, :, None, None, None] / n, x.shape).copy())

    return _make(out_data, (x,), backward)


def _upsample_axis_coords(n: int, factor: int):
    """Source indices/weights for 1D linear upsampling, align-corners=false."""
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.clip(np.floor(src).astype(np.int64), 0, max(n - 2, 0))
    w1 = src - i0
    if n == 1:
        w1 = np.zeros_like(w1)
    return i0, np.minimum(i0 + 1, n - 1), 1.0 - w1, w1


def upsample_trilinear(x: Tensor, factor: int) -> Tensor:
    """Trilinear upsampling by an integer factor, align-corners=false."""
    x = _as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be >= 1")
    if f == 1:
        return add(x, 0.0)  # identity that still participates in the tape
    passes = []
    out = x.data
    for axis in (2, 3, 4):
        n = out.shape[axis]
        i0, i1, w0, w1 = _upsample_axis_coords(n, f)
        shape = [1] * out.ndim
        shape[axis] = len(i0)
        w0b, w1b = w0.reshape(shape), w1.reshape(shape)
        out = np.take(out, i0, axis=axis) * w0b + np.take(out, i1, axis=axis) * w1b
        passes.append((axis, n, i0, i1, w0b, w1b))

    def backward(g):
        for axis, n, i0, i1, w0b, w1b in reversed(passes):
            gm = np.moveaxis(g, axis, 0)
            gin = np.zeros((n,) + gm.shape[1:])
            np.add.at(gin, i0, np.moveaxis(g * w0b, axis, 0))
            np.add.at(gin, i1, np.moveaxis(g * w1b, axis, 0))
            g = np.moveaxis(gin, 0, axis)
        _accum(x, g)

    return _make(out, (x,), backward)


# -- spatial-transformer warp ----------------------------------------------


def warp_array(image: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Non-differentiable trilinear warp of a (B,C,D,H,W) array.

    ``disp`` is (B,3,D,H,W) with channels (dz,dy,dx) in voxel units; samples
    are taken at x + u(x) with border clamping.
    """
    out, _ = _warp_forward(image, disp)
    return out


def _warp_forward(image: np.ndarray, disp: np.ndarray):
    B, C, D, H, W = image.shape
    gz, gy, gx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                             indexing="ij")
    coords = [gz[None] + disp[:, 0], gy[None] + disp[:, 1], gx[None] + disp[:, 2]]
    dims = (D, H, W)
    idx0, idx1, frac, interior = [], [], [], []
    for c, n in zip(coords, dims):
        interior.append((c > 0.0) & (c < n - 1.0))
        cc = np.clip(c, 0.0, n - 1.0)
        i0 = np.clip(np.floor(cc).astype(np.int64), 0, max(n - 2, 0))
        idx0.append(i0)
        idx1.append(np.minimum(i0 + 1, n - 1))
        f = cc - i0
        if n == 1:
            f = np.zeros_like(f)
        frac.append(f)
    imgf = image.reshape(B, C, -1)
    bb = np.arange(B)[:, None, None, None]
    out_t = np.zeros((B, D, H, W, C))
    corners = []
    for bits in itertools.product((0, 1), repeat=3):
        zi = idx1[0] if bits[0] else idx0[0]
        yi = idx1[1] if bits[1] else idx0[1]
        xi = idx1[2] if bits[2] else idx0[2]
        sp = (zi * H + yi) * W + xi
        val = imgf[bb, :, sp]  # (B,D,H,W,C)
        w = ((frac[0] if bits[0] else 1.0 - frac[0])
             * (frac[1] if bits[1] else 1.0 - frac[1])
             * (frac[2] if bits[2] else 1.0 - frac[2]))
        out_t += w[..., None] * val
        corners.append((bits, sp, val, w))
    ctx = (B, C, D, H, W, frac, interior, corners, bb)
    return np.moveaxis(out_t, -1, 1), ctx


def warp(image: Tensor, disp: Tensor) -> Tensor:
    """Differentiable spatial-transformer warp: out(x) = image(x + disp(x))."""
    image, disp = _as_tensor(image), _as_tensor(disp)
    if image.data.ndim != 5 or disp.data.ndim != 5 or disp.shape[1] != 3:
        raise ShapeError(
            f"warp expects rank-5 image and (B,3,...) field, got {image.shape} "
            f"and {disp.shape}")
    if image.shape[2:] != disp.shape[2:] or image.shape[0] != disp.shape[0]:
        raise ShapeError(
            f"warp: image {image.shape} and field {disp.shape} grids differ")
    out_data, ctx = _warp_forward(image.data, disp.data)

    def backward(g):
        B, C, D, H, W, frac, interior, corners, bb = ctx
        g_t = np.moveaxis(g, 1, -1)  # (B,D,H,W,C)
        gimg = np.zeros((B, D * H * W, C))
        gcoord = [np.zeros((B, D, H, W)) for _ in range(3)]
        for bits, sp, val, w in corners:
            np.add.at(gimg, (bb, sp), w[..., None] * g_t)
            # d(weight)/d(frac_axis): flip the axis factor to +/-1
            for axis in range(3):
                others = 1.0
                for a2 in range(3):
                    if a2 != axis:
                        others = others * (frac[a2] if bits[a2] else 1.0 - frac[a2])
                sign = 1.0 if bits[axis] else -1.0
                gcoord[axis] += sign * others * (g_t * val).sum(axis=-1)
        _accum(image, np.moveaxis(gimg.reshape(B, D, H, W, C), -1, 1))
        gdisp = np.stack(
            [gcoord[a] * interior[a] for a in range(3)], axis=1)
        _accum(disp, gdisp)

    return _make(out_data, (image, disp), backward)


def box_filter_sum(x: Tensor, n: int) -> Tensor:
    """Zero-padded sum over the n^3 window centred at each voxel (n odd).

    Linear and self-adjoint, so the backward pass is the same filter applied
    to the incoming gradient.
    """
    from scipy.ndimage import uniform_filter

    x = _as_tensor(x)
    if n % 2 == 0 or n < 1:
        raise ValueError(f"box filter size must be odd and positive, got {n}")
    if x.data.ndim != 5:
        raise ShapeError(f"box_filter_sum expects rank-5, got {x.shape}")
    if any(n > d for d in x.shape[2:]):
        raise ShapeError(
            f"box filter size {n} exceeds spatial dims {x.shape[2:]}")
    size = (1, 1, n, n, n)
    out_data = uniform_filter(x.data, size=size, mode="constant") * float(n ** 3)

    def backward(g):
        _accum(x, uniform_filter(g, size=size, mode="constant") * float(n ** 3))

    return _make(out_data, (x,), backward)
