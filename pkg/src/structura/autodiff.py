"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tape-based: every tracked op records its parents and a vector-Jacobian
closure; Tensor.backward() walks the graph in reverse topological order.
Everything is float64, which keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_STACK = [True]
_DTYPE_STACK = [np.float64]


@contextmanager
def no_grad():
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


@contextmanager
def use_dtype(dtype):
    """Run tensor creation under a different float width.

    float64 is the default (finite-difference checks depend on it); training
    loops switch to float32 for memory-bandwidth-bound throughput.
    """
    _DTYPE_STACK.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


def default_dtype() -> np.dtype:
    return _DTYPE_STACK[-1]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contribution = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(ensure_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(ensure_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(ensure_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._vjps = vjps
    return out


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = ensure_tensor(a)
    e = float(exponent)
    return _node(
        a.data**e,
        (a,),
        (lambda g: g * e * a.data ** (e - 1.0),),
    )


def exp(a) -> Tensor:
    a = ensure_tensor(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), (lambda g: g * out_data,))


def log(a) -> Tensor:
    a = ensure_tensor(a)
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def relu(a) -> Tensor:
    a = ensure_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), (lambda g: g * mask,))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid on raw arrays."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = ensure_tensor(a)
    s = sigmoid_values(a.data)
    return _node(s, (a,), (lambda g: g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    a = ensure_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _node(data, (a,), (lambda g: g * sigmoid_values(a.data),))


# shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = ensure_tensor(a)
    return _node(
        a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),)
    )


def transpose(a, axes) -> Tensor:
    a = ensure_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(
        a.data.transpose(axes), (a,), (lambda g: g.transpose(inverse),)
    )


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx) -> Tensor:
    a = ensure_tensor(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:  # slices never alias, so a plain add suffices
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return out

    return _node(a.data[idx], (a,), (vjp,))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(ensure_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * tensors[i].data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        tuple(make_vjp(i) for i in range(len(tensors))),
    )


def broadcast_to(a, shape) -> Tensor:
    a = ensure_tensor(a)
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        (lambda g: _unbroadcast(g, a.data.shape),),
    )


# reductions ----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        (lambda g: _expand_reduced(g, a.data.shape, axis, keepdims),),
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size
    return _node(
        data,
        (a,),
        (lambda g: _expand_reduced(g, a.data.shape, axis, keepdims) / count,),
    )


# linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _node(np.matmul(a.data, b.data), (a, b), (vjp_a, vjp_b))


def conv2d(x, w, bias=None, padding: int | None = None) -> Tensor:
    """2-D convolution, stride 1, square odd kernel, "same" padding.

    x: (B, C, H, W); w: (O, C, k, k); bias: (O,).
    im2col formulation: one patch-matrix copy and a single GEMM per
    direction, which is what keeps desk-scale training CPU-friendly.
    """
    x, w = ensure_tensor(x), ensure_tensor(w)
    batch, in_ch, height, width = x.data.shape
    out_ch, in_ch_w, kh, kw = w.data.shape
    if in_ch != in_ch_w or kh != kw or kh % 2 != 1:
        raise ValueError("conv2d expects matching channels and a square odd kernel")
    pad = kh // 2 if padding is None else padding
    # channels-last padded copy; all patch slices below stay cheap
    xp = np.ascontiguousarray(
        np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))).transpose(0, 2, 3, 1)
    )
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
        batch * height * width, kh * kw * in_ch
    )
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(
        kh * kw * in_ch, out_ch
    )
    out = (cols @ wmat).reshape(batch, height, width, out_ch).transpose(0, 3, 1, 2)

    def vjp_x(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
        dcols = (gt @ wmat.T).reshape(batch, height, width, kh, kw, in_ch)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + height, j : j + width, :] += dcols[:, :, :, i, j, :]
        return dxp[:, pad : pad + height, pad : pad + width, :].transpose(0, 3, 1, 2)

    def vjp_w(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
        dwmat = cols.T @ gt
        return dwmat.reshape(kh, kw, in_ch, out_ch).transpose(3, 2, 0, 1)

    parents: tuple[Tensor, ...] = (x, w)
    vjps: tuple = (vjp_x, vjp_w)
    if bias is not None:
        bias = ensure_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, w, bias)
        vjps = (vjp_x, vjp_w, lambda g: g.sum(axis=(0, 2, 3)))
    return _node(out, parents, vjps)


def custom_op(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    """Build a node with externally computed forward data and VJP closures."""
    return _node(data, tuple(ensure_tensor(p) for p in parents), vjps)


# fused ops -------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = ensure_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _node(s, (a,), (vjp,))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = ensure_tensor(x), ensure_tensor(gain), ensure_tensor(bias)
    dim = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp_x(g):
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (
            (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return term * inv

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.data.shape)

    return _node(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def numeric_gradient(fn, arrays: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of a scalar function of numpy arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*arrays)
            flat[i] = orig - eps
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads
