"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators the reconstruction network needs are provided.  Every
operator returns a new :class:`Tensor`; when any input requires a gradient
the result records its parents and a backward closure, which forms the tape.
:func:`backward` walks the reachable nodes in reverse creation order.

Computation happens in the dtype of the inputs, so float64 parameters give a
float64 graph (used for gradient checking) and float32 parameters give the
fast training path.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()


class Tensor:
    """Array value plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn", "node_id")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        self.data = np.asarray(data)
        if self.data.ndim > 4:
            raise ValueError(f"tensors are limited to 4 axes, got shape {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """A named trainable block with its gradient and Adam moments."""

    __slots__ = ("name", "m", "v", "_lock")

    def __init__(self, name, value):
        super().__init__(np.array(value, copy=True), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self._lock = threading.Lock()

    def _accumulate(self, g):
        with self._lock:
            self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _make(data, op, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def backward(loss):
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate: calling twice without zeroing doubles them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to the tape (no input requires grad)")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t.parents if p.requires_grad)

    grads = {loss.node_id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------------------
# convolution


def _check_kernel(k):
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")


def _col2im(gcols, x_shape, k, padding):
    """Adjoint of the k*k sliding-window view (B, H', W', C, k, k)."""
    B, C, H, W = x_shape
    Ho, Wo = gcols.shape[1], gcols.shape[2]
    gx = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=gcols.dtype)
    g = gcols.transpose(0, 3, 4, 5, 1, 2)  # B C k k Ho Wo
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + Ho, j:j + Wo] += g[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x, weight, bias, padding=None):
    """Stride-1 cross-correlation with zero padding.

    x is B x Cin x H x W, weight Cout x Cin x k x k, bias Cout.  ``padding``
    defaults to (k - 1) // 2, which preserves the spatial size.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-axis input and weight, got {x.shape} and {weight.shape}")
    Cout, Cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    _check_kernel(k)
    if x.shape[1] != Cin:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {Cin}")
    if bias.shape != (Cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {Cout} output channels")
    if padding is None:
        padding = (k - 1) // 2
    B, _, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError(f"input {x.shape} too small for a {k}x{k} kernel with padding {padding}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B C Ho Wo k k
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * k * k)
    w2 = weight.data.reshape(Cout, Cin * k * k)
    out = (cols @ w2.T + bias.data).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, Cin, k, k)
            gx = _col2im(gcols, x.shape, k, padding)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), "conv2d", (x, weight, bias), backward_fn)


def depthwise_conv2d(x, weight, padding=None):
    """Per-channel k x k cross-correlation; weight is C x k x k."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 3:
        raise ValueError(f"depthwise_conv2d expects B x C x H x W and C x k x k, got {x.shape}, {weight.shape}")
    C, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    _check_kernel(k)
    if x.shape[1] != C:
        raise ValueError(f"input has {x.shape[1]} channels, weight has {C}")
    if padding is None:
        padding = (k - 1) // 2
    B, _, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"input {x.shape} too small for a {k}x{k} kernel")
    w = weight.data
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.data, w))
    for i in range(k):
        for j in range(k):
            out += w[None, :, i, j, None, None] * xp[:, :, i:i + Ho, j:j + Wo]

    def backward_fn(g):
        gw = None
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + Ho, j:j + Wo])
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + Ho, j:j + Wo] += w[None, :, i, j, None, None] * g
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw

    return _make(out, "depthwise_conv2d", (x, weight), backward_fn)


def dense(x, weight, bias):
    """Affine map: x is B x n, weight m x n, bias m."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"dense expects B x n input and m x n weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, "dense", (x, weight, bias), backward_fn)


def pixel_kernel_conv(features, kernels, row_index, col_index, kernel_index, k):
    """Apply a separate predicted k x k x C kernel at every output pixel.

    ``out[b, 0, h, w] = sum(kernels[kernel_index[h, w]] * patch(features[b], row_index[h], col_index[w]))``
    where ``patch`` is the zero-padded k x k neighbourhood (all channels,
    flattened channel-major) centred on the given feature location.

    features: B x C x inH x inW; kernels: n_kernels x (C*k*k);
    row_index (outH,), col_index (outW,) map output pixels to feature pixels;
    kernel_index (outH, outW) selects the kernel row for each output pixel.
    """
    features, kernels = as_tensor(features), as_tensor(kernels)
    B, C, inH, inW = features.shape
    D = C * k * k
    if kernels.data.ndim != 2 or kernels.shape[1] != D:
        raise ValueError(f"kernels must be n x {D}, got {kernels.shape}")
    row_index = np.asarray(row_index, dtype=np.intp)
    col_index = np.asarray(col_index, dtype=np.intp)
    kernel_index = np.asarray(kernel_index, dtype=np.intp)
    outH, outW = len(row_index), len(col_index)
    if kernel_index.shape != (outH, outW):
        raise ValueError(f"kernel_index shape {kernel_index.shape} != ({outH}, {outW})")
    pad = (k - 1) // 2
    fp = np.pad(features.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(fp, (k, k), axis=(2, 3))  # B C inH inW k k
    unfolded = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, inH, inW, D)
    gathered = unfolded[:, row_index][:, :, col_index]  # B outH outW D
    kfull = kernels.data[kernel_index]  # outH outW D
    out = np.einsum("bhwd,hwd->bhw", gathered, kfull)[:, None]

    def backward_fn(g):
        g = g[:, 0]
        gk = None
        if kernels.requires_grad:
            gkfull = np.einsum("bhwd,bhw->hwd", gathered, g).reshape(outH * outW, D)
            gk = np.zeros_like(kernels.data)
            np.add.at(gk, kernel_index.reshape(-1), gkfull)
        gf = None
        if features.requires_grad:
            gg = g[..., None] * kfull[None]  # B outH outW D
            gu = _segment_sum(_segment_sum(gg, row_index, inH, axis=1), col_index, inW, axis=2)
            gcols = gu.reshape(B, inH, inW, C, k, k)
            gf = _col2im(gcols, features.shape, k, pad)
        return gf, gk

    return _make(out, "pixel_kernel_conv", (features, kernels), backward_fn)


def _segment_sum(arr, index, n, axis):
    """Sum slices of ``arr`` along ``axis`` into ``n`` bins given by ``index``."""
    shape = list(arr.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=arr.dtype)
    if len(index) == 0:
        return out
    if np.all(index[1:] >= index[:-1]):
        starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
        sums = np.add.reduceat(arr, starts, axis=axis)
        sl = [slice(None)] * arr.ndim
        sl[axis] = index[starts]
        out[tuple(sl)] = sums
    else:
        sl = [slice(None)] * arr.ndim
        sl[axis] = index
        np.add.at(out, tuple(sl), arr)
    return out


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a, b):
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"operands must have the same number of axes: {a.shape} vs {b.shape}")
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"cannot broadcast {a.shape} with {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), backward_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, "sub", (a, b), backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "mul", (a, b), backward_fn)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def global_average_pool(x):
    """B x C x H x W -> B x C spatial mean."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool expects 4 axes, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),)

    return _make(out, "global_average_pool", (x,), backward_fn)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def tensor_sum(x):
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.sum().reshape(()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(x.data.mean().reshape(()), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# initialisation and gradient checking


def init_uniform(rng, shape, fan_in, dtype=np.float32):
    """Uniform in +/- sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def finite_difference_check(f, params, eps=1e-4, max_coords=None, rng=None):
    """Compare analytic gradients of ``f()`` with central differences.

    Parameters
    ----------
    f : callable
        Takes no arguments, builds a fresh graph and returns a scalar Tensor.
    params : sequence of Tensor
        Leaves (usually :class:`Parameter`) to differentiate with respect to.
        Use float64 values; float32 round-off swamps the comparison.
    eps : float
        Perturbation, in [1e-6, 1e-3].
    max_coords : int, optional
        If given, check at most this many randomly chosen coordinates per
        parameter instead of all of them.

    Returns
    -------
    float
        max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) over checked coordinates.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = f()
    if loss.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {loss.shape}")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(0) if rng is None else rng

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(f().data)
            flat[idx] = orig - eps
            down = float(f().data)
            flat[idx] = orig
            g_fd = (up - down) / (2 * eps)
            a = float(g_ad.reshape(-1)[idx])
            err = abs(a - g_fd) / max(1e-8, abs(a) + abs(g_fd))
            worst = max(worst, err)
    return worst
