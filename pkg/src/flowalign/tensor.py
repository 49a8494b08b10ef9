"""Dense rank-4 tensor substrate with reverse-mode differentiation.

Feature maps live in (n, c, h, w) layout throughout. The graph is a plain
DAG of Tensor nodes built eagerly by the layer primitives below; calling
``backward()`` on a loss node runs one reverse topological sweep and
accumulates gradients into every node that requires them. Only the fixed
set of primitives the network needs is provided, there is no generic
graph capture.
"""

import math
import struct
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """A value node in the computation graph.

    Holds the forward value, a lazily allocated gradient accumulator of the
    same shape, and the closure that routes an incoming gradient to the
    parents that produced this node.
    """

    __slots__ = ("data", "_grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_float_array(data, dtype)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self._backward = None
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, g):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, seed=None):
        """Reverse-mode sweep from this node.

        ``seed`` defaults to ones, i.e. the gradient of a sum over every
        element of this tensor. Each node is visited exactly once, in
        reverse topological order.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_float_array(seed, self.data.dtype)
            if seed.shape != self.shape:
                raise ValueError(f"seed shape {seed.shape} != value shape {self.shape}")
        order = _toposort(self)
        self.accumulate_grad(seed)
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)

    # -- arithmetic (same-shape tensors or python scalars) -----------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _toposort(root):
    """Iterative post-order DFS; returns nodes with parents before children."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make_node(data, inputs, backward):
    """Wrap an op result; attaches the backward closure only when needed."""
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        out.parents = tuple(t for t in inputs if t.requires_grad)
        out._backward = backward
    return out


def _require_4d(t, label):
    if t.ndim != 4:
        raise ValueError(f"{label} must be rank-4 (n, c, h, w), got shape {t.shape}")


def require_finite(t, label="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{label} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        out_data = a.data + a.data.dtype.type(b)

        def backward(g):
            a.accumulate_grad(g)

        return _make_node(out_data, (a,), backward)

    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make_node(a.data + b.data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor):
        scalar = a.data.dtype.type(b)

        def backward(g):
            a.accumulate_grad(g * scalar)

        return _make_node(a.data * scalar, (a,), backward)

    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make_node(a.data * b.data, (a, b), backward)


def leaky_relu(x, slope=0.1):
    """x for x >= 0, slope * x otherwise."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    scale = np.where(pos, x.dtype.type(1.0), x.dtype.type(slope))

    def backward(g):
        x.accumulate_grad(g * scale)

    return _make_node(x.data * scale, (x,), backward)


def sigmoid(x):
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make_node(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def concat_channels(tensors):
    """Concatenate along the channel axis; inputs must agree on n, h, w."""
    if not tensors:
        raise ValueError("concat_channels needs at least one input")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        _require_4d(t, "concat input")
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ValueError(
                f"concat spatial mismatch: {t.shape} vs {tensors[0].shape}")
    sizes = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        start = 0
        for t, c in zip(tensors, sizes):
            if t.requires_grad:
                t.accumulate_grad(g[:, start:start + c])
            start += c

    return _make_node(out_data, tuple(tensors), backward)


def channel_slice(x, start, stop):
    _require_4d(x, "channel_slice input")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"bad channel range [{start}, {stop}) for c={x.shape[1]}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate_grad(full)

    return _make_node(x.data[:, start:stop].copy(), (x,), backward)


def upsample_nearest(x, scale):
    """Replicate every pixel into a scale x scale block."""
    _require_4d(x, "upsample input")
    if scale < 1:
        raise ValueError(f"upsample scale must be >= 1, got {scale}")
    if scale == 1:
        def backward_id(g):
            x.accumulate_grad(g)
        return _make_node(x.data.copy(), (x,), backward_id)
    out_data = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward(g):
        n, c, ho, wo = g.shape
        h, w = ho // scale, wo // scale
        x.accumulate_grad(
            g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)))

    return _make_node(out_data, (x,), backward)


def _shuffle(data, r):
    n, c, h, w = data.shape
    co = c // (r * r)
    return (data.reshape(n, co, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, co, h * r, w * r))


def _unshuffle(data, r):
    n, c, h, w = data.shape
    ho, wo = h // r, w // r
    return (data.reshape(n, c, ho, r, wo, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c * r * r, ho, wo))


def pixel_shuffle(x, r):
    """Channel-to-space rearrangement: (n, c, h, w) -> (n, c/r^2, h*r, w*r).

    out[n, c, r*y + a, r*x + b] = in[n, c*r*r + a*r + b, y, x].
    """
    _require_4d(x, "pixel_shuffle input")
    if r < 1:
        raise ValueError(f"pixel_shuffle factor must be >= 1, got {r}")
    if x.shape[1] % (r * r) != 0:
        raise ValueError(
            f"channel count {x.shape[1]} not divisible by r^2 = {r * r}")

    def backward(g):
        x.accumulate_grad(_unshuffle(g, r))

    return _make_node(_shuffle(x.data, r), (x,), backward)


def pixel_unshuffle(x, r):
    """Exact inverse of pixel_shuffle."""
    _require_4d(x, "pixel_unshuffle input")
    if x.shape[2] % r != 0 or x.shape[3] % r != 0:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by r={r}")

    def backward(g):
        x.accumulate_grad(_shuffle(g, r))

    return _make_node(_unshuffle(x.data, r), (x,), backward)


def center_spatial(x):
    """Subtract each channel's spatial mean (per batch element)."""
    _require_4d(x, "center_spatial input")
    out_data = x.data - x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        x.accumulate_grad(g - g.mean(axis=(2, 3), keepdims=True))

    return _make_node(out_data, (x,), backward)


def l2_normalize_channels(x, eps=1e-8):
    """Scale every (n, h, w) location's channel vector to unit L2 norm.

    Vectors with norm below eps are scaled by 1/eps instead, so exact zero
    vectors stay zero and the op remains differentiable everywhere.
    """
    _require_4d(x, "l2_normalize input")
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    out_data = x.data / denom

    def backward(g):
        live = norm > eps
        dot = np.sum(g * out_data, axis=1, keepdims=True)
        dx = (g - np.where(live, out_data * dot, 0.0)) / denom
        x.accumulate_grad(dx)

    return _make_node(out_data, (x,), backward)


def channel_softmax(x):
    """Softmax across the channel axis, independently per (n, h, w) location."""
    _require_4d(x, "channel_softmax input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return _make_node(out_data, (x,), backward)


def channel_mean_dot(a, b):
    """Per-pixel channel correlation: mean over c of a*b, shape (n, 1, h, w)."""
    _require_4d(a, "channel_mean_dot input")
    if a.shape != b.shape:
        raise ValueError(f"channel_mean_dot shape mismatch: {a.shape} vs {b.shape}")
    c = a.shape[1]
    out_data = (a.data * b.data).mean(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data / c)
        if b.requires_grad:
            b.accumulate_grad(g * a.data / c)

    return _make_node(out_data, (a, b), backward)


def scale_channels(x, s):
    """Multiply a feature map by a per-pixel scalar map of shape (n, 1, h, w)."""
    _require_4d(x, "scale_channels input")
    if s.shape != (x.shape[0], 1) + x.shape[2:]:
        raise ValueError(
            f"scalar map shape {s.shape} incompatible with input {x.shape}")
    out_data = x.data * s.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data)
        if s.requires_grad:
            s.accumulate_grad((g * x.data).sum(axis=1, keepdims=True))

    return _make_node(out_data, (x, s), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, k, stride, padding):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * ho:stride,
                                    kx:kx + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, padding):
    n, c, h, w = x_shape
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    dpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    dc = dcols.reshape(n, c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            dpad[:, :, ky:ky + stride * ho:stride,
                 kx:kx + stride * wo:stride] += dc[:, :, ky, kx]
    if padding:
        return dpad[:, :, padding:padding + h, padding:padding + w]
    return dpad


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Standard 2-D cross-correlation with zero padding.

    Args:
        x: (n, c_in, h, w) input.
        weight: (c_out, c_in, k, k) kernel, k odd.
        bias: optional (c_out,) vector.
        stride, padding: non-negative ints.

    The heavy im2col buffer is rebuilt during backward instead of being
    kept alive on the graph.
    """
    _require_4d(x, "conv2d input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if x.shape[1] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")

    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1)
    out_data = out.reshape(n, c_out, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, c_out, ho * wo)
        if weight.requires_grad:
            cols_b, _, _ = _im2col(x.data, k, stride, padding)
            dw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x.accumulate_grad(_col2im(dcols, x.shape, k, stride, padding))

    return _make_node(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# serialization: "FDT4" little-endian binary
# ---------------------------------------------------------------------------

_MAGIC = b"FDT4"
_DTYPE_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPE = {0: "<f8", 1: "<f4"}


def save_tensor(path, array):
    """Write a rank-4 array: magic, dtype code, four u64 dims, row-major data."""
    arr = np.ascontiguousarray(array)
    if arr.ndim != 4:
        raise ValueError(f"serialized tensors must be rank-4, got shape {arr.shape}")
    if arr.dtype not in _DTYPE_CODE:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _DTYPE_CODE[arr.dtype]))
        fh.write(struct.pack("<4Q", *arr.shape))
        fh.write(arr.astype(_CODE_DTYPE[_DTYPE_CODE[arr.dtype]], copy=False).tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (code,) = struct.unpack("<B", fh.read(1))
        if code not in _CODE_DTYPE:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack("<4Q", fh.read(32))
        count = int(np.prod(dims))
        itemsize = np.dtype(_CODE_DTYPE[code]).itemsize
        data = np.frombuffer(fh.read(count * itemsize),
                             dtype=_CODE_DTYPE[code], count=count)
    return data.reshape(dims).astype(data.dtype.newbyteorder("="), copy=False).copy()


# ---------------------------------------------------------------------------
# parameters and modules
# ---------------------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in, slope=0.1, dtype=np.float64):
    """Uniform fan-in init with leaky-relu gain."""
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class giving named parameter discovery over nested layers."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix == "" else f"{prefix}.{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in state")
            src = arrays[name]
            if src.shape != p.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {src.shape} != expected {p.shape}")
            p.data = src.astype(p.dtype, copy=True)


class Conv2d(Module):
    """Convolution layer owning its weight/bias tensors."""

    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, bias=True,
                 zero_init=False, rng=None, dtype=np.float64):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (c_out, c_in, k, k), fan_in=c_in * k * k,
                                dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding)

    __call__ = forward
