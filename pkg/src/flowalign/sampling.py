"""Sub-pixel bilinear sampling and backward flow warping.

Coordinates are absolute pixel positions with x along width and y along
height. Reads outside [0, w-1] x [0, h-1] see zeros: out-of-range corner
taps simply contribute nothing, matching the zero-padding convention used
by the convolutions.
"""

import numpy as np

from .tensor import Tensor, _make_node, _require_4d


def corner_terms(px, py, h, w):
    """Bilinear corner indices and weights for absolute positions.

    Args:
        px, py: float arrays of identical shape.
        h, w: extent of the map being sampled.

    Returns:
        idx: (4, ...) int64 flattened spatial indices, clipped in-range.
        wgt: (4, ...) blend weights, zeroed for out-of-range corners.
        dwx, dwy: (4, ...) derivatives of each weight w.r.t. px and py.
    """
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    one = px.dtype.type(1.0)
    gx = (one - fx, fx)
    gy = (one - fy, fy)
    dgx = (-one, one)
    vx = ((x0 >= 0) & (x0 < w), (x1 >= 0) & (x1 < w))
    vy = ((y0 >= 0) & (y0 < h), (y1 >= 0) & (y1 < h))
    cx = (np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1))
    cy = (np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1))

    idx = np.empty((4,) + px.shape, dtype=np.int64)
    wgt = np.empty((4,) + px.shape, dtype=px.dtype)
    dwx = np.empty_like(wgt)
    dwy = np.empty_like(wgt)
    for i, (a, b) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        valid = vx[a] & vy[b]
        idx[i] = cy[b] * w + cx[a]
        wgt[i] = np.where(valid, gx[a] * gy[b], 0.0)
        dwx[i] = np.where(valid, dgx[a] * gy[b], 0.0)
        dwy[i] = np.where(valid, gx[a] * dgx[b], 0.0)
    return idx, wgt, dwx, dwy


def gather_channels(flat, idx):
    """Gather rows of a (n, h*w, c) map at per-sample flat indices (n, p)."""
    n, hw, c = flat.shape
    rows = idx + (np.arange(n, dtype=np.int64)[:, None] * hw)
    return np.take(flat.reshape(n * hw, c), rows.reshape(-1), axis=0) \
        .reshape(idx.shape + (c,))


def scatter_channels_flat(acc2d, rows, values):
    """Scatter-add (m, c) values into a (rows_total, c) accumulator in place.

    Row indices may repeat; accumulation is unbuffered per channel.
    """
    c = acc2d.shape[1]
    flat = rows.reshape(-1)
    vals = values.reshape(-1, c)
    for ch in range(c):
        acc2d[:, ch] += np.bincount(flat, weights=vals[:, ch],
                                    minlength=acc2d.shape[0])
    return acc2d


def bilinear_interp(data, px, py):
    """Plain-numpy bilinear read of (n, c, h, w) data at (n, p) positions.

    Diagnostic helper (coordinate traces, synthetic data); no graph.
    """
    n, c, h, w = data.shape
    idx, wgt, _, _ = corner_terms(px, py, h, w)
    flat = data.reshape(n, c, h * w).transpose(0, 2, 1)
    out = np.zeros(px.shape + (c,), dtype=data.dtype)
    for i in range(4):
        out += gather_channels(flat, idx[i]) * wgt[i][..., None]
    return out


def bilinear_sample(x, coords):
    """Sample a feature map at arbitrary sub-pixel positions.

    Args:
        x: (n, c, h, w) map to read.
        coords: (n, 2, ho, wo) absolute positions, channel 0 = x, channel 1 = y.

    Returns:
        (n, c, ho, wo) tensor; differentiable w.r.t. both x and coords.
    """
    _require_4d(x, "bilinear_sample input")
    _require_4d(coords, "bilinear_sample coords")
    if coords.shape[1] != 2 or coords.shape[0] != x.shape[0]:
        raise ValueError(
            f"coords must be (n, 2, ho, wo) with n={x.shape[0]}, got {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample coords must be finite")

    n, c, h, w = x.shape
    ho, wo = coords.shape[2], coords.shape[3]
    p = ho * wo
    px = coords.data[:, 0].reshape(n, p)
    py = coords.data[:, 1].reshape(n, p)
    idx, wgt, _, _ = corner_terms(px, py, h, w)
    flat = x.data.reshape(n, c, h * w).transpose(0, 2, 1)
    out = np.zeros((n, p, c), dtype=x.dtype)
    for i in range(4):
        out += gather_channels(flat, idx[i]) * wgt[i][..., None]
    out_data = out.transpose(0, 2, 1).reshape(n, c, ho, wo)

    def backward(g):
        gt = g.reshape(n, c, p).transpose(0, 2, 1)
        idx_b, wgt_b, dwx, dwy = corner_terms(px, py, h, w)
        if x.requires_grad:
            acc = np.zeros((n, h * w, c), dtype=np.float64)
            for i in range(4):
                acc += scatter_channels((n, h * w, c), idx_b[i],
                                        gt * wgt_b[i][..., None])
            x.accumulate_grad(
                acc.transpose(0, 2, 1).reshape(n, c, h, w).astype(x.dtype))
        if coords.requires_grad:
            flat_b = x.data.reshape(n, c, h * w).transpose(0, 2, 1)
            gpx = np.zeros((n, p), dtype=x.dtype)
            gpy = np.zeros((n, p), dtype=x.dtype)
            for i in range(4):
                dot = np.einsum("npc,npc->np", gt, gather_channels(flat_b, idx_b[i]))
                gpx += dot * dwx[i]
                gpy += dot * dwy[i]
            dcoords = np.stack([gpx, gpy], axis=1).reshape(coords.shape)
            coords.accumulate_grad(dcoords)

    return _make_node(out_data, (x, coords), backward)


def base_grid(n, h, w, dtype=np.float64):
    """Constant (n, 2, h, w) array of each pixel's own (x, y) position."""
    xs = np.arange(w, dtype=dtype)
    ys = np.arange(h, dtype=dtype)
    grid = np.empty((n, 2, h, w), dtype=dtype)
    grid[:, 0] = xs[None, None, :]
    grid[:, 1] = ys[None, :, None]
    return grid


def warp(x, flow):
    """Backward-warp a map by a flow field: out(p) = x(p + flow(p)).

    flow is (n, 2, h, w) with channel 0 = dx and channel 1 = dy in pixels;
    spatial dims must match x. Differentiable w.r.t. both arguments, and
    warp(x, 0) returns x bit-exactly.
    """
    _require_4d(x, "warp input")
    _require_4d(flow, "warp flow")
    if flow.shape[0] != x.shape[0] or flow.shape[1] != 2 or flow.shape[2:] != x.shape[2:]:
        raise ValueError(
            f"flow shape {flow.shape} incompatible with input {x.shape}")
    grid = Tensor(base_grid(x.shape[0], x.shape[2], x.shape[3], x.dtype))
    return bilinear_sample(x, flow + grid)
