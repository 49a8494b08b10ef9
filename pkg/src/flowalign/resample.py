"""Bicubic (Catmull-Rom, a = -0.5) resampling on plain arrays.

Data-side utilities: these operate on numpy arrays outside the autodiff
graph. Output pixel o maps to source coordinate (o + 0.5) / scale - 0.5,
and out-of-range taps clamp to the nearest edge sample.
"""

import numpy as np

_A = -0.5


def _cubic_weights(t):
    """Catmull-Rom weights for taps at offsets -1, 0, 1, 2 from floor(x)."""
    t = np.asarray(t, dtype=np.float64)
    w = np.empty(t.shape + (4,), dtype=np.float64)
    for k, d in enumerate((t + 1.0, t, 1.0 - t, 2.0 - t)):
        ad = np.abs(d)
        w[..., k] = np.where(
            ad <= 1.0,
            (_A + 2.0) * ad ** 3 - (_A + 3.0) * ad ** 2 + 1.0,
            np.where(ad < 2.0,
                     _A * ad ** 3 - 5.0 * _A * ad ** 2 + 8.0 * _A * ad - 4.0 * _A,
                     0.0))
    return w


def _axis_taps(out_size, in_size, scale):
    """Clamped tap indices (out, 4) and weights (out, 4) for one axis."""
    coords = (np.arange(out_size, dtype=np.float64) + 0.5) / scale - 0.5
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    wgt = _cubic_weights(frac)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    return np.clip(idx, 0, in_size - 1), wgt


def _apply_axis(data, idx, wgt, axis):
    moved = np.moveaxis(data, axis, -1)
    out = np.zeros(moved.shape[:-1] + (idx.shape[0],), dtype=np.float64)
    for k in range(4):
        out += moved[..., idx[:, k]] * wgt[:, k]
    return np.moveaxis(out, -1, axis)


def bicubic_upsample(data, scale):
    """Upsample the last two axes of an array by an integer factor."""
    h, w = data.shape[-2:]
    idx_y, wgt_y = _axis_taps(h * scale, h, scale)
    idx_x, wgt_x = _axis_taps(w * scale, w, scale)
    out = _apply_axis(np.asarray(data, dtype=np.float64), idx_y, wgt_y, -2)
    return _apply_axis(out, idx_x, wgt_x, -1)


def sample_shifted(master, out_h, out_w, origin_y, origin_x):
    """Read an (out_h, out_w) window of ``master`` starting at a real origin.

    out(y, x) = master(origin_y + y, origin_x + x), bicubically
    interpolated; integer origins reproduce array slicing exactly. Taps
    falling outside clamp to the edge, so keep a margin when motion should
    stay artifact-free.
    """
    h, w = master.shape[-2:]
    ys = origin_y + np.arange(out_h, dtype=np.float64)
    xs = origin_x + np.arange(out_w, dtype=np.float64)
    by = np.floor(ys).astype(np.int64)
    bx = np.floor(xs).astype(np.int64)
    wy = _cubic_weights(ys - by)
    wx = _cubic_weights(xs - bx)
    idx_y = np.clip(by[:, None] + np.arange(-1, 3)[None, :], 0, h - 1)
    idx_x = np.clip(bx[:, None] + np.arange(-1, 3)[None, :], 0, w - 1)
    data = np.asarray(master, dtype=np.float64)
    out = _apply_axis(data, idx_y, wy, -2)
    return _apply_axis(out, idx_x, wx, -1)
