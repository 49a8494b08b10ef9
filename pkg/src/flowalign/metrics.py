"""PSNR/SSIM on RGB and luma, and flow visualization."""

import numpy as np

from .data import gaussian_kernel1d

_Y_COEF = np.array([65.481, 128.553, 24.966])


def rgb_to_y(image):
    """BT.601 luma of an RGB array in [0, 1]: (65.481 R + 128.553 G + 24.966 B + 16) / 255.

    The channel axis is the one of size 3: (3, h, w) or (n, 3, h, w).
    """
    arr = np.asarray(image, dtype=np.float64)
    axis = arr.ndim - 3
    if arr.shape[axis] != 3:
        raise ValueError(f"expected 3 channels, got shape {arr.shape}")
    coef = _Y_COEF.reshape((3,) + (1,) * (arr.ndim - axis - 1))
    y = (np.sum(arr * coef, axis=axis) + 16.0) / 255.0
    return np.expand_dims(y, axis)


def psnr(pred, target, peak=1.0):
    """10 log10(peak^2 / MSE), capped into [0, 100] dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"psnr shape mismatch: {pred.shape} vs {target.shape}")
    mse = np.mean((pred - target) ** 2)
    if mse == 0.0:
        return 100.0
    return float(np.clip(10.0 * np.log10(peak * peak / mse), 0.0, 100.0))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _ssim_2d(a, b, peak):
    h, w = a.shape
    win = _SSIM_WINDOW
    if h < win or w < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    k1 = gaussian_kernel1d(_SSIM_SIGMA, win)
    kernel = np.outer(k1, k1)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    from numpy.lib.stride_tricks import sliding_window_view

    def wmean(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (win, win)), kernel)

    mu_a = wmean(a)
    mu_b = wmean(b)
    var_a = wmean(a * a) - mu_a ** 2
    var_b = wmean(b * b) - mu_b ** 2
    cov = wmean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred, target, peak=1.0):
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Multi-channel inputs are averaged per channel; accepts (h, w),
    (c, h, w) or (n, c, h, w).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"ssim shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        return _ssim_2d(pred, target, peak)
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_t = target.reshape(-1, *target.shape[-2:])
    return float(np.mean([_ssim_2d(p, t, peak) for p, t in zip(flat_p, flat_t)]))


def flow_to_color(flow, max_mag):
    """Standard flow color wheel: hue = direction, saturation = magnitude.

    flow is (2, h, w); returns an RGB array (3, h, w) in [0, 1], white at
    zero motion and fully saturated at or beyond max_mag.
    """
    if max_mag <= 0:
        raise ValueError(f"max_mag must be positive, got {max_mag}")
    fx, fy = np.asarray(flow, dtype=np.float64)
    mag = np.sqrt(fx * fx + fy * fy)
    hue = (np.arctan2(fy, fx) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    val = np.ones_like(sat)

    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1.0 - sat)
    q = val * (1.0 - sat * f)
    t = val * (1.0 - sat * (1.0 - f))
    rgb = np.zeros((3,) + mag.shape)
    for k, (r, g, b) in enumerate([(val, t, p), (q, val, p), (p, val, t),
                                   (p, q, val), (t, p, val), (val, p, q)]):
        mask = i == k
        rgb[0][mask] = r[mask]
        rgb[1][mask] = g[mask]
        rgb[2][mask] = b[mask]
    return rgb


def metric_report(preds, targets, border=4):
    """Per-frame and mean PSNR/SSIM on RGB and luma.

    Returns (header, rows); predictions and targets are (3, h, w) arrays
    in [0, 1], compared after cropping ``border`` pixels on each side.
    """
    if len(preds) != len(targets) or not preds:
        raise ValueError("need equally many (and at least one) preds and targets")
    header = ("frame", "psnr_rgb", "ssim_rgb", "psnr_y", "ssim_y")
    rows = []
    acc = np.zeros(4)
    for i, (p, t) in enumerate(zip(preds, targets)):
        b = border
        pc = np.clip(p, 0.0, 1.0)[..., b:-b, b:-b] if b else np.clip(p, 0, 1)
        tc = np.clip(t, 0.0, 1.0)[..., b:-b, b:-b] if b else np.clip(t, 0, 1)
        vals = (psnr(pc, tc), ssim(pc, tc),
                psnr(rgb_to_y(pc), rgb_to_y(tc)), ssim(rgb_to_y(pc)[0], rgb_to_y(tc)[0]))
        acc += vals
        rows.append((str(i),) + tuple(f"{v:.6f}" for v in vals))
    rows.append(("mean",) + tuple(f"{v:.6f}" for v in acc / len(preds)))
    return header, rows
