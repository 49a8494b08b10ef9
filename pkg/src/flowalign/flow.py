"""Matching-based flow estimation.

Coarse-to-fine: semantic features at 1/4 resolution are matched all-pairs
(no search window, so arbitrarily fast motion stays reachable), a
Gaussian-windowed soft-argmax turns the matching scores into a
differentiable coarse flow, and a light dense block refines the
nearest-neighbor-upsampled flow at full feature resolution.
"""

from dataclasses import dataclass

import numpy as np

from .sampling import warp
from .tensor import (Conv2d, Module, Tensor, _make_node, _require_4d,
                     center_spatial, concat_channels, l2_normalize_channels,
                     leaky_relu, upsample_nearest)


class SemanticExtractor(Module):
    """Strided conv stack producing unit-normalized matching features.

    Four layers with strides 2, 2, 1, 1 reduce resolution by 4. A fixed
    Gaussian prefilter suppresses the aliasing that random strided
    filters would otherwise bake into the features, and each channel is
    centered spatially before the per-location L2 normalization; both
    steps measurably sharpen untrained matching. Weights can be swapped
    for externally trained ones through the usual checkpoint machinery,
    and ``frozen`` keeps them out of the trainable parameter set.
    """

    def __init__(self, c1, slope=0.1, prefilter_sigma=2.0, frozen=False,
                 rng=None, dtype=np.float64):
        self.slope = slope
        self.prefilter_sigma = prefilter_sigma
        c_half = max(c1 // 2, 4)
        self.conv1 = Conv2d(3, c_half, stride=2, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(c_half, c1, stride=2, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(c1, c1, rng=rng, dtype=dtype)
        self.conv4 = Conv2d(c1, c1, rng=rng, dtype=dtype)
        if frozen:
            for p in self.parameters():
                p.requires_grad = False

    def forward(self, frame):
        _require_4d(frame, "semantic extractor input")
        if frame.shape[2] % 4 or frame.shape[3] % 4:
            raise ValueError(
                f"frame dims {frame.shape[2:]} must be divisible by 4")
        if self.prefilter_sigma > 0:
            if frame.requires_grad or frame.parents:
                raise ValueError(
                    "semantic extractor expects raw frames, not graph nodes")
            from .data import blur_separable
            sigma = self.prefilter_sigma
            ksize = int(2 * np.ceil(3 * sigma) + 1)
            blurred = blur_separable(frame.data, sigma, ksize)
            frame = Tensor(blurred.astype(frame.dtype))
        x = leaky_relu(self.conv1(frame), self.slope)
        x = leaky_relu(self.conv2(x), self.slope)
        x = leaky_relu(self.conv3(x), self.slope)
        x = self.conv4(x)
        return l2_normalize_channels(center_spatial(x))

    __call__ = forward


def cost_volume(ref_feat, nbr_feat):
    """All-pairs inner products between two unit-normalized feature maps.

    Returns (n, h*w, h, w): channel j holds the score between neighbor
    location j (row-major) and each reference location. With unit inputs
    every entry lies in [-1, 1].
    """
    _require_4d(ref_feat, "cost_volume reference")
    if ref_feat.shape != nbr_feat.shape:
        raise ValueError(
            f"cost_volume shape mismatch: {ref_feat.shape} vs {nbr_feat.shape}")
    n, c, h, w = ref_feat.shape
    p = h * w
    r = ref_feat.data.reshape(n, c, p)
    s = nbr_feat.data.reshape(n, c, p)
    vol = np.matmul(s.transpose(0, 2, 1), r)  # (n, j, p)

    def backward(g):
        g3 = g.reshape(n, p, p)
        if ref_feat.requires_grad:
            ref_feat.accumulate_grad(np.matmul(s, g3).reshape(ref_feat.shape))
        if nbr_feat.requires_grad:
            nbr_feat.accumulate_grad(
                np.matmul(r, g3.transpose(0, 2, 1)).reshape(nbr_feat.shape))

    return _make_node(vol.reshape(n, p, h, w), (ref_feat, nbr_feat), backward)


def soft_argmax_flow(volume, temperature=0.1, window=5, sigma=2.5):
    """Differentiable displacement from a matching cost volume.

    Per reference location: find the hard argmax cell, keep only the
    window x window neighborhood around it, multiply the scores by a
    Gaussian in the displacement grid (std ``sigma`` cells), softmax at
    ``temperature`` and return the weighted mean displacement (dx, dy).

    The result always lies inside the convex hull of the surviving
    window cells. Gradients flow into the volume through the softmax; the
    argmax choice itself is treated as constant.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    _require_4d(volume, "cost volume")
    n, p, h, w = volume.shape
    if p != h * w:
        raise ValueError(
            f"volume channels {p} must equal h*w = {h * w} for shape {volume.shape}")

    v = volume.data.reshape(n, p, p)
    jstar = np.argmax(v, axis=1)  # (n, p)
    jy, jx = np.divmod(jstar, w)

    r = window // 2
    rel = np.array([(dx, dy) for dy in range(-r, r + 1)
                    for dx in range(-r, r + 1)], dtype=np.int64)
    wcells = rel.shape[0]
    cy = jy[:, None, :] + rel[None, :, 1, None]
    cx = jx[:, None, :] + rel[None, :, 0, None]
    valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
    jidx = np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)

    scores = np.take_along_axis(v, jidx, axis=1)  # (n, wcells, p)
    gauss = np.exp(-(rel[:, 0] ** 2 + rel[:, 1] ** 2) /
                   (2.0 * sigma * sigma)).astype(volume.dtype)
    logits = scores * gauss[None, :, None] / volume.dtype.type(temperature)
    logits = np.where(valid, logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    ref_x = np.arange(p, dtype=volume.dtype) % w
    ref_y = np.arange(p, dtype=volume.dtype) // w
    disp_x = cx.astype(volume.dtype) - ref_x[None, None, :]
    disp_y = cy.astype(volume.dtype) - ref_y[None, None, :]
    flow_x = (weights * disp_x).sum(axis=1)
    flow_y = (weights * disp_y).sum(axis=1)
    out_data = np.stack([flow_x, flow_y], axis=1).reshape(n, 2, h, w)

    def backward(g):
        gx = g[:, 0].reshape(n, 1, p)
        gy = g[:, 1].reshape(n, 1, p)
        inner = (disp_x - flow_x[:, None, :]) * gx + \
                (disp_y - flow_y[:, None, :]) * gy
        dscores = weights * inner * gauss[None, :, None] / temperature
        dv = np.zeros((n, p, p), dtype=volume.dtype)
        np.add.at(dv, (np.arange(n)[:, None, None], jidx,
                       np.arange(p)[None, None, :]), dscores)
        volume.accumulate_grad(dv.reshape(volume.shape))

    return _make_node(out_data, (volume,), backward)


def flow_upsample(coarse, scale=4):
    """Nearest-neighbor replication plus value scaling, coarse -> fine units.

    A displacement of one coarse cell spans ``scale`` fine pixels, so the
    replicated values are multiplied by ``scale``.
    """
    return upsample_nearest(coarse, scale) * float(scale)


class DenseRefiner(Module):
    """Dense block emitting a 2-channel flow residual.

    Every layer consumes the concatenation of the block input and all
    previous layer outputs; the final projection is zero-initialized so an
    untrained refiner leaves the initial flow untouched.
    """

    def __init__(self, c_in, layers=4, growth=32, slope=0.1, rng=None,
                 dtype=np.float64):
        self.slope = slope
        convs = []
        c = c_in
        for _ in range(layers):
            convs.append(Conv2d(c, growth, rng=rng, dtype=dtype))
            c += growth
        self.convs = convs
        self.project = Conv2d(c, 2, zero_init=True, dtype=dtype)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            cat = feats[0] if len(feats) == 1 else concat_channels(feats)
            feats.append(leaky_relu(conv(cat), self.slope))
        return self.project(concat_channels(feats))

    __call__ = forward


def refine_flow(ref_feat, warped_nbr_feat, initial_flow, refiner):
    """Residual flow refinement over [F_t, warped neighbor, initial flow]."""
    cat = concat_channels([ref_feat, warped_nbr_feat, initial_flow])
    return initial_flow + refiner(cat)


@dataclass
class FlowOutputs:
    """Intermediate products of one flow estimation, for diagnostics."""

    fine: Tensor
    initial: Tensor
    coarse: Tensor
    warped_feat: Tensor


class FlowEstimator(Module):
    """Coarse-to-fine matching-based flow between two frames.

    Pipeline: semantic features on both frames, all-pairs cost volume at
    1/4 resolution, Gaussian-windowed soft-argmax to the coarse flow,
    nearest-neighbor x4 upsampling (with value scaling), warp of the
    neighbor's full-resolution features, and a dense-block residual that
    yields the fine flow at feature resolution.
    """

    def __init__(self, c1, c2, temperature=0.1, window=5, sigma=2.5,
                 dense_layers=4, dense_growth=32, slope=0.1, frozen_semantic=False,
                 rng=None, dtype=np.float64):
        self.temperature = temperature
        self.window = window
        self.sigma = sigma
        self.semantic = SemanticExtractor(c1, slope=slope, frozen=frozen_semantic,
                                          rng=rng, dtype=dtype)
        self.refiner = DenseRefiner(2 * c2 + 2, layers=dense_layers,
                                    growth=dense_growth, slope=slope, rng=rng,
                                    dtype=dtype)

    def coarse_flow(self, ref_frame, nbr_frame):
        s_ref = self.semantic(ref_frame)
        s_nbr = self.semantic(nbr_frame)
        vol = cost_volume(s_ref, s_nbr)
        return soft_argmax_flow(vol, self.temperature, self.window, self.sigma)

    def estimate(self, ref_frame, nbr_frame, ref_feat, nbr_feat):
        if ref_frame.shape[2:] != ref_feat.shape[2:]:
            raise ValueError(
                f"frame {ref_frame.shape} and feature {ref_feat.shape} "
                f"resolutions disagree")
        coarse = self.coarse_flow(ref_frame, nbr_frame)
        initial = flow_upsample(coarse, 4)
        warped = warp(nbr_feat, initial)
        fine = refine_flow(ref_feat, warped, initial, self.refiner)
        return FlowOutputs(fine=fine, initial=initial, coarse=coarse,
                           warped_feat=warped)

    def forward(self, ref_frame, nbr_frame, ref_feat, nbr_feat):
        return self.estimate(ref_frame, nbr_frame, ref_feat, nbr_feat).fine

    __call__ = forward
