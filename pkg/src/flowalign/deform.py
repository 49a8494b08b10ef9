"""Modulated deformable convolution and its flow-guided variants.

A deformable layer reads K sub-pixel taps per output location: the fixed
3x3 grid positions are displaced by learned per-tap offsets, each sample
is scaled by a learned modulation scalar in [0, 1], and the samples are
combined by ordinary convolution weights.

Two ways of folding an optical flow into the sampling are provided:

* naive integration: each tap lands at q_k = p + p_k + dp_k on the warped
  map, i.e. at q_k + flow(q_k) on the original map (flow interpolated at
  the tap position);
* advanced integration: every tap for output location p shares the single
  flow value flow(p), so sampling stays clustered around one
  correspondence on the original map.

Both modes compute their offsets from [reference, warped-neighbor], which
makes the integration strategy the only difference between them.
"""

from dataclasses import dataclass, field

import numpy as np

from .sampling import (base_grid, bilinear_sample, corner_terms,
                       gather_channels, scatter_channels, warp)
from .tensor import (Conv2d, Module, Tensor, _make_node, _require_4d,
                     channel_slice, concat_channels, kaiming_uniform,
                     leaky_relu, sigmoid)


def kernel_taps(size=3):
    """Fixed grid tap positions as (K, 2) rows of (dx, dy), row-major.

    For size 3 this is (-1,-1), (0,-1), (1,-1), (-1,0), ... , (1,1); the
    same enumeration order is used wherever offsets are produced or
    consumed, and matches the row-major layout of conv weights.
    """
    r = size // 2
    taps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return np.asarray(taps, dtype=np.float64)


TAPS_3X3 = kernel_taps(3)


@dataclass
class OffsetBundle:
    """Per-pixel learned offsets and modulation scalars for K taps.

    offsets: (n, 2K, h, w), channel 2k = dx_k, channel 2k+1 = dy_k.
    modulations: (n, K, h, w), sigmoid-squashed into [0, 1].
    """

    offsets: Tensor
    modulations: Tensor

    def __post_init__(self):
        _require_4d(self.offsets, "bundle offsets")
        _require_4d(self.modulations, "bundle modulations")
        if self.offsets.shape[1] != 2 * self.modulations.shape[1]:
            raise ValueError(
                f"offset channels {self.offsets.shape[1]} must be twice "
                f"modulation channels {self.modulations.shape[1]}")
        if self.offsets.shape[0] != self.modulations.shape[0] or \
                self.offsets.shape[2:] != self.modulations.shape[2:]:
            raise ValueError(
                f"offsets {self.offsets.shape} and modulations "
                f"{self.modulations.shape} disagree on batch/spatial dims")

    @property
    def num_taps(self):
        return self.modulations.shape[1]


@dataclass
class SampleTrace:
    """Absolute sampling positions recorded by one deformable layer."""

    abs_x: np.ndarray  # (n, K, h, w)
    abs_y: np.ndarray
    modulation: np.ndarray

    def rows(self, batch_index=0):
        """Yield (y, x, tap, abs_x, abs_y, modulation) per location and tap."""
        _, k_taps, h, w = self.abs_x.shape
        for y in range(h):
            for x in range(w):
                for k in range(k_taps):
                    yield (y, x, k,
                           float(self.abs_x[batch_index, k, y, x]),
                           float(self.abs_y[batch_index, k, y, x]),
                           float(self.modulation[batch_index, k, y, x]))


def total_offset(bundle, taps=None):
    """Total per-tap displacement p_k + dp_k as an (n, 2K, h, w) array."""
    taps = TAPS_3X3 if taps is None else taps
    k_taps = taps.shape[0]
    if bundle.num_taps != k_taps:
        raise ValueError(
            f"bundle has {bundle.num_taps} taps, grid has {k_taps}")
    off = bundle.offsets.data
    tap_flat = taps.reshape(1, 2 * k_taps, 1, 1).astype(off.dtype)
    return off + tap_flat


def deform_conv(x, bundle, weight, base_flow=None, taps=None, trace=None):
    """Modulated deformable convolution.

    Per output location p the K taps read x at p + p_k + dp_k (plus the
    shared base_flow(p) when given), each bilinearly interpolated sample
    is scaled by its modulation scalar, and the scaled samples are mixed
    across channels by the (c_out, c_in, 3, 3) weight. No bias term.

    Out-of-range taps read zeros. Differentiable w.r.t. the input map,
    offsets, modulations, weight and base_flow. When ``trace`` is a list,
    a SampleTrace with the absolute sampling positions is appended.
    """
    _require_4d(x, "deform_conv input")
    taps = TAPS_3X3 if taps is None else taps
    k_taps = taps.shape[0]
    if bundle.num_taps != k_taps:
        raise ValueError(
            f"bundle has {bundle.num_taps} taps but grid expects {k_taps}")
    n, c, h, w = x.shape
    if bundle.offsets.shape[0] != n or bundle.offsets.shape[2:] != (h, w):
        raise ValueError(
            f"bundle spatial dims {bundle.offsets.shape} do not match input {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if c_in != c or kh * kw != k_taps:
        raise ValueError(
            f"weight {weight.shape} incompatible with input {x.shape} and K={k_taps}")
    if base_flow is not None and (base_flow.shape[0] != n or
                                  base_flow.shape[1] != 2 or
                                  base_flow.shape[2:] != (h, w)):
        raise ValueError(
            f"base flow shape {base_flow.shape} incompatible with input {x.shape}")

    p = h * w
    offsets, mods = bundle.offsets, bundle.modulations
    off = offsets.data.reshape(n, k_taps, 2, p)
    grid = base_grid(1, h, w, x.dtype)[0].reshape(2, p)
    tap_arr = taps.astype(x.dtype)
    px = grid[0] + tap_arr[None, :, 0, None] + off[:, :, 0]
    py = grid[1] + tap_arr[None, :, 1, None] + off[:, :, 1]
    if base_flow is not None:
        px = px + base_flow.data[:, 0].reshape(n, 1, p)
        py = py + base_flow.data[:, 1].reshape(n, 1, p)

    if trace is not None:
        trace.append(SampleTrace(px.reshape(n, k_taps, h, w).copy(),
                                 py.reshape(n, k_taps, h, w).copy(),
                                 mods.data.copy()))

    m = mods.data.reshape(n, k_taps, p)
    w2 = weight.data.reshape(c_out, c, k_taps).transpose(0, 2, 1).reshape(c_out, k_taps * c)

    def compute_sampled():
        idx, wgt, dwx, dwy = corner_terms(px.reshape(n, k_taps * p),
                                          py.reshape(n, k_taps * p), h, w)
        flat = x.data.reshape(n, c, p).transpose(0, 2, 1)
        gathered = [gather_channels(flat, idx[i]) for i in range(4)]
        sampled = np.zeros((n, k_taps * p, c), dtype=x.dtype)
        for i in range(4):
            sampled += gathered[i] * wgt[i][..., None]
        return idx, wgt, dwx, dwy, gathered, sampled

    _, _, _, _, _, sampled = compute_sampled()
    modsampled = (sampled.reshape(n, k_taps, p, c) * m[..., None])
    cols = modsampled.transpose(0, 1, 3, 2).reshape(n, k_taps * c, p)
    out_data = np.matmul(w2, cols).reshape(n, c_out, h, w)

    inputs = [x, offsets, mods, weight]
    if base_flow is not None:
        inputs.append(base_flow)

    def backward(g):
        g2 = g.reshape(n, c_out, p)
        idx, wgt, dwx, dwy, gathered, sampled_b = compute_sampled()
        if weight.requires_grad:
            cols_b = (sampled_b.reshape(n, k_taps, p, c) * m[..., None]) \
                .transpose(0, 1, 3, 2).reshape(n, k_taps * c, p)
            dw2 = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(
                dw2.reshape(c_out, k_taps, c).transpose(0, 2, 1).reshape(weight.shape))
        dmodsampled = np.matmul(w2.T, g2).reshape(n, k_taps, c, p) \
            .transpose(0, 1, 3, 2)  # (n, K, p, c)
        if mods.requires_grad:
            dm = np.einsum("nkpc,nkpc->nkp", dmodsampled,
                           sampled_b.reshape(n, k_taps, p, c))
            mods.accumulate_grad(dm.reshape(mods.shape))
        dsampled = (dmodsampled * m[..., None]).reshape(n, k_taps * p, c)
        if x.requires_grad:
            acc = np.zeros((n, p, c), dtype=np.float64)
            for i in range(4):
                acc += scatter_channels((n, p, c), idx[i],
                                        dsampled * wgt[i][..., None])
            x.accumulate_grad(
                acc.transpose(0, 2, 1).reshape(n, c, h, w).astype(x.dtype))
        need_pos = offsets.requires_grad or \
            (base_flow is not None and base_flow.requires_grad)
        if need_pos:
            gpx = np.zeros((n, k_taps * p), dtype=x.dtype)
            gpy = np.zeros((n, k_taps * p), dtype=x.dtype)
            for i in range(4):
                dot = np.einsum("nqc,nqc->nq", dsampled, gathered[i])
                gpx += dot * dwx[i]
                gpy += dot * dwy[i]
            gpx = gpx.reshape(n, k_taps, p)
            gpy = gpy.reshape(n, k_taps, p)
            if offsets.requires_grad:
                doff = np.empty((n, k_taps, 2, p), dtype=x.dtype)
                doff[:, :, 0] = gpx
                doff[:, :, 1] = gpy
                offsets.accumulate_grad(doff.reshape(offsets.shape))
            if base_flow is not None and base_flow.requires_grad:
                dflow = np.stack([gpx.sum(axis=1), gpy.sum(axis=1)], axis=1)
                base_flow.accumulate_grad(dflow.reshape(base_flow.shape))

    return _make_node(out_data, tuple(inputs), backward)


class OffsetHead(Module):
    """Predicts offsets and modulation scalars from a feature pair.

    Three conv layers over the channel concatenation of the two inputs;
    the final layer is zero-initialized so a fresh head emits zero offsets
    and 0.5 modulations, i.e. plain-convolution behaviour.
    """

    def __init__(self, c_feat, k_taps=9, hidden=None, slope=0.1, rng=None,
                 dtype=np.float64):
        hidden = c_feat if hidden is None else hidden
        self.k_taps = k_taps
        self.slope = slope
        self.conv1 = Conv2d(2 * c_feat, hidden, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(hidden, 3 * k_taps, zero_init=True, dtype=dtype)

    def forward(self, ref_feat, nbr_feat):
        if ref_feat.shape != nbr_feat.shape:
            raise ValueError(
                f"offset head inputs disagree: {ref_feat.shape} vs {nbr_feat.shape}")
        x = concat_channels([ref_feat, nbr_feat])
        x = leaky_relu(self.conv1(x), self.slope)
        x = leaky_relu(self.conv2(x), self.slope)
        raw = self.conv3(x)
        k = self.k_taps
        offsets = channel_slice(raw, 0, 2 * k)
        modulations = sigmoid(channel_slice(raw, 2 * k, 3 * k))
        return OffsetBundle(offsets, modulations)

    __call__ = forward


def _tap_flow_offsets(offsets, flow, taps):
    """Flow interpolated at every tap's pre-flow position, as (n, 2K, h, w)."""
    n, _, h, w = flow.shape
    k_taps = taps.shape[0]
    grid = base_grid(n, h, w, flow.dtype)
    per_tap = []
    for k in range(k_taps):
        anchor = grid.copy()
        anchor[:, 0] += taps[k, 0]
        anchor[:, 1] += taps[k, 1]
        coords = channel_slice(offsets, 2 * k, 2 * k + 2) + Tensor(anchor)
        per_tap.append(bilinear_sample(flow, coords))
    return concat_channels(per_tap)


def fdc_naive(ref_feat, nbr_feat, flow, weight, head, taps=None, trace=None,
              bundle_sink=None):
    """Flow integration by sampling the flow-warped neighbor map.

    Equivalent to reading the original map at q_k + flow(q_k) for tap
    position q_k = p + p_k + dp_k: nearby taps can land on far-apart
    source content wherever the flow is discontinuous.
    """
    taps = TAPS_3X3 if taps is None else taps
    warped = warp(nbr_feat, flow)
    bundle = head(ref_feat, warped)
    if bundle_sink is not None:
        bundle_sink.append(bundle)
    eff_offsets = bundle.offsets + _tap_flow_offsets(bundle.offsets, flow, taps)
    eff = OffsetBundle(eff_offsets, bundle.modulations)
    return deform_conv(nbr_feat, eff, weight, taps=taps, trace=trace)


def fdc_advanced(ref_feat, nbr_feat, flow, weight, head, taps=None, trace=None,
                 bundle_sink=None):
    """Flow integration with one shared flow value per output location.

    The head sees exactly what it sees in naive mode; only the sampling
    rule changes: every tap for location p is displaced by flow(p) on the
    original neighbor map.
    """
    taps = TAPS_3X3 if taps is None else taps
    warped = warp(nbr_feat, flow)
    bundle = head(ref_feat, warped)
    if bundle_sink is not None:
        bundle_sink.append(bundle)
    return deform_conv(nbr_feat, bundle, weight, base_flow=flow, taps=taps,
                       trace=trace)


class DeformAlign(Module):
    """Two-layer deformable alignment cascade.

    Layer 1 integrates the flow (naive or advanced mode, or runs plain
    deformable convolution when mode is "none" / no flow is supplied);
    layer 2 is a plain deformable refinement whose head compares the
    reference features with the layer-1 output.
    """

    MODES = ("advanced", "naive", "none")

    def __init__(self, c_feat, mode="advanced", hidden=None, slope=0.1,
                 rng=None, dtype=np.float64):
        if mode not in self.MODES:
            raise ValueError(f"unknown fdc mode {mode!r}, expected {self.MODES}")
        self.mode = mode
        self.head1 = OffsetHead(c_feat, hidden=hidden, slope=slope, rng=rng,
                                dtype=dtype)
        self.weight1 = Tensor(kaiming_uniform(rng, (c_feat, c_feat, 3, 3),
                                              fan_in=c_feat * 9, dtype=dtype),
                              requires_grad=True)
        self.head2 = OffsetHead(c_feat, hidden=hidden, slope=slope, rng=rng,
                                dtype=dtype)
        self.weight2 = Tensor(kaiming_uniform(rng, (c_feat, c_feat, 3, 3),
                                              fan_in=c_feat * 9, dtype=dtype),
                              requires_grad=True)

    def forward(self, ref_feat, nbr_feat, flow=None, bundle_sink=None,
                trace=None):
        if self.mode == "none" or flow is None:
            bundle = self.head1(ref_feat, nbr_feat)
            if bundle_sink is not None:
                bundle_sink.append(bundle)
            aligned = deform_conv(nbr_feat, bundle, self.weight1, trace=trace)
        elif self.mode == "naive":
            aligned = fdc_naive(ref_feat, nbr_feat, flow, self.weight1,
                                self.head1, trace=trace, bundle_sink=bundle_sink)
        else:
            aligned = fdc_advanced(ref_feat, nbr_feat, flow, self.weight1,
                                   self.head1, trace=trace, bundle_sink=bundle_sink)
        bundle2 = self.head2(ref_feat, aligned)
        return deform_conv(aligned, bundle2, self.weight2, trace=trace)

    __call__ = forward


def offset_histogram(bundle, bin_edges, taps=None):
    """Fraction of total-offset magnitudes |p_k + dp_k| falling in each bin.

    bin_edges must be strictly increasing; samples outside the outermost
    edges are counted in the denominator but in no bin, so fractions need
    not sum to one.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be a strictly increasing 1-D sequence")
    tot = total_offset(bundle, taps)
    n, twok, h, w = tot.shape
    if n * twok * h * w == 0:
        raise ValueError("offset_histogram: empty bundle")
    k_taps = twok // 2
    vec = tot.reshape(n, k_taps, 2, h * w)
    mag = np.sqrt(vec[:, :, 0] ** 2 + vec[:, :, 1] ** 2).ravel()
    counts, _ = np.histogram(mag, bins=edges)
    return counts / mag.size


def histogram_rows(fractions, bin_edges):
    """CSV-ready rows (bin_lo, bin_hi, fraction, truncated_percent)."""
    rows = []
    for i, frac in enumerate(fractions):
        rows.append((float(bin_edges[i]), float(bin_edges[i + 1]), float(frac),
                     int(np.floor(frac * 100.0))))
    return rows
