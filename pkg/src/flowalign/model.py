"""The full video super-resolution network.

Per window: a shared feature extractor runs on every frame, each neighbor
is aligned to the reference by matching-based flow plus the two-layer
deformable cascade, a per-pixel temporal attention fuses the aligned
features, and a residual reconstruction trunk with two sub-pixel
upscaling stages emits the x4 frame on top of a bicubic base.
"""

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .deform import DeformAlign
from .flow import FlowEstimator
from .resample import bicubic_upsample
from .tensor import (Conv2d, Module, Tensor, channel_mean_dot, channel_slice,
                     channel_softmax, concat_channels, leaky_relu, load_tensor,
                     pixel_shuffle, save_tensor, scale_channels)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    """Architecture knobs; the paper-scale and desk-scale presets differ
    only in channel widths, block counts and patch sizes."""

    num_frames: int = 7
    c1: int = 16               # matching feature channels (1/4 resolution)
    c2: int = 16               # trunk feature channels (full LR resolution)
    extractor_blocks: int = 2
    recon_blocks: int = 3
    scale: int = 4
    fdc_mode: str = "advanced"   # advanced | naive | none
    flow_enabled: bool = True
    slope: float = 0.1
    temperature: float = 0.1
    window: int = 5
    sigma: float = 2.5
    dense_layers: int = 4
    dense_growth: int = 16
    head_hidden: int = 0       # 0 -> use c2
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_frames < 3 or self.num_frames % 2 != 1:
            raise ValueError(f"num_frames must be odd and >= 3, got {self.num_frames}")
        if self.scale != 4:
            raise ValueError(f"only x4 upscaling is supported, got {self.scale}")
        if self.fdc_mode not in DeformAlign.MODES:
            raise ValueError(f"unknown fdc_mode {self.fdc_mode!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def paper_preset(**overrides):
    cfg = ModelConfig(num_frames=7, c1=128, c2=128, extractor_blocks=5,
                      recon_blocks=10, dense_growth=32)
    return replace(cfg, **overrides) if overrides else cfg


def toy_preset(**overrides):
    cfg = ModelConfig()
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class FrameWindow:
    """An odd-length frame sequence with the middle frame as reference."""

    frames: list
    reference_index: int

    def __post_init__(self):
        if not self.frames:
            raise ValueError("empty frame window")
        if len(self.frames) % 2 != 1 or self.reference_index != len(self.frames) // 2:
            raise ValueError(
                f"window must be odd-length with the center as reference, got "
                f"{len(self.frames)} frames, reference {self.reference_index}")
        shape = self.frames[0].shape
        for f in self.frames:
            if f.shape != shape:
                raise ValueError(f"frame shapes disagree: {f.shape} vs {shape}")

    @classmethod
    def from_array(cls, arr, dtype=np.float64):
        """Build from an (F, n, 3, h, w) or (F, 3, h, w) array, clamped to [0, 1]."""
        arr = np.asarray(arr)
        if arr.ndim == 4:
            arr = arr[:, None]
        clamped = np.clip(arr, 0.0, 1.0).astype(dtype)
        frames = [Tensor(clamped[i]) for i in range(clamped.shape[0])]
        return cls(frames=frames, reference_index=len(frames) // 2)

    @property
    def reference(self):
        return self.frames[self.reference_index]

    def __len__(self):
        return len(self.frames)


class ResidualBlock(Module):
    """conv - LeakyReLU - conv with an identity skip."""

    def __init__(self, c, slope=0.1, rng=None, dtype=np.float64):
        self.slope = slope
        self.conv1 = Conv2d(c, c, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(c, c, rng=rng, dtype=dtype)

    def forward(self, x):
        return x + self.conv2(leaky_relu(self.conv1(x), self.slope))

    __call__ = forward


class FeatureExtractor(Module):
    """One conv followed by a cascade of residual blocks, full resolution."""

    def __init__(self, c2, blocks, slope=0.1, rng=None, dtype=np.float64):
        self.slope = slope
        self.head = Conv2d(3, c2, rng=rng, dtype=dtype)
        self.blocks = [ResidualBlock(c2, slope, rng, dtype) for _ in range(blocks)]

    def forward(self, frame):
        x = leaky_relu(self.head(frame), self.slope)
        for block in self.blocks:
            x = block(x)
        return x

    __call__ = forward


class TemporalFusion(Module):
    """Attention-weighted fusion of the aligned features.

    Per pixel, each frame's affinity is its channel correlation with the
    reference features, softmax-normalized over the temporal axis; the
    weighted features are concatenated and fused by three conv layers.
    """

    def __init__(self, c2, num_frames, slope=0.1, rng=None, dtype=np.float64):
        self.slope = slope
        self.num_frames = num_frames
        self.fuse1 = Conv2d(num_frames * c2, c2, k=1, padding=0, rng=rng, dtype=dtype)
        self.fuse2 = Conv2d(c2, c2, rng=rng, dtype=dtype)
        self.fuse3 = Conv2d(c2, c2, rng=rng, dtype=dtype)

    def attention_weights(self, aligned, ref_feat):
        corr = concat_channels([channel_mean_dot(a, ref_feat) for a in aligned])
        return channel_softmax(corr)

    def forward(self, aligned, ref_feat):
        if not aligned:
            raise ValueError("temporal fusion needs at least one aligned feature")
        if len(aligned) != self.num_frames:
            raise ValueError(
                f"expected {self.num_frames} aligned features, got {len(aligned)}")
        weights = self.attention_weights(aligned, ref_feat)
        weighted = [scale_channels(a, channel_slice(weights, i, i + 1))
                    for i, a in enumerate(aligned)]
        x = leaky_relu(self.fuse1(concat_channels(weighted)), self.slope)
        x = leaky_relu(self.fuse2(x), self.slope)
        return self.fuse3(x)

    __call__ = forward


class Reconstructor(Module):
    """Residual trunk, two sub-pixel x2 stages, final RGB conv, bicubic base."""

    def __init__(self, c2, blocks, slope=0.1, rng=None, dtype=np.float64):
        self.slope = slope
        self.blocks = [ResidualBlock(c2, slope, rng, dtype) for _ in range(blocks)]
        self.up1 = Conv2d(c2, 4 * c2, rng=rng, dtype=dtype)
        self.up2 = Conv2d(c2, 4 * c2, rng=rng, dtype=dtype)
        self.final = Conv2d(c2, 3, rng=rng, dtype=dtype)

    def forward(self, fused, ref_frame):
        x = fused
        for block in self.blocks:
            x = block(x)
        x = leaky_relu(pixel_shuffle(self.up1(x), 2), self.slope)
        x = leaky_relu(pixel_shuffle(self.up2(x), 2), self.slope)
        x = self.final(x)
        base = bicubic_upsample(ref_frame.data, 4).astype(x.dtype)
        return x + Tensor(base)

    __call__ = forward


@dataclass
class Diagnostics:
    """Optional per-forward capture of alignment internals."""

    flows: list = field(default_factory=list)        # FlowOutputs per neighbor
    bundles: list = field(default_factory=list)      # layer-1 OffsetBundle per neighbor
    traces: list = field(default_factory=list)       # SampleTrace per deform layer


class FlowGuidedSR(Module):
    """Feature extraction, per-neighbor alignment, fusion, reconstruction."""

    def __init__(self, config, seed=0):
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        hidden = config.head_hidden or config.c2
        self.config = config
        self.extractor = FeatureExtractor(config.c2, config.extractor_blocks,
                                          config.slope, rng, dtype)
        if config.flow_enabled:
            self.flow = FlowEstimator(config.c1, config.c2,
                                      temperature=config.temperature,
                                      window=config.window, sigma=config.sigma,
                                      dense_layers=config.dense_layers,
                                      dense_growth=config.dense_growth,
                                      slope=config.slope, rng=rng, dtype=dtype)
        else:
            self.flow = None
        self.align = DeformAlign(config.c2, mode=config.fdc_mode, hidden=hidden,
                                 slope=config.slope, rng=rng, dtype=dtype)
        self.fusion = TemporalFusion(config.c2, config.num_frames, config.slope,
                                     rng, dtype)
        self.recon = Reconstructor(config.c2, config.recon_blocks, config.slope,
                                   rng, dtype)

    def forward(self, window, diag=None):
        cfg = self.config
        if len(window) != cfg.num_frames:
            raise ValueError(
                f"window has {len(window)} frames, config expects {cfg.num_frames}")
        feats = [self.extractor(f) for f in window.frames]
        ref_idx = window.reference_index
        ref_frame = window.frames[ref_idx]
        ref_feat = feats[ref_idx]

        aligned = []
        for i, (frame, feat) in enumerate(zip(window.frames, feats)):
            if i == ref_idx:
                aligned.append(ref_feat)
                continue
            flow = None
            if self.flow is not None:
                outputs = self.flow.estimate(ref_frame, frame, ref_feat, feat)
                flow = outputs.fine
                if diag is not None:
                    diag.flows.append(outputs)
            aligned.append(self.align(
                ref_feat, feat, flow,
                bundle_sink=diag.bundles if diag is not None else None,
                trace=diag.traces if diag is not None else None))

        fused = self.fusion(aligned, ref_feat)
        return self.recon(fused, ref_frame)

    __call__ = forward


# ---------------------------------------------------------------------------
# checkpoints: manifest + one binary tensor per parameter + config
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
CONFIG_NAME = "config.cfg"


def save_checkpoint(dirpath, model):
    """Write config, a name/shape manifest and one FDT4 file per parameter."""
    from .fileio import write_config

    os.makedirs(dirpath, exist_ok=True)
    write_config(os.path.join(dirpath, CONFIG_NAME), model.config.to_dict())
    lines = []
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"p{i:04d}.fdt4"
        arr = p.data
        padded = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
        save_tensor(os.path.join(dirpath, fname), padded)
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)} {fname}")
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(dirpath):
    """Read a checkpoint directory back into (config, {name: array})."""
    from .fileio import read_config

    cfg = ModelConfig.from_dict(read_config(os.path.join(dirpath, CONFIG_NAME)))
    arrays = {}
    with open(os.path.join(dirpath, MANIFEST_NAME)) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, shape_s, fname = line.split()
            shape = tuple(int(d) for d in shape_s.split(","))
            arr = load_tensor(os.path.join(dirpath, fname))
            arrays[name] = arr.reshape(shape)
    return cfg, arrays


def model_from_checkpoint(dirpath):
    cfg, arrays = load_checkpoint(dirpath)
    model = FlowGuidedSR(cfg, seed=0)
    model.load_state_arrays(arrays)
    return model
