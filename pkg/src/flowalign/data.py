"""Synthetic training sequences with known motion, and the HR -> LR pipeline.

Sequences are rendered from band-limited noise textures so every frame
pair has exactly known ground-truth flow; that replaces photographic data
for desk-scale experiments where the point is verifying alignment, not
fidelity. All displacements are expressed in HR pixels per frame.
"""

from dataclasses import dataclass, field

import numpy as np

from .resample import sample_shifted

BLUR_SIGMA = 1.6
BLUR_SIZE = 13
LR_PHASE = 2  # stride-4 tap closest to the 1.5 px box center


def gaussian_kernel1d(sigma, size):
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    xs = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def blur_separable(data, sigma, size, mode="reflect"):
    """Gaussian blur along the last two axes of an array."""
    k = gaussian_kernel1d(sigma, size)
    r = size // 2
    pad = [(0, 0)] * (data.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(np.asarray(data, dtype=np.float64), pad, mode=mode)
    h, w = data.shape[-2:]
    tmp = np.zeros(data.shape[:-2] + (h, w + 2 * r), dtype=np.float64)
    for i in range(size):
        tmp += k[i] * padded[..., i:i + h, :]
    out = np.zeros(data.shape, dtype=np.float64)
    for i in range(size):
        out += k[i] * tmp[..., :, i:i + w]
    return out


def degrade(hr):
    """Gaussian blur (sigma 1.6, 13x13, reflective) then stride-4 sampling."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape[-1] % 4 or hr.shape[-2] % 4:
        raise ValueError(f"HR dims {hr.shape[-2:]} must be divisible by 4")
    blurred = blur_separable(hr, BLUR_SIGMA, BLUR_SIZE)
    return blurred[..., LR_PHASE::4, LR_PHASE::4]


def downsample_flow(flow_hr):
    """HR backward flow -> LR backward flow (same taps as degrade, values / 4)."""
    return flow_hr[..., LR_PHASE::4, LR_PHASE::4] / 4.0


@dataclass
class SynthSpec:
    """Recipe for one synthetic sequence."""

    patch: int = 128           # HR patch side
    length: int = 7            # frames, odd
    motion: str = "global"     # "global" or "objects"
    min_disp: float = 0.0      # HR px per frame
    max_disp: float = 6.0
    num_objects: int = 2
    texture_smooth: float = 1.2
    augment: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.length % 2 != 1:
            raise ValueError(f"sequence length must be odd, got {self.length}")
        if self.max_disp < 0 or self.min_disp < 0 or self.min_disp > self.max_disp:
            raise ValueError(
                f"bad displacement range [{self.min_disp}, {self.max_disp}]")
        if self.motion not in ("global", "objects"):
            raise ValueError(f"unknown motion model {self.motion!r}")


@dataclass
class SynthSequence:
    """One rendered sequence: HR frames plus exact ground truth."""

    hr: np.ndarray                    # (F, 3, P, P) in [0, 1]
    flows_hr: np.ndarray              # (F, 2, P, P) backward flow ref -> frame f
    reference_index: int

    @property
    def reference(self):
        return self.hr[self.reference_index]

    def lr_window(self):
        return degrade(self.hr)

    def flows_lr(self):
        return downsample_flow(self.flows_hr)


def make_texture(rng, size, smooth):
    """Band-limited RGB noise stretched to [0, 1] per channel."""
    noise = rng.standard_normal((3, size, size))
    ksize = int(2 * np.ceil(3 * smooth) + 1)
    tex = blur_separable(noise, smooth, ksize, mode="wrap")
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-9)


def _velocity(rng, spec):
    speed = rng.uniform(spec.min_disp, spec.max_disp)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([speed * np.cos(angle), speed * np.sin(angle)])


def _soft_box(size, y0, x0, hgt, wid, edge=1.0):
    """Box indicator with a slightly blurred edge for sub-pixel compositing."""
    mask = np.zeros((size, size), dtype=np.float64)
    mask[y0:y0 + hgt, x0:x0 + wid] = 1.0
    ksz = int(2 * np.ceil(3 * edge) + 1)
    return blur_separable(mask, edge, ksz, mode="constant")


def synth_sequence(spec, rng=None):
    """Render one sequence with exactly known per-pixel backward flow.

    Global mode translates a single texture. Object mode composites
    rectangles with independent velocities over a moving background; the
    returned flow is piecewise constant over the reference-frame masks
    (occlusion effects are ignored).
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    frames_n = spec.length
    center = frames_n // 2
    patch = spec.patch
    margin = int(np.ceil(spec.max_disp * center)) + 4
    master_size = patch + 2 * margin

    layers = [(make_texture(rng, master_size, spec.texture_smooth),
               _velocity(rng, spec), None)]
    if spec.motion == "objects":
        for _ in range(spec.num_objects):
            tex = make_texture(rng, master_size, spec.texture_smooth)
            vel = _velocity(rng, spec)
            hgt = int(rng.integers(patch // 6, patch // 2))
            wid = int(rng.integers(patch // 6, patch // 2))
            y0 = margin + int(rng.integers(0, patch - hgt))
            x0 = margin + int(rng.integers(0, patch - wid))
            layers.append((tex, vel, _soft_box(master_size, y0, x0, hgt, wid)))

    hr = np.zeros((frames_n, 3, patch, patch), dtype=np.float64)
    flows = np.zeros((frames_n, 2, patch, patch), dtype=np.float64)
    ref_masks = []
    for tex, vel, mask in layers:
        if mask is None:
            ref_masks.append(np.ones((patch, patch), dtype=np.float64))
        else:
            ref_masks.append(sample_shifted(mask, patch, patch, margin, margin))
    for f in range(frames_n):
        dt = f - center
        frame = None
        for (tex, vel, mask), ref_mask in zip(layers, ref_masks):
            oy = margin - vel[1] * dt
            ox = margin - vel[0] * dt
            img = sample_shifted(tex, patch, patch, oy, ox)
            if frame is None:
                frame = img
            else:
                m = sample_shifted(mask, patch, patch, oy, ox)
                frame = frame * (1.0 - m) + img * m
            if dt != 0:
                sel = ref_mask > 0.5 if mask is not None else None
                if sel is None:
                    flows[f, 0] = vel[0] * dt
                    flows[f, 1] = vel[1] * dt
                else:
                    flows[f, 0][sel] = vel[0] * dt
                    flows[f, 1][sel] = vel[1] * dt
        hr[f] = np.clip(frame, 0.0, 1.0)

    if spec.augment:
        hr, flows = _augment(hr, flows, rng)
    return SynthSequence(hr=hr, flows_hr=flows, reference_index=center)


def _augment(hr, flows, rng):
    """Random flips and a 90-degree rotation, each with probability 0.5."""
    if rng.random() < 0.5:  # horizontal flip
        hr = hr[..., ::-1]
        flows = flows[..., ::-1]
        flows = np.stack([-flows[:, 0], flows[:, 1]], axis=1)
    if rng.random() < 0.5:  # vertical flip
        hr = hr[..., ::-1, :]
        flows = flows[..., ::-1, :]
        flows = np.stack([flows[:, 0], -flows[:, 1]], axis=1)
    if rng.random() < 0.5:  # rotate 90 degrees counter-clockwise
        hr = np.rot90(hr, axes=(-2, -1))
        flows = np.rot90(flows, axes=(-2, -1))
        flows = np.stack([flows[:, 1], -flows[:, 0]], axis=1)
    return np.ascontiguousarray(hr), np.ascontiguousarray(flows)


def textured_pair(rng, size, shift, smooth=1.2):
    """Two full-resolution crops of one texture related by a real shift.

    Returns (img_ref, img_shifted) where the backward flow from the
    reference into the second image is exactly ``shift`` everywhere
    (sufficiently far from the borders).
    """
    shift = np.asarray(shift, dtype=np.float64)
    margin = int(np.ceil(np.abs(shift).max())) + 4
    master = make_texture(rng, size + 2 * margin, smooth)
    ref = sample_shifted(master, size, size, margin, margin)
    moved = sample_shifted(master, size, size,
                           margin - shift[1], margin - shift[0])
    return ref, moved
