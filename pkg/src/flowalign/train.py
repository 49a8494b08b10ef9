"""L1 loss, Adam, cosine schedule and the desk-scale training loop."""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .data import SynthSpec, degrade, synth_sequence
from .fileio import write_csv
from .metrics import psnr
from .model import FlowGuidedSR, FrameWindow, save_checkpoint
from .resample import bicubic_upsample
from .tensor import Tensor, _make_node, no_grad


class TrainingDiverged(RuntimeError):
    pass


def l1_loss(pred, target):
    """Mean absolute difference; gradient is sign(pred - target) / count."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out_data = np.abs(diff).mean()

    def backward(g):
        grad = g * np.sign(diff) / count
        if pred.requires_grad:
            pred.accumulate_grad(grad)
        if target.requires_grad:
            target.accumulate_grad(-grad)

    return _make_node(out_data, (pred, target), backward)


def cosine_lr(epoch, period, lr_max=1e-4, lr_min=1e-6):
    """Half-cosine decay from lr_max at 0 to lr_min at the period end."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch >= period:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * epoch / period))


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def clip_global_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    clip_norm: float = 10.0
    eval_interval: int = 250
    holdout: int = 8
    seed: int = 0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    final_psnr: float
    bicubic_psnr: float
    final_loss: float
    first_loss: float
    log_rows: list = field(default_factory=list)
    checkpoint_dir: str = ""


def _window_from_sequences(seqs, dtype):
    """Stack sequences into one batched window plus the HR reference target."""
    lr = np.stack([s.lr_window() for s in seqs], axis=1)  # (F, B, 3, h, w)
    hr_ref = np.stack([s.reference for s in seqs], axis=0)
    return FrameWindow.from_array(lr, dtype=dtype), hr_ref.astype(dtype)


def holdout_psnr(model, window, hr_ref, border=4):
    """PSNR of the clamped model output against the HR reference."""
    with no_grad():
        pred = model(window).data
    pred = np.clip(pred, 0.0, 1.0)
    b = border
    return float(np.mean([
        psnr(pred[i, :, b:-b, b:-b], hr_ref[i, :, b:-b, b:-b])
        for i in range(pred.shape[0])]))


def bicubic_psnr(lr_ref, hr_ref, border=4):
    up = np.clip(bicubic_upsample(lr_ref, 4), 0.0, 1.0)
    b = border
    return float(np.mean([
        psnr(up[i, :, b:-b, b:-b], hr_ref[i, :, b:-b, b:-b])
        for i in range(hr_ref.shape[0])]))


def train(model_config, spec, train_config, out_dir, log_name="metrics.csv",
          quiet=False):
    """Deterministic training loop.

    Sampling, initialization and the holdout set are all driven by child
    streams of one seed, so identical (configs, seed) reproduce identical
    logs and checkpoints bit for bit. Writes ``metrics.csv`` with columns
    step, lr, loss, psnr_holdout (blank between evals) and a final
    checkpoint under ``checkpoint/``.
    """
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(train_config.seed)
    model_seed, data_seed, holdout_seed = root.spawn(3)
    dtype = model_config.np_dtype

    model = FlowGuidedSR(model_config, seed=model_seed)
    opt = Adam(list(model.named_parameters()), lr=train_config.lr_max)
    params = model.parameters()

    hold_rng = np.random.default_rng(holdout_seed)
    hold_seqs = [synth_sequence(spec, hold_rng) for _ in range(train_config.holdout)]
    hold_window, hold_hr = _window_from_sequences(hold_seqs, dtype)
    hold_lr_ref = np.stack([degrade(s.reference) for s in hold_seqs], axis=0)
    baseline = bicubic_psnr(hold_lr_ref, hold_hr)

    data_rng = np.random.default_rng(data_seed)
    rows = []
    first_loss = None
    final_psnr = float("nan")
    for step in range(train_config.steps):
        lr = cosine_lr(step, train_config.steps, train_config.lr_max,
                       train_config.lr_min)
        seqs = [synth_sequence(spec, data_rng) for _ in range(train_config.batch)]
        window, hr_ref = _window_from_sequences(seqs, dtype)
        pred = model(window)
        loss = l1_loss(pred, Tensor(hr_ref))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"loss became non-finite at step {step} (lr={lr:.3g})")
        if first_loss is None:
            first_loss = loss_val
        opt.zero_grad()
        loss.backward()
        clip_global_norm(params, train_config.clip_norm)
        opt.lr = lr
        opt.step()

        eval_now = (step + 1) % train_config.eval_interval == 0 or \
            step == train_config.steps - 1
        psnr_s = ""
        if eval_now:
            final_psnr = holdout_psnr(model, hold_window, hold_hr)
            psnr_s = f"{final_psnr:.6f}"
            if not quiet:
                print(f"step {step + 1:5d}  lr {lr:.3g}  loss {loss_val:.5f}  "
                      f"psnr {final_psnr:.3f} (bicubic {baseline:.3f})")
        rows.append((step, f"{lr:.10g}", f"{loss_val:.10g}", psnr_s))

    if train_config.steps == 0:
        final_psnr = holdout_psnr(model, hold_window, hold_hr)

    write_csv(os.path.join(out_dir, log_name),
              ("step", "lr", "loss", "psnr_holdout"), rows)
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt, model)
    return TrainResult(final_psnr=final_psnr, bicubic_psnr=baseline,
                       final_loss=float("nan") if first_loss is None else loss_val,
                       first_loss=first_loss if first_loss is not None else float("nan"),
                       log_rows=rows, checkpoint_dir=ckpt), model
