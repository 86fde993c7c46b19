"""Training loop, LR schedule, inference helpers, and evaluation.

The loop is fully deterministic under a fixed seed: every random draw
(image choice, patch corner, augmentation code, noise) comes from one
Philox generator whose state is stored in each checkpoint, so resuming
reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, load_checkpoint, require_config_match,
                         save_checkpoint)
from .data import (augment, from_tensor, load_image, make_rng, read_manifest,
                   save_image, to_tensor)
from .errors import DataError, NumericError, UsageError
from .metrics import MetricReport, psnr, ssim
from .model import ModelConfig, SADNet
from .optim import AdamState, adam_step
from .tensor import Tensor


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_kind: str = "L2"  # L2 for the synthetic-noise pipeline
    batch_size: int = 16
    patch_size: int = 128
    lr: float = 1e-4
    lr_halve_at: int = 300_000
    max_iters: int = 0
    seed: int = 0
    manifest: str = ""
    checkpoint_dir: str = "checkpoints"
    log_interval: int = 10
    checkpoint_interval: int = 1000

    def validate(self) -> None:
        self.model.validate()
        if self.batch_size < 1 or self.patch_size < 1 or self.max_iters < 0:
            raise UsageError("batch_size and patch_size must be positive, "
                             "max_iters non-negative")
        div = 2 ** (self.model.scales - 1)
        if self.patch_size % div:
            raise UsageError(
                f"patch_size {self.patch_size} must be divisible by {div}")
        if self.loss_kind not in ("L1", "L2"):
            raise UsageError(f"loss_kind must be L1 or L2, got {self.loss_kind}")


_MODEL_KEYS = {
    "in_channels": int, "scales": int, "resblocks_per_scale": int,
    "rsabs_per_scale": int, "context_compression": int, "kernel_size": int,
    "updown_kernel": int, "leaky_slope": float,
    "channels_per_scale": "int_list", "context_dilations": "int_list",
}
_TRAIN_KEYS = {
    "loss_kind": str, "batch_size": int, "patch_size": int, "lr": float,
    "lr_halve_at": int, "max_iters": int, "seed": int, "manifest": str,
    "checkpoint_dir": str, "log_interval": int, "checkpoint_interval": int,
}


def parse_train_config(path) -> TrainConfig:
    """Flat key=value config file; unknown keys are rejected."""
    cfg = TrainConfig()
    model_kwargs = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _MODEL_KEYS:
            conv = _MODEL_KEYS[key]
            model_kwargs[key] = (tuple(int(v) for v in value.split(","))
                                 if conv == "int_list" else conv(value))
        elif key in _TRAIN_KEYS:
            setattr(cfg, key, _TRAIN_KEYS[key](value))
        else:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
    if model_kwargs:
        base = ModelConfig().to_dict()
        base.update({k: list(v) if isinstance(v, tuple) else v
                     for k, v in model_kwargs.items()})
        cfg.model = ModelConfig.from_dict(base)
    cfg.validate()
    return cfg


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Initial rate, halved once after lr_halve_at iterations."""
    if iteration < 0:
        raise UsageError(f"negative iteration {iteration}")
    return config.lr if iteration < config.lr_halve_at else config.lr / 2.0


def _load_training_set(config: TrainConfig):
    entries = read_manifest(config.manifest)
    missing = [e.clean_path for e in entries if not os.path.exists(e.clean_path)]
    if missing:
        raise DataError("missing training images: " + ", ".join(missing))
    images = [to_tensor(load_image(e.clean_path), dtype=np.float32)
              for e in entries]
    for e, img in zip(entries, images):
        _, _, h, w = img.shape
        if h < config.patch_size or w < config.patch_size:
            raise DataError(
                f"{e.clean_path}: image {h}x{w} smaller than patch size "
                f"{config.patch_size}")
    return entries, images


def train(config: TrainConfig, resume_from=None, log_stream=None) -> tuple[str, Checkpoint]:
    """Run the training loop; returns (final checkpoint path, checkpoint)."""
    config.validate()
    entries, images = _load_training_set(config)
    os.makedirs(config.checkpoint_dir, exist_ok=True)

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        require_config_match(config.model, ck.config, resume_from)
        model, adam, start = ck.model, ck.adam, ck.iteration
        rng = make_rng(config.seed)
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
    else:
        model = SADNet(config.model, rng=np.random.default_rng(config.seed),
                       dtype=np.float32)
        adam = AdamState(lr=config.lr)
        start = 0
        rng = make_rng(config.seed)

    params = model.params()
    ps = config.patch_size
    t0 = time.monotonic()

    def emit(line: str) -> None:
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    def save(path: str, iteration: int) -> None:
        save_checkpoint(path, model, adam, iteration, rng.bit_generator.state)

    final_path = os.path.join(config.checkpoint_dir, "ckpt_final.sadn")
    for it in range(start, config.max_iters):
        lr = lr_schedule(it, config)
        clean_parts, noisy_parts = [], []
        for _ in range(config.batch_size):
            ei = int(rng.integers(0, len(entries)))
            img = images[ei]
            _, _, h, w = img.shape
            top = int(rng.integers(0, h - ps + 1))
            left = int(rng.integers(0, w - ps + 1))
            patch = Tensor(img.data[:, :, top:top + ps, left:left + ps].copy())
            patch = augment(patch, int(rng.integers(0, 8)))
            sigma = entries[ei].sigma
            noise = rng.normal(0.0, sigma / 255.0, patch.shape).astype(np.float32)
            clean_parts.append(patch.data)
            noisy_parts.append(patch.data + noise)
        x = Tensor(np.concatenate(noisy_parts, axis=0))
        target = Tensor(np.concatenate(clean_parts, axis=0))
        pred = model(x)
        loss = T.loss(config.loss_kind, pred, target)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            diag = os.path.join(config.checkpoint_dir, "ckpt_nonfinite.sadn")
            save(diag, it)
            raise NumericError(
                f"non-finite loss {loss_value} at iteration {it}; "
                f"diagnostic checkpoint written to {diag}")
        loss.backward()
        adam_step(params, adam, lr=lr)
        T.zero_grads(p for _, p in params)
        done = it + 1
        if config.log_interval and done % config.log_interval == 0:
            emit(f"{done}\t{loss_value:.6e}\t{lr:.6e}\t"
                 f"{time.monotonic() - t0:.3f}")
        if config.checkpoint_interval and done % config.checkpoint_interval == 0:
            save(os.path.join(config.checkpoint_dir, f"ckpt_{done:08d}.sadn"), done)
    save(final_path, max(config.max_iters, start))
    return final_path, Checkpoint(model.config, model, adam,
                                  max(config.max_iters, start),
                                  rng.bit_generator.state)


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def denoise_tensor(model: SADNet, x: Tensor) -> Tensor:
    """Forward pass with reflect padding to the required divisibility."""
    _, _, h, w = x.shape
    div = 2 ** (model.config.scales - 1)
    ph = (-h) % div
    pw = (-w) % div
    data = x.data
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    out = model(Tensor(data))
    return Tensor(out.data[:, :, :h, :w])


def denoise_image(checkpoint_path, input_path, output_path) -> None:
    ck = load_checkpoint(checkpoint_path)
    buf = load_image(input_path)
    if buf.channels != ck.config.in_channels:
        raise DataError(
            f"{input_path} has {buf.channels} channels, checkpoint model "
            f"expects {ck.config.in_channels}")
    x = to_tensor(buf, dtype=ck.model.tail.weight.data.dtype)
    y = denoise_tensor(ck.model, x)
    save_image(from_tensor(y), output_path)


def evaluate(checkpoint_path, manifest_path) -> MetricReport:
    ck = load_checkpoint(checkpoint_path)
    entries = read_manifest(manifest_path)
    missing = [p for e in entries for p in (e.clean_path, e.noisy_path)
               if not os.path.exists(p)]
    if missing:
        raise DataError("missing files: " + ", ".join(missing))
    report = MetricReport()
    dtype = ck.model.tail.weight.data.dtype
    for e in entries:
        clean = load_image(e.clean_path)
        noisy = load_image(e.noisy_path)
        denoised = from_tensor(denoise_tensor(ck.model, to_tensor(noisy, dtype)))
        report.add(os.path.basename(e.noisy_path), psnr(denoised, clean),
                   ssim(denoised, clean))
    return report
