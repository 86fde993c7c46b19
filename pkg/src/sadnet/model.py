"""Spatial-adaptive denoising network.

Four-scale encoder-decoder: a 1x1 head conv, per-scale residual blocks with
2x2 stride-2 down-convolutions, a dilated context block at the coarsest
scale, and a decoder that per scale fuses encoder skip features, predicts
deformable sampling offsets coarse-to-fine, applies residual
spatial-adaptive blocks (RSABs), and upsamples with 2x2 stride-2 transposed
convolutions. A zero-initialized 1x1 tail plus a long skip make the network
the identity at step 0, so the trainable path models only the noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .deform import modulated_deform_conv2d
from .errors import ConfigurationError, DataError, UsageError
from .tensor import Tensor


@dataclass
class ModelConfig:
    """All architectural hyperparameters.

    Defaults give the stock 4-scale design: channels 32/64/128/256, context
    dilations 1/2/3/4 with compression ratio 4, 3x3 convolutions everywhere
    except the 1x1 head/tail and 2x2 up/down layers. One residual block per
    encoder scale and one RSAB per decoder scale lands the parameter count
    near the 4.3M target.
    """

    in_channels: int = 3
    scales: int = 4
    channels_per_scale: tuple = (32, 64, 128, 256)
    resblocks_per_scale: int = 1
    rsabs_per_scale: int = 1
    context_dilations: tuple = (1, 2, 3, 4)
    context_compression: int = 4
    leaky_slope: float = 0.2
    kernel_size: int = 3
    updown_kernel: int = 2

    def validate(self) -> None:
        if self.in_channels not in (1, 3):
            raise ConfigurationError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if len(self.channels_per_scale) != self.scales:
            raise ConfigurationError(
                f"channels_per_scale has {len(self.channels_per_scale)} entries "
                f"for {self.scales} scales")
        if any(c < 1 for c in self.channels_per_scale):
            raise ConfigurationError("channels_per_scale entries must be positive")
        if self.channels_per_scale[-1] % self.context_compression != 0:
            raise ConfigurationError(
                f"context_compression {self.context_compression} does not divide "
                f"the coarsest channel count {self.channels_per_scale[-1]}")
        if self.resblocks_per_scale < 1 or self.rsabs_per_scale < 1:
            raise ConfigurationError("block counts must be >= 1")

    @property
    def k_taps(self) -> int:
        return self.kernel_size * self.kernel_size

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "scales": self.scales,
            "channels_per_scale": list(self.channels_per_scale),
            "resblocks_per_scale": self.resblocks_per_scale,
            "rsabs_per_scale": self.rsabs_per_scale,
            "context_dilations": list(self.context_dilations),
            "context_compression": self.context_compression,
            "leaky_slope": self.leaky_slope,
            "kernel_size": self.kernel_size,
            "updown_kernel": self.updown_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{**d,
                     "channels_per_scale": tuple(d["channels_per_scale"]),
                     "context_dilations": tuple(d["context_dilations"])})
        cfg.validate()
        return cfg


# SADNet(1248) is a dilation preset, not a separate code path.
PRESETS = {
    "sadnet": ModelConfig(),
    "sadnet1248": ModelConfig(context_dilations=(1, 2, 4, 8)),
}


@dataclass
class ScaleState:
    """Per-scale decoder state captured during a forward pass."""
    scale: int
    features: Tensor
    offsets: Tensor
    masks: Tensor


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, rng, in_c, out_c, k, stride=1, padding=0, dilation=1,
                 zero_init=False, dtype=np.float32):
        shape = (out_c, in_c, k, k)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = _he_uniform(rng, shape, in_c * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)
        self.stride = (stride, stride)
        self.dilation = (dilation, dilation)
        self.padding = (padding, padding)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation,
                        self.padding)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class ConvTranspose2d:
    def __init__(self, rng, in_c, out_c, k, stride=2, dtype=np.float32):
        w = _he_uniform(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)
        self.stride = (stride, stride)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.bias, self.stride)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class DeformConv2d:
    """3x3 modulated deformable convolution, padding 1."""

    def __init__(self, rng, in_c, out_c, k, dtype=np.float32):
        w = _he_uniform(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)
        self.padding = (k // 2, k // 2)

    def __call__(self, x, offsets, masks):
        return modulated_deform_conv2d(x, self.weight, self.bias, offsets,
                                       masks, self.padding)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class ResBlock:
    """conv3x3 -> leaky ReLU -> conv3x3 with an identity skip."""

    def __init__(self, rng, channels, k=3, slope=0.2, dtype=np.float32):
        p = k // 2
        self.conv1 = Conv2d(rng, channels, channels, k, padding=p, dtype=dtype)
        self.conv2 = Conv2d(rng, channels, channels, k, padding=p, dtype=dtype)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2(T.leaky_relu(self.conv1(x), self.slope)))

    def params(self, prefix):
        return self.conv1.params(prefix + ".conv1") + self.conv2.params(prefix + ".conv2")


class RSAB:
    """Residual spatial-adaptive block: deformable conv replaces the first conv."""

    def __init__(self, rng, channels, k=3, slope=0.2, dtype=np.float32):
        self.dconv = DeformConv2d(rng, channels, channels, k, dtype=dtype)
        self.conv2 = Conv2d(rng, channels, channels, k, padding=k // 2, dtype=dtype)
        self.slope = slope

    def __call__(self, x, offsets, masks):
        h = self.dconv(x, offsets, masks)
        return T.add(x, self.conv2(T.leaky_relu(h, self.slope)))

    def params(self, prefix):
        return self.dconv.params(prefix + ".dconv") + self.conv2.params(prefix + ".conv2")


def upsample_offsets(offsets: Tensor, masks: Tensor) -> tuple[Tensor, Tensor]:
    """Transfer offset/modulation fields to the next finer scale.

    Bilinear 2x spatial upsampling of both; offset values are additionally
    doubled (they are measured in pixels of the new, finer grid) while
    modulation values are dimensionless and pass through unchanged.
    """
    return T.scale(bilinear_upsample_x2(offsets), 2.0), bilinear_upsample_x2(masks)


def _upsample_axis_index(size: int, dtype):
    # half-pixel-center mapping with edge replication
    src = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    t = (src - i0f).astype(dtype)
    i0 = np.clip(i0f, 0, size - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, size - 1).astype(np.int64)
    return i0, i1, t


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Differentiable bilinear 2x spatial upsampling (half-pixel centers)."""
    n, c, h, w = x.shape
    dtype = x.data.dtype
    iy0, iy1, ty = _upsample_axis_index(h, dtype)
    ix0, ix1, tx = _upsample_axis_index(w, dtype)
    ty_b = ty[None, None, :, None]
    tx_b = tx[None, None, None, :]
    xh = x.data[:, :, iy0, :] * (1 - ty_b) + x.data[:, :, iy1, :] * ty_b
    y = xh[:, :, :, ix0] * (1 - tx_b) + xh[:, :, :, ix1] * tx_b

    def make_backward(out: Tensor):
        def _backward():
            gy = out.grad
            # scatter back along width, then height
            gxh = np.zeros((n, c, 2 * h, w), dtype=dtype)
            gxh_m = np.moveaxis(gxh, 3, 0)
            gy_m = np.moveaxis(gy * (1 - tx_b), 3, 0)
            np.add.at(gxh_m, ix0, gy_m)
            gy_m = np.moveaxis(gy * tx_b, 3, 0)
            np.add.at(gxh_m, ix1, gy_m)
            gx = np.zeros_like(x.data)
            gx_m = np.moveaxis(gx, 2, 0)
            np.add.at(gx_m, iy0, np.moveaxis(gxh * (1 - ty_b), 2, 0))
            np.add.at(gx_m, iy1, np.moveaxis(gxh * ty_b, 2, 0))
            x.accumulate_grad(gx)
        return _backward

    return T._node(y, (x,), make_backward)


class OffsetTransfer:
    """Predict the offset and modulation fields for one decoder scale.

    conv3x3 + leaky ReLU on the scale's features; when a coarser scale's
    fields exist they are upsampled and concatenated before the final conv,
    which emits 2K raw offset channels and K mask logits (sigmoid). The
    final conv is zero-initialized so training starts from plain
    convolution behavior: offsets 0, masks 0.5.
    """

    def __init__(self, rng, channels, k_taps=9, has_prev=False, slope=0.2,
                 dtype=np.float32):
        self.k_taps = k_taps
        self.slope = slope
        self.conv1 = Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)
        head_in = channels + (3 * k_taps if has_prev else 0)
        self.head = Conv2d(rng, head_in, 3 * k_taps, 3, padding=1,
                           zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor, prev=None):
        f = T.leaky_relu(self.conv1(x), self.slope)
        if prev is not None:
            up_off, up_mask = upsample_offsets(*prev)
            f = T.concat_channels(f, up_off, up_mask)
        raw = self.head(f)
        k2 = 2 * self.k_taps
        offsets = T.slice_channels(raw, 0, k2)
        masks = T.sigmoid(T.slice_channels(raw, k2, 3 * self.k_taps))
        return offsets, masks

    def params(self, prefix):
        return self.conv1.params(prefix + ".conv1") + self.head.params(prefix + ".head")


class ContextBlock:
    """Parallel dilated 3x3 convolutions over channel-compressed features.

    1x1 compression, one branch per dilation rate (padding = rate so shapes
    match), channel concat, 1x1 fusion back to the input width, identity
    skip.
    """

    def __init__(self, rng, channels, dilations=(1, 2, 3, 4), compression=4,
                 slope=0.2, dtype=np.float32):
        if channels % compression != 0:
            raise ConfigurationError(
                f"context block: compression {compression} does not divide "
                f"{channels} channels")
        inner = channels // compression
        self.slope = slope
        self.compress = Conv2d(rng, channels, inner, 1, dtype=dtype)
        self.branches = [Conv2d(rng, inner, inner, 3, padding=d, dilation=d,
                                dtype=dtype) for d in dilations]
        self.fuse = Conv2d(rng, inner * len(dilations), channels, 1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        f = T.leaky_relu(self.compress(x), self.slope)
        outs = [T.leaky_relu(b(f), self.slope) for b in self.branches]
        return T.add(x, self.fuse(T.concat_channels(*outs)))

    def params(self, prefix):
        out = self.compress.params(prefix + ".compress")
        for i, b in enumerate(self.branches):
            out += b.params(f"{prefix}.branch{i}")
        return out + self.fuse.params(prefix + ".fuse")


class SADNet:
    """The full network; construction order fixes parameter ordering."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        config.validate()
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        cfg = config
        ch = cfg.channels_per_scale
        s_count = cfg.scales
        slope = cfg.leaky_slope
        k = cfg.kernel_size

        self.head = Conv2d(rng, cfg.in_channels, ch[0], 1, dtype=dtype)
        self.enc = [[ResBlock(rng, ch[s], k, slope, dtype)
                     for _ in range(cfg.resblocks_per_scale)]
                    for s in range(s_count)]
        self.down = [Conv2d(rng, ch[s], ch[s + 1], cfg.updown_kernel,
                            stride=cfg.updown_kernel, dtype=dtype)
                     for s in range(s_count - 1)]
        self.context = ContextBlock(rng, ch[-1], cfg.context_dilations,
                                    cfg.context_compression, slope, dtype)
        # decoder, coarsest scale first
        self.fuse = [Conv2d(rng, 2 * ch[s], ch[s], k, padding=k // 2, dtype=dtype)
                     for s in range(s_count - 1)]
        self.offset = [OffsetTransfer(rng, ch[s], cfg.k_taps,
                                      has_prev=(s < s_count - 1), slope=slope,
                                      dtype=dtype)
                       for s in range(s_count)]
        self.rsabs = [[RSAB(rng, ch[s], k, slope, dtype)
                       for _ in range(cfg.rsabs_per_scale)]
                      for s in range(s_count)]
        self.up = [ConvTranspose2d(rng, ch[s], ch[s - 1], cfg.updown_kernel,
                                   stride=cfg.updown_kernel, dtype=dtype)
                   for s in range(1, s_count)]
        self.tail = Conv2d(rng, ch[0], cfg.in_channels, 1, zero_init=True,
                           dtype=dtype)
        self.scale_states: list[ScaleState] = []

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ConfigurationError(
                f"input has {c} channels, model expects {cfg.in_channels}")
        div = 2 ** (cfg.scales - 1)
        if h % div or w % div:
            raise UsageError(
                f"input spatial size {h}x{w} must be divisible by {div}; "
                f"pad the image (e.g. reflect-pad) before calling")

        f = self.head(x)
        enc_feats = []
        for s in range(cfg.scales):
            for block in self.enc[s]:
                f = block(f)
            enc_feats.append(f)
            if s < cfg.scales - 1:
                f = self.down[s](f)

        d = self.context(enc_feats[-1])
        prev = None
        self.scale_states = []
        for s in range(cfg.scales - 1, -1, -1):
            if s < cfg.scales - 1:
                d = self.fuse[s](T.concat_channels(enc_feats[s], d))
            offsets, masks = self.offset[s](d, prev)
            for block in self.rsabs[s]:
                d = block(d, offsets, masks)
            self.scale_states.append(ScaleState(s, d, offsets, masks))
            prev = (offsets, masks)
            if s > 0:
                d = self.up[s - 1](d)
        return T.add(x, self.tail(d))

    __call__ = forward

    def params(self) -> list[tuple[str, Tensor]]:
        out = self.head.params("head")
        for s, blocks in enumerate(self.enc):
            for i, b in enumerate(blocks):
                out += b.params(f"enc.{s}.res{i}")
        for s, d in enumerate(self.down):
            out += d.params(f"down.{s}")
        out += self.context.params("context")
        for s, fz in enumerate(self.fuse):
            out += fz.params(f"fuse.{s}")
        for s, ot in enumerate(self.offset):
            out += ot.params(f"offset.{s}")
        for s, blocks in enumerate(self.rsabs):
            for i, b in enumerate(blocks):
                out += b.params(f"rsab.{s}.{i}")
        for s, u in enumerate(self.up):
            out += u.params(f"up.{s}")
        out += self.tail.params("tail")
        return out

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.params())


def count_params_flops(config: ModelConfig, input_shape) -> tuple[int, int]:
    """Exact parameter count and analytic FLOP count for one forward pass.

    FLOP convention: one multiply-accumulate counts as one FLOP. Per layer:
      standard conv:    out_h*out_w*out_c*in_c*k*k
      transposed conv:  in_h*in_w*in_c*out_c*k*k
      deformable conv:  the standard-conv count, plus per output pixel and
                        kernel tap: 4 MACs/channel for bilinear blending,
                        1 MAC/channel for modulation, and ~10 scalar ops of
                        coordinate arithmetic
      bilinear 2x field upsampling: 8 ops per output element
    Pointwise activations and skip additions are ignored (sub-percent).
    """
    config.validate()
    _, _, h, w = input_shape
    ch = config.channels_per_scale
    k = config.kernel_size
    kt = config.k_taps
    uk = config.updown_kernel
    nres = config.resblocks_per_scale
    nrsab = config.rsabs_per_scale
    s_count = config.scales

    def conv_f(in_c, out_c, kk, oh, ow):
        return oh * ow * out_c * in_c * kk * kk

    model = SADNet(config, rng=np.random.default_rng(0))
    params = model.param_count()

    flops = conv_f(config.in_channels, ch[0], 1, h, w)  # head
    hs, ws = h, w
    for s in range(s_count):
        flops += nres * 2 * conv_f(ch[s], ch[s], k, hs, ws)
        if s < s_count - 1:
            hs //= 2
            ws //= 2
            flops += conv_f(ch[s], ch[s + 1], uk, hs, ws)
    inner = ch[-1] // config.context_compression
    flops += conv_f(ch[-1], inner, 1, hs, ws)
    flops += sum(conv_f(inner, inner, k, hs, ws) for _ in config.context_dilations)
    flops += conv_f(inner * len(config.context_dilations), ch[-1], 1, hs, ws)
    for s in range(s_count - 1, -1, -1):
        hd, wd = h >> s, w >> s
        if s < s_count - 1:
            flops += conv_f(2 * ch[s], ch[s], k, hd, wd)
        # offset transfer
        head_in = ch[s] + (3 * kt if s < s_count - 1 else 0)
        flops += conv_f(ch[s], ch[s], k, hd, wd)
        flops += conv_f(head_in, 3 * kt, k, hd, wd)
        if s < s_count - 1:
            flops += 8 * 3 * kt * hd * wd  # field upsampling
        # RSABs: deformable conv + standard conv
        flops += nrsab * (conv_f(ch[s], ch[s], k, hd, wd)
                          + hd * wd * kt * (5 * ch[s] + 10)
                          + conv_f(ch[s], ch[s], k, hd, wd))
        if s > 0:
            flops += conv_f(ch[s], ch[s - 1], uk, hd, wd)
    flops += conv_f(ch[0], config.in_channels, 1, h, w)  # tail
    return params, flops


def export_offsets(model: SADNet, x: Tensor, out_path, points_per_axis: int = 4) -> int:
    """Dump learned sampling positions and modulations to CSV.

    For each scale, an evenly spaced points_per_axis^2 pixel grid is probed;
    each row gives one kernel tap's absolute sampling position
    (base position + learned offset) and its modulation scalar.
    Returns the number of data rows written.
    """
    model.forward(x)
    k = model.config.kernel_size
    pad = k // 2
    rows = []
    for state in sorted(model.scale_states, key=lambda s: s.scale):
        off = state.offsets.data[0]
        mask = state.masks.data[0]
        _, oh, ow = mask.shape
        ys = np.linspace(0, oh - 1, points_per_axis).round().astype(int)
        xs = np.linspace(0, ow - 1, points_per_axis).round().astype(int)
        for py in ys:
            for px in xs:
                for tap in range(model.config.k_taps):
                    ki, kj = divmod(tap, k)
                    sy = py - pad + ki + off[2 * tap, py, px]
                    sx = px - pad + kj + off[2 * tap + 1, py, px]
                    rows.append((state.scale, int(py), int(px), tap,
                                 float(sy), float(sx), float(mask[tap, py, px])))
    try:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scale", "py", "px", "k", "sample_y", "sample_x",
                             "modulation"])
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write offset export to {out_path}: {exc}") from exc
    return len(rows)
