"""Modulated deformable convolution with differentiable bilinear sampling.

The layer samples the input at learned fractional positions (one 2-vector
offset per kernel tap per output pixel), scales each sampled value by a
learned modulation scalar in [0, 1], then applies the standard kernel
weights. Sampling outside the image contributes 0 (zero-padding rule), and
coordinates are never clipped.

Gradient convention at exact integer coordinates: the surrounding-4-pixel
bilinear formula with floor() anchoring, i.e. the one-sided derivative from
the upper cell. Gradient checks must perturb offsets away from integers.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, _node

OFFSET_CHANNELS_PER_TAP = 2  # (dy, dx) interleaved, kernel taps in row-major order


def bilinear_sample(feature: np.ndarray, y: float, x: float,
                    batch: int, channel: int) -> float:
    """Reference scalar bilinear sample of feature (n, c, h, w) at (y, x).

    Total function: out-of-bounds pixels contribute 0. Used as the oracle
    for the vectorized layer below.
    """
    _, _, h, w = feature.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    fy = y - y0
    fx = x - x0
    val = 0.0
    for iy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for ix, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= iy < h and 0 <= ix < w:
                val += wy * wx * float(feature[batch, channel, iy, ix])
    return val


def _gather(flat: np.ndarray, iy: np.ndarray, ix: np.ndarray,
            h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Fetch (n, c, oh, ow) pixel values at integer coords, 0 outside.

    flat is the input reshaped to (n, c, h*w); iy/ix are (n, oh, ow).
    Returns (values, in-bounds mask broadcastable over channels).
    """
    inb = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    idx = (np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1))
    n, c = flat.shape[:2]
    idx_b = np.broadcast_to(idx.reshape(n, 1, -1), (n, c, idx[0].size))
    vals = np.take_along_axis(flat, idx_b, axis=2).reshape(n, c, *iy.shape[1:])
    vals = vals * inb[:, None, :, :]
    return vals, inb[:, None, :, :]


def modulated_deform_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
                            offsets: Tensor, masks: Tensor,
                            padding=(1, 1)) -> Tensor:
    """Deformable convolution, stride 1 and dilation 1.

    offsets: (n, 2*K, oh, ow) with channel pairs (dy, dx) per kernel tap,
    taps in row-major order. masks: (n, K, oh, ow), values in [0, 1].
    Gradients flow to x, weight, bias, offsets and masks.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ConfigurationError(
            f"deform_conv channel mismatch: input {x.shape} vs weight {weight.shape}")
    k_taps = kh * kw
    ph, pw = padding
    out_h = h + 2 * ph - (kh - 1)
    out_w = w + 2 * pw - (kw - 1)
    if offsets.shape != (n, 2 * k_taps, out_h, out_w):
        raise ConfigurationError(
            f"offset field shape {offsets.shape} does not match expected "
            f"{(n, 2 * k_taps, out_h, out_w)} for kernel {kh}x{kw}")
    if masks.shape != (n, k_taps, out_h, out_w):
        raise ConfigurationError(
            f"modulation field shape {masks.shape} does not match expected "
            f"{(n, k_taps, out_h, out_w)}")

    dtype = x.data.dtype
    flat = x.data.reshape(n, c, h * w)
    grid_y = np.arange(out_h, dtype=dtype)[None, :, None]
    grid_x = np.arange(out_w, dtype=dtype)[None, None, :]

    y_out = np.zeros((n, o, out_h, out_w), dtype=dtype)
    saved = []  # per-tap state for backward
    for k in range(k_taps):
        ki, kj = divmod(k, kw)
        py = grid_y - ph + ki + offsets.data[:, 2 * k]
        px = grid_x - pw + kj + offsets.data[:, 2 * k + 1]
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        fy = (py - y0).astype(dtype)[:, None]
        fx = (px - x0).astype(dtype)[:, None]
        v00, _ = _gather(flat, y0, x0, h, w)
        v01, _ = _gather(flat, y0, x0 + 1, h, w)
        v10, _ = _gather(flat, y0 + 1, x0, h, w)
        v11, _ = _gather(flat, y0 + 1, x0 + 1, h, w)
        sample = ((1 - fy) * (1 - fx) * v00 + (1 - fy) * fx * v01
                  + fy * (1 - fx) * v10 + fy * fx * v11)
        modulated = sample * masks.data[:, k][:, None]
        y_out += np.einsum("nchw,oc->nohw", modulated, weight.data[:, :, ki, kj],
                           optimize=True)
        saved.append((y0, x0, fy, fx, v00, v01, v10, v11, sample))
    if bias is not None:
        y_out += bias.data

    prev = [x, weight, offsets, masks]
    if bias is not None:
        prev.append(bias)

    def make_backward(out: Tensor):
        def _backward():
            gy = out.grad
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
            g_off = np.zeros_like(offsets.data) if offsets.requires_grad else None
            g_mask = np.zeros_like(masks.data) if masks.requires_grad else None
            g_w = np.zeros_like(weight.data) if weight.requires_grad else None
            gx_flat = (np.zeros(n * c * h * w, dtype=dtype)
                       if x.requires_grad else None)
            cc = np.arange(c, dtype=np.int64)[None, :, None, None]
            nn = (np.arange(n, dtype=np.int64)[:, None, None, None] * c + cc) * (h * w)
            for k in range(k_taps):
                ki, kj = divmod(k, kw)
                y0, x0, fy, fx, v00, v01, v10, v11, sample = saved[k]
                mod = masks.data[:, k][:, None]
                # grad wrt the per-tap modulated sample
                g_ms = np.einsum("nohw,oc->nchw", gy, weight.data[:, :, ki, kj],
                                 optimize=True)
                if g_w is not None:
                    g_w[:, :, ki, kj] = np.einsum(
                        "nohw,nchw->oc", gy, sample * mod, optimize=True)
                if g_mask is not None:
                    g_mask[:, k] = (g_ms * sample).sum(axis=1)
                g_s = g_ms * mod
                if g_off is not None:
                    ds_dy = (-(1 - fx) * v00 - fx * v01
                             + (1 - fx) * v10 + fx * v11)
                    ds_dx = (-(1 - fy) * v00 + (1 - fy) * v01
                             - fy * v10 + fy * v11)
                    g_off[:, 2 * k] = (g_s * ds_dy).sum(axis=1)
                    g_off[:, 2 * k + 1] = (g_s * ds_dx).sum(axis=1)
                if gx_flat is not None:
                    for iy, ix, wgt in (
                        (y0, x0, (1 - fy) * (1 - fx)),
                        (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)),
                        (y0 + 1, x0 + 1, fy * fx),
                    ):
                        inb = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
                        idx = (np.clip(iy, 0, h - 1) * w
                               + np.clip(ix, 0, w - 1))[:, None]
                        contrib = g_s * wgt * inb[:, None]
                        # bincount keeps the scatter-add deterministic and fast
                        gx_flat += np.bincount(
                            (nn + idx).ravel(), weights=contrib.ravel(),
                            minlength=gx_flat.size).astype(dtype, copy=False)
            if g_w is not None:
                weight.accumulate_grad(g_w)
            if g_mask is not None:
                masks.accumulate_grad(g_mask)
            if g_off is not None:
                offsets.accumulate_grad(g_off)
            if gx_flat is not None:
                x.accumulate_grad(gx_flat.reshape(n, c, h, w))
        return _backward

    return _node(y_out, tuple(prev), make_backward)
