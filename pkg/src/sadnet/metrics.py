"""PSNR and single-scale SSIM.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), C1=(0.01*255)^2,
C2=(0.03*255)^2, averaged over valid window positions only (no padding;
border conventions can shift results by ~0.002, so this one is pinned).
Color images are scored per channel and averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ImageBuffer
from .errors import UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * 255.0) ** 2
C2 = (0.03 * 255.0) ** 2


def psnr(a: ImageBuffer, b: ImageBuffer, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical images give math.inf."""
    if a.samples.shape != b.samples.shape:
        raise UsageError(
            f"psnr shape mismatch: {a.samples.shape} vs {b.samples.shape}")
    diff = a.samples.astype(np.float64) - b.samples.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _valid_windows(img: np.ndarray, size: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (size, size))


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    win = gaussian_window()
    size = SSIM_WINDOW
    wx = _valid_windows(x, size)
    wy = _valid_windows(y, size)
    mu_x = np.tensordot(wx, win, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(wy, win, axes=([2, 3], [0, 1]))
    sxx = np.tensordot(wx * wx, win, axes=([2, 3], [0, 1])) - mu_x * mu_x
    syy = np.tensordot(wy * wy, win, axes=([2, 3], [0, 1])) - mu_y * mu_y
    sxy = np.tensordot(wx * wy, win, axes=([2, 3], [0, 1])) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    if a.samples.shape != b.samples.shape:
        raise UsageError(
            f"ssim shape mismatch: {a.samples.shape} vs {b.samples.shape}")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise UsageError(
            f"image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} SSIM window")
    xs = a.samples.astype(np.float64)
    ys = b.samples.astype(np.float64)
    vals = [_ssim_channel(xs[:, :, c], ys[:, :, c]) for c in range(a.channels)]
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM plus arithmetic means."""

    names: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_value: float) -> None:
        self.names.append(name)
        self.psnr_values.append(psnr_db)
        self.ssim_values.append(ssim_value)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def to_tsv(self) -> str:
        lines = ["name\tpsnr_db\tssim"]
        for n, p, s in zip(self.names, self.psnr_values, self.ssim_values):
            lines.append(f"{n}\t{p:.4f}\t{s:.6f}")
        lines.append(f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max([4] + [len(n) for n in self.names])
        rows = [f"{'name':<{width}}  {'PSNR(dB)':>10}  {'SSIM':>8}"]
        for n, p, s in zip(self.names, self.psnr_values, self.ssim_values):
            rows.append(f"{n:<{width}}  {p:>10.4f}  {s:>8.6f}")
        rows.append(f"{'mean':<{width}}  {self.mean_psnr:>10.4f}  {self.mean_ssim:>8.6f}")
        return "\n".join(rows) + "\n"
