"""Image I/O, synthetic noise, patch extraction, and dihedral augmentation.

Images travel as binary PGM (P5, grayscale) / PPM (P6, color) with maxval
255 so round trips are bit-exact without any image library. All randomness
is drawn from numpy's Philox counter-based generator (normal deviates via
its ziggurat sampler), pinned so that a given (image, sigma, seed) triple
reproduces bit-identically across runs and platforms.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .tensor import Tensor


@dataclass
class ImageBuffer:
    """8-bit raster: samples shaped (height, width, channels), uint8."""

    width: int
    height: int
    channels: int
    samples: np.ndarray

    def __post_init__(self):
        expected = (self.height, self.width, self.channels)
        if self.samples.shape != expected:
            raise UsageError(
                f"ImageBuffer samples shape {self.samples.shape} != {expected}")


@dataclass
class NoiseSpec:
    sigma: float  # on the [0, 255] scale
    seed: int


def make_rng(seed: int) -> np.random.Generator:
    """The pinned PRNG: Philox 4x64 counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_header_tokens(blob: bytes, count: int, pos: int):
    """Read whitespace/comment-separated ASCII tokens from a PNM header."""
    tokens = []
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos] == ord("#"):
            while pos < n and blob[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PNM header at byte offset {start}")
        tokens.append(blob[start:pos])
    if pos >= n:
        raise DataError(f"missing payload separator at byte offset {pos}")
    pos += 1  # exactly one whitespace byte before the payload
    return tokens, pos


def load_image(path) -> ImageBuffer:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    magic = blob[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise DataError(
            f"{path}: unsupported magic {magic!r} at byte offset 0 "
            f"(expected P5 or P6)")
    tokens, pos = _read_header_tokens(blob, 3, 2)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: non-numeric header field near byte offset {pos}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    need = width * height * channels
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise DataError(
            f"{path}: truncated payload at byte offset {pos + len(payload)} "
            f"(need {need} bytes, got {len(payload)})")
    samples = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(width, height, channels, samples.copy())


def save_image(buffer: ImageBuffer, path) -> None:
    magic = b"P5" if buffer.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (buffer.width, buffer.height)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(buffer.samples.astype(np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# [0,255] <-> [0,1] conversion
# ---------------------------------------------------------------------------


def to_tensor(buffer: ImageBuffer, dtype=np.float32) -> Tensor:
    """Dequantize to a (1, c, h, w) tensor in [0, 1]."""
    arr = buffer.samples.astype(dtype) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def from_tensor(t: Tensor) -> ImageBuffer:
    """Quantize a (1, c, h, w) tensor back to 8-bit, round-half-up, clipped."""
    data = t.data[0]
    q = np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5)
    samples = np.clip(q, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    c, h, w = data.shape
    return ImageBuffer(w, h, c, samples)


# ---------------------------------------------------------------------------
# Noise, patches, augmentation
# ---------------------------------------------------------------------------


def add_awgn(image: Tensor, spec: NoiseSpec) -> Tensor:
    """Add i.i.d. Gaussian noise with std sigma/255; never clipped here."""
    if spec.sigma < 0:
        raise UsageError(f"negative sigma {spec.sigma}")
    if spec.sigma == 0:
        return Tensor(image.data.copy())
    rng = make_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma / 255.0, size=image.shape)
    return Tensor(image.data + noise.astype(image.data.dtype))


def extract_patches(image: Tensor, size: int, count: int, seed: int) -> list[Tensor]:
    """Uniformly random size x size crops, reproducible by seed."""
    _, c, h, w = image.shape
    if h < size or w < size:
        raise UsageError(f"image {h}x{w} smaller than patch size {size}")
    rng = make_rng(seed)
    patches = []
    for _ in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        patches.append(Tensor(image.data[:, :, top:top + size, left:left + size].copy()))
    return patches


def augment(patch: Tensor, code: int) -> Tensor:
    """One of the 8 dihedral transforms: optional horizontal flip (code >= 4)
    followed by code % 4 counter-clockwise 90-degree rotations."""
    if not 0 <= code <= 7:
        raise UsageError(f"augment code {code} outside 0..7")
    _, _, h, w = patch.shape
    rot = code % 4
    if rot % 2 == 1 and h != w:
        raise UsageError(f"rotation code {code} requires a square patch, got {h}x{w}")
    data = patch.data
    if code >= 4:
        data = data[:, :, :, ::-1]
    if rot:
        data = np.rot90(data, k=rot, axes=(2, 3))
    return Tensor(np.ascontiguousarray(data))


# ---------------------------------------------------------------------------
# Corpus manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    clean_path: str
    noisy_path: str
    sigma: float
    seed: int


def write_manifest(entries: list[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.clean_path}\t{e.noisy_path}\t{e.sigma:g}\t{e.seed}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DataError(
                        f"{path}:{lineno}: expected 4 tab-separated fields, "
                        f"got {len(parts)}")
                entries.append(ManifestEntry(parts[0], parts[1],
                                             float(parts[2]), int(parts[3])))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return entries


def generate_noisy_corpus(in_dir, out_dir, sigma: float, seed: int) -> list[ManifestEntry]:
    """Add AWGN to every PGM/PPM under in_dir; per-image seed is seed ^ index."""
    names = sorted(n for n in os.listdir(in_dir)
                   if n.lower().endswith((".pgm", ".ppm")))
    if not names:
        raise DataError(f"no .pgm/.ppm images found in {in_dir}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx, name in enumerate(names):
        clean_path = os.path.join(in_dir, name)
        noisy_path = os.path.join(out_dir, name)
        img_seed = seed ^ idx
        clean = to_tensor(load_image(clean_path))
        noisy = add_awgn(clean, NoiseSpec(sigma, img_seed))
        save_image(from_tensor(noisy), noisy_path)
        entries.append(ManifestEntry(clean_path, noisy_path, sigma, img_seed))
    return entries
