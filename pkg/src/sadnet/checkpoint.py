"""Versioned binary checkpoints.

Layout (little-endian throughout):

    magic  b"SADN"
    u32    format version (currently 1)
    u32    config JSON length, then that many UTF-8 bytes (sorted keys)
    u64    iteration count
    f64    adam lr, beta1, beta2, eps
    u64    adam step count t
    u32    RNG state JSON length, then that many bytes (0 if absent)
    u32    tensor record count
    per record:
        u16 name length, name UTF-8
        u8  ndim, then ndim x u32 dims
        u8  dtype code (0 = float32, 1 = float64)
        raw data bytes

Tensor records are the model parameters in model order, followed by the
ADAM first/second moments under "adam.m.<name>" / "adam.v.<name>" once the
optimizer has stepped. The fixed ordering makes save -> load -> save
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import ModelConfig, SADNet
from .optim import AdamState

MAGIC = b"SADN"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    model: SADNet
    adam: AdamState
    iteration: int
    rng_state: dict | None


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _restore(v) for k, v in obj.items()}
    return obj


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    fh.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(
                f"{self.path}: truncated checkpoint at byte offset {self.pos} "
                f"(need {n} more bytes)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, model: SADNet, adam: AdamState, iteration: int,
                    rng_state: dict | None = None) -> None:
    params = model.params()
    records: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in params]
    for name, _ in params:
        if name in adam.m:
            records.append((f"adam.m.{name}", adam.m[name]))
            records.append((f"adam.v.{name}", adam.v[name]))
    cfg_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    rng_blob = (json.dumps(_sanitize(rng_state), sort_keys=True).encode("utf-8")
                if rng_state is not None else b"")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<I", len(cfg_blob)))
            fh.write(cfg_blob)
            fh.write(struct.pack("<Q", iteration))
            fh.write(struct.pack("<dddd", adam.lr, adam.beta1, adam.beta2, adam.eps))
            fh.write(struct.pack("<Q", adam.t))
            fh.write(struct.pack("<I", len(rng_blob)))
            fh.write(rng_blob)
            fh.write(struct.pack("<I", len(records)))
            for name, arr in records:
                _write_tensor(fh, name, arr)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: bad magic bytes (not a checkpoint)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    (iteration,) = r.unpack("<Q")
    lr, beta1, beta2, eps = r.unpack("<dddd")
    (t,) = r.unpack("<Q")
    (rng_len,) = r.unpack("<I")
    rng_state = (_restore(json.loads(r.take(rng_len).decode("utf-8")))
                 if rng_len else None)
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise DataError(f"{path}: unknown dtype code {code} for tensor {name}")
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        tensors[name] = arr
        order.append(name)

    dtype = tensors[order[0]].dtype if order else np.float32
    model = SADNet(config, rng=np.random.default_rng(0), dtype=dtype)
    adam = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=t)
    param_names = set()
    for name, p in model.params():
        param_names.add(name)
        if name not in tensors:
            raise DataError(f"{path}: checkpoint missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise DataError(
                f"{path}: parameter {name} has shape {tensors[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = tensors[name]
    for name in order:
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = tensors[name]
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = tensors[name]
        elif name not in param_names:
            raise DataError(f"{path}: unexpected tensor {name} in checkpoint")
    return Checkpoint(config, model, adam, iteration, rng_state)


def diff_configs(expected: ModelConfig, found: ModelConfig) -> list[str]:
    """Names of fields that differ, for mismatch error messages."""
    a, b = expected.to_dict(), found.to_dict()
    return [k for k in sorted(a) if a[k] != b[k]]


def require_config_match(expected: ModelConfig, found: ModelConfig, path) -> None:
    diff = diff_configs(expected, found)
    if diff:
        details = ", ".join(
            f"{k}: expected {expected.to_dict()[k]!r}, checkpoint has "
            f"{found.to_dict()[k]!r}" for k in diff)
        raise DataError(f"{path}: model config mismatch ({details})")
