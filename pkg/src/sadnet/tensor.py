"""Minimal dense 4-D tensor with reverse-mode automatic differentiation.

Every value is a (batch, channel, height, width) array. Operations build a
graph of backward closures; ``Tensor.backward()`` on a scalar output walks
the graph in reverse topological order and accumulates gradients into the
``grad`` field of every reachable tensor with ``requires_grad=True``.

Determinism: all forward and backward computations are plain sequential
numpy expressions; the reduction order is fixed (einsum / kernel-position
loop order), so two runs on identical inputs produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError


class Tensor:
    """Dense 4-D array node in the autodiff graph.

    ``data`` is immutable by convention after creation; only the optimizer
    rebinds parameter contents (in place, between graph constructions).
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ConfigurationError(
                f"Tensor requires a 4-D (n, c, h, w) array, got shape {arr.shape}"
            )
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, prev: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; drops the closure when no input needs gradients."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in prev))
    if out.requires_grad:
        out._prev = prev
        out._backward = backward_fn(out)
    return out


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Convolution family
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, out_h: int, out_w: int, kh: int, kw: int,
            stride, dilation) -> np.ndarray:
    """Gather kernel neighborhoods from a padded input.

    Returns (n, c, out_h, out_w, kh, kw); loop over the <= k*k kernel
    positions keeps the copy order fixed and cheap.
    """
    sh, sw = stride
    dh, dw = dilation
    n, c = xp.shape[:2]
    cols = np.empty((n, c, out_h, out_w, kh, kw), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, :, :, ki, kj] = xp[
                :, :,
                ki * dh: ki * dh + sh * out_h: sh,
                kj * dw: kj * dw + sw * out_w: sw,
            ]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), dilation=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight: (out_c, in_c, kh, kw); bias: (1, out_c, 1, 1) or None.
    Differentiable w.r.t. x, weight and bias.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ConfigurationError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"weight shape {weight.shape} expects {ci}"
        )
    sh, sw = stride
    dh, dw = dilation
    ph, pw = padding
    out_h = conv_output_size(h, kh, sh, dh, ph)
    out_w = conv_output_size(w, kw, sw, dw, pw)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(
            f"conv2d output would be empty: input {x.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, out_h, out_w, kh, kw, stride, dilation)
    y = np.einsum("nchwij,ocij->nohw", cols, weight.data, optimize=True)
    if bias is not None:
        y = y + bias.data

    prev = (x, weight) if bias is None else (x, weight, bias)

    def make_backward(out: Tensor):
        def _backward():
            gy = out.grad
            if weight.requires_grad:
                weight.accumulate_grad(
                    np.einsum("nchwij,nohw->ocij", cols, gy, optimize=True))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
            if x.requires_grad:
                gcols = np.einsum("nohw,ocij->nchwij", gy, weight.data,
                                  optimize=True)
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[:, :,
                            ki * dh: ki * dh + sh * out_h: sh,
                            kj * dw: kj * dw + sw * out_w: sw,
                            ] += gcols[:, :, :, :, ki, kj]
                x.accumulate_grad(gxp[:, :, ph: ph + h, pw: pw + w])
        return _backward

    return _node(y, prev, make_backward)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride=(2, 2)) -> Tensor:
    """Transposed (fractionally strided) convolution, zero output padding.

    weight: (out_c, in_c, kh, kw) where in_c matches the input channels.
    Output spatial size is (in - 1) * stride + k per axis; for the network's
    2x2 stride-2 use this is exactly input * 2. The input gradient of this op
    is a conv2d with the same kernel.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ConfigurationError(
            f"conv2d_transpose channel mismatch: input shape {x.shape} has {c} "
            f"channels, weight shape {weight.shape} expects {ci}"
        )
    sh, sw = stride
    out_h = (h - 1) * sh + kh
    out_w = (w - 1) * sw + kw
    y = np.zeros((n, o, out_h, out_w), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            y[:, :, ki: ki + sh * h: sh, kj: kj + sw * w: sw] += np.einsum(
                "nchw,oc->nohw", x.data, weight.data[:, :, ki, kj], optimize=True)
    if bias is not None:
        y += bias.data

    prev = (x, weight) if bias is None else (x, weight, bias)

    def make_backward(out: Tensor):
        def _backward():
            gy = out.grad
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gy.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
            for ki in range(kh):
                for kj in range(kw):
                    gy_slice = gy[:, :, ki: ki + sh * h: sh, kj: kj + sw * w: sw]
                    if x.requires_grad:
                        x.accumulate_grad(np.einsum(
                            "nohw,oc->nchw", gy_slice, weight.data[:, :, ki, kj],
                            optimize=True))
                    if weight.requires_grad:
                        gw = np.einsum("nohw,nchw->oc", gy_slice, x.data,
                                       optimize=True)
                        full = np.zeros_like(weight.data)
                        full[:, :, ki, kj] = gw
                        weight.accumulate_grad(full)
        return _backward

    return _node(y, prev, make_backward)


# ---------------------------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    y = np.where(mask, x.data, slope * x.data)

    def make_backward(out: Tensor):
        def _backward():
            x.accumulate_grad(out.grad * np.where(mask, 1.0, slope))
        return _backward

    return _node(y, (x,), make_backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def make_backward(out: Tensor):
        def _backward():
            x.accumulate_grad(out.grad * y * (1.0 - y))
        return _backward

    return _node(y, (x,), make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def make_backward(out: Tensor):
        def _backward():
            a.accumulate_grad(out.grad)
            b.accumulate_grad(out.grad)
        return _backward

    return _node(y, (a, b), make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def make_backward(out: Tensor):
        def _backward():
            a.accumulate_grad(out.grad * b.data)
            b.accumulate_grad(out.grad * a.data)
        return _backward

    return _node(y, (a, b), make_backward)


def concat_channels(*xs: Tensor) -> Tensor:
    base = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (base[0], base[2], base[3]):
            raise ConfigurationError(
                f"concat_channels mismatch on (n, h, w): {base} vs {t.shape}")
    y = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def make_backward(out: Tensor):
        def _backward():
            for t, g in zip(xs, np.split(out.grad, splits, axis=1)):
                t.accumulate_grad(g)
        return _backward

    return _node(y, tuple(xs), make_backward)


def crop_or_pad(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Crop from, or zero-pad at, the bottom-right to reach (target_h, target_w)."""
    n, c, h, w = x.shape
    ch, cw = min(h, target_h), min(w, target_w)
    y = np.zeros((n, c, target_h, target_w), dtype=x.data.dtype)
    y[:, :, :ch, :cw] = x.data[:, :, :ch, :cw]

    def make_backward(out: Tensor):
        def _backward():
            g = np.zeros_like(x.data)
            g[:, :, :ch, :cw] = out.grad[:, :, :ch, :cw]
            x.accumulate_grad(g)
        return _backward

    return _node(y, (x,), make_backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ConfigurationError(
            f"slice_channels [{start}:{stop}] out of range for shape {x.shape}")
    y = x.data[:, start:stop].copy()

    def make_backward(out: Tensor):
        def _backward():
            g = np.zeros_like(x.data)
            g[:, start:stop] = out.grad
            x.accumulate_grad(g)
        return _backward

    return _node(y, (x,), make_backward)


def scale(x: Tensor, factor: float) -> Tensor:
    y = x.data * factor

    def make_backward(out: Tensor):
        def _backward():
            x.accumulate_grad(out.grad * factor)
        return _backward

    return _node(y, (x,), make_backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    y = np.array(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def make_backward(out: Tensor):
        def _backward():
            x.accumulate_grad(np.full_like(x.data, out.grad.reshape(())))
        return _backward

    return _node(y, (x,), make_backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss(kind: str, prediction: Tensor, target: Tensor) -> Tensor:
    """Mean L1 or L2 loss as a scalar tensor.

    The L1 subgradient at exact ties is 0 (np.sign convention), which keeps
    backward deterministic.
    """
    if prediction.shape != target.shape:
        raise ConfigurationError(
            f"loss shape mismatch: prediction {prediction.shape} vs "
            f"target {target.shape}")
    diff = prediction.data - target.data
    n_elem = diff.size
    if kind == "L2":
        val = np.mean(diff * diff)
    elif kind == "L1":
        val = np.mean(np.abs(diff))
    else:
        raise UsageError(f"unknown loss kind {kind!r}, expected 'L1' or 'L2'")
    y = np.array(val, dtype=diff.dtype).reshape(1, 1, 1, 1)

    def make_backward(out: Tensor):
        def _backward():
            g = out.grad.reshape(())
            if kind == "L2":
                base = (2.0 / n_elem) * diff
            else:
                base = np.sign(diff) / n_elem
            prediction.accumulate_grad(g * base)
            target.accumulate_grad(-g * base)
        return _backward

    return _node(y, (prediction, target), make_backward)
