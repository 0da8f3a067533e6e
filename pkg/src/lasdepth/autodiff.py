"""Minimal reverse-mode differentiation over NCHW numpy arrays.

Only the layers the depth network needs are provided.  Every op checks its
input shapes up front and raises :class:`ShapeError` rather than
broadcasting.  Values keep the dtype they were created with (float32 for
training, float64 for gradient checks); reductions accumulate in float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, UndefinedLossError


class Tensor:
    """A value in the computation graph, optionally tracking a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Backpropagate from this node; each node is visited once in reverse topological order."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self.accumulate(np.asarray(grad))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _result(data, parents, backward_fn, op) -> Tensor:
    track = any(p.requires_grad for p in parents)
    return Tensor(data, track, parents if track else (), backward_fn if track else None, op)


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _check_rank4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be NCHW, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo)."""
    b, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image of ``shape``."""
    b, c, h, w = shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``weight`` is (out, in, kh, kw)."""
    _check_rank4(x, "conv2d input")
    _check_rank4(weight, "conv2d weight")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    cols = im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(b, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(b, o, ho * wo)
        if _need(weight):
            weight.accumulate(np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape))
        if bias is not None and _need(bias):
            bias.accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if _need(x):
            x.accumulate(col2im(np.matmul(wmat.T, gm), x.shape, kh, kw, stride, padding))

    return _result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (the adjoint of conv2d); ``weight`` is (in, out, kh, kw)."""
    _check_rank4(x, "conv_transpose2d input")
    _check_rank4(weight, "conv_transpose2d weight")
    b, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    ho, wo = (h - 1) * stride - 2 * padding + kh, (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: empty output")
    wmat = weight.data.reshape(c, -1)
    xm = x.data.reshape(b, c, h * w)
    out_shape = (b, o, ho, wo)
    out = col2im(np.matmul(wmat.T, xm), out_shape, kh, kw, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gcols = im2col(g, kh, kw, stride, padding)          # (b, o*kh*kw, h*w)
        if _need(weight):
            weight.accumulate(np.tensordot(xm, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape))
        if bias is not None and _need(bias):
            bias.accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if _need(x):
            x.accumulate(np.matmul(wmat, gcols).reshape(x.shape))

    return _result(out, parents, backward, "conv_transpose2d")


# ------------------------------------------------------------ normalization

@dataclass
class BatchNormState:
    """Running statistics; ``decay`` is the weight kept on the old value."""
    mean: np.ndarray
    var: np.ndarray
    decay: float = 0.99

    @classmethod
    def create(cls, channels: int, decay: float = 0.99) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), decay)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
               training: bool = True, eps: float = 1e-5, mode: str = "batch") -> Tensor:
    """Per-channel normalization.

    ``mode="batch"`` normalizes with batch statistics while training and
    running statistics otherwise; ``mode="affine"`` skips normalization and
    applies only ``gamma * x + beta``.
    """
    _check_rank4(x, "batch_norm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    gm, bt = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    dt = x.data.dtype

    if mode == "affine":
        out = gm * x.data + bt

        def backward(g):
            if _need(x):
                x.accumulate(g * gm)
            if _need(gamma):
                gamma.accumulate((g * x.data).sum(axis=(0, 2, 3), dtype=np.float64))
            if _need(beta):
                beta.accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64))

        return _result(out, (x, gamma, beta), backward, "batch_norm")
    if mode != "batch":
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = ((x.data - mean[None, :, None, None].astype(dt)) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
        if state is not None:
            unbiased = var * n / max(n - 1, 1)
            state.mean[...] = state.decay * state.mean + (1 - state.decay) * mean
            state.var[...] = state.decay * state.var + (1 - state.decay) * unbiased
    else:
        if state is None:
            raise ValueError("evaluation-mode batch_norm needs running statistics")
        mean, var = state.mean.astype(np.float64), state.var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)[None, :, None, None]
    xhat = (x.data - mean.astype(dt)[None, :, None, None]) * inv
    out = gm * xhat + bt

    def backward(g):
        if _need(gamma):
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64))
        if _need(beta):
            beta.accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64))
        if _need(x):
            gx = g * gm
            if training:
                s1 = gx.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
                s2 = (gx * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
                x.accumulate(inv / n * (n * gx - s1 - xhat * s2))
            else:
                x.accumulate(gx * inv)

    return _result(out, (x, gamma, beta), backward, "batch_norm")


# ------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.data.dtype)

    def backward(g):
        x.accumulate(g * pos)

    return _result(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if _need(a):
            a.accumulate(g)
        if _need(b):
            b.accumulate(g)

    return _result(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x.accumulate(g * c)

    return _result(x.data * x.data.dtype.type(c), (x,), backward, "scale")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.accumulate(g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), backward, "clamp")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 block average with stride 2 (exact bilinear 2x downsampling)."""
    _check_rank4(x, "avg_pool2 input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even spatial size")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        x.accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _result(out.astype(x.data.dtype), (x,), backward, "avg_pool2")


# --------------------------------------------------------- softmax & decoding

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an NCHW tensor."""
    _check_rank4(x, "softmax input")
    p = np.exp(_log_softmax(x.data)).astype(x.data.dtype)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True, dtype=np.float64).astype(p.dtype)
        x.accumulate(p * (g - dot))

    return _result(p, (x,), backward, "softmax")


def channel_expectation(probs: Tensor, centers) -> Tensor:
    """Per-pixel sum_k p_k * centers_k, returned as (B, 1, H, W)."""
    _check_rank4(probs, "expectation input")
    c = np.asarray(centers, dtype=probs.data.dtype)
    if c.shape != (probs.shape[1],):
        raise ShapeError(f"expectation: {len(c)} centers for {probs.shape[1]} channels")
    cb = c[None, :, None, None]
    out = (probs.data.astype(np.float64) * cb).sum(axis=1, keepdims=True).astype(probs.data.dtype)

    def backward(g):
        probs.accumulate(g * cb)

    return _result(out, (probs,), backward, "expectation")


# ------------------------------------------------------------------ losses

def _valid_count(mask: np.ndarray) -> int:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise UndefinedLossError("loss over an empty mask")
    return n


def nll_channel_loss(probs: Tensor, target_bins, mask) -> Tensor:
    """Mean over masked pixels of -log p[target].

    When ``probs`` comes straight from :func:`softmax_channels` the gradient
    is taken through a fused log-softmax of the logits.
    """
    _check_rank4(probs, "nll input")
    b, k, h, w = probs.shape
    target = np.asarray(target_bins)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != (b, h, w) or mask.shape != (b, h, w):
        raise ShapeError(f"nll: target/mask must be {(b, h, w)}")
    n = _valid_count(mask)
    if np.any((target[mask] < 0) | (target[mask] >= k)):
        raise ValueError("target bin outside [0, K)")
    tgt = np.where(mask, target, 0).astype(np.int64)[:, None]
    dt = probs.data.dtype
    fused = probs.op == "softmax" and probs.parents
    if fused:
        logits = probs.parents[0]
        logp = _log_softmax(logits.data)
        picked = np.take_along_axis(logp, tgt, axis=1)[:, 0]
    else:
        with np.errstate(divide="ignore"):
            picked = np.log(np.take_along_axis(probs.data, tgt, axis=1)[:, 0].astype(np.float64))
    loss = -picked[mask].sum() / n
    m = mask[:, None].astype(dt)

    if fused:
        def backward(g):
            d = np.exp(logp).astype(dt)
            np.put_along_axis(d, tgt, np.take_along_axis(d, tgt, axis=1) - 1, axis=1)
            logits.accumulate(d * m * (g / n))

        return _result(np.asarray(loss, dtype=dt), (logits,), backward, "nll")

    def backward(g):
        d = np.zeros_like(probs.data)
        np.put_along_axis(d, tgt, (-1.0 / np.take_along_axis(probs.data, tgt, axis=1)).astype(dt), axis=1)
        probs.accumulate(d * m * (g / n))

    return _result(np.asarray(loss, dtype=dt), (probs,), backward, "nll")


def l1_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean |pred - target| over masked entries; the subgradient at 0 is 0."""
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ShapeError(f"l1: target {target.shape} / mask {mask.shape} vs pred {pred.shape}")
    n = _valid_count(mask)
    diff = pred.data.astype(np.float64) - target
    loss = np.abs(diff)[mask].sum() / n
    dt = pred.data.dtype

    def backward(g):
        pred.accumulate((np.sign(diff) * mask * (g / n)).astype(dt))

    return _result(np.asarray(loss, dtype=dt), (pred,), backward, "l1")


# --------------------------------------------------------------- optimizer

class SGD:
    """Momentum SGD: ``v <- momentum * v + grad``; ``p <- p - lr * v``."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= p.data.dtype.type(self.momentum)
            v += g
            p.data -= p.data.dtype.type(lr) * v


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], velocity: dict,
             lr: float, momentum: float = 0.9) -> dict[str, np.ndarray]:
    """Functional form of one momentum step; ``velocity`` is updated in place."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        v = momentum * velocity.get(name, np.zeros_like(g)) + g
        velocity[name] = v
        out[name] = p - lr * v
    return out


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"LDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as little-endian float32 records, in the given order."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    return out
