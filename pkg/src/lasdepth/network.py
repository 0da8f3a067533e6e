"""Residual-of-residual fully convolutional depth network.

A strided stem, a trunk of bottleneck residual blocks, a transposed
convolution head and a K-way per-pixel softmax.  The expected residual is
added to the (downsampled) reference depth after decoding, so the trunk is
made to model the residual depth explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

BLOCK_TYPES = ("scaled", "identical")


@dataclass
class NetworkConfig:
    in_height: int = 48
    in_width: int = 64
    stem_channels: int = 16
    blocks: tuple = (("scaled", 32), ("identical", 32), ("scaled", 32), ("identical", 32))
    deconv_channels: tuple = (16, 16)
    bins: int = 101
    residual_range: float = 2.0
    depth_min: float = 0.1
    depth_max: float = 10.0
    use_reference: bool = True
    global_skip: bool = True
    bn_mode: str = "batch"
    bn_decay: float = 0.99
    reference_scale: float = 0.2

    def __post_init__(self):
        self.blocks = tuple((str(t), int(c)) for t, c in self.blocks)
        self.deconv_channels = tuple(int(c) for c in self.deconv_channels)
        self.validate()

    def validate(self) -> None:
        if self.bins < 3 or self.bins % 2 == 0:
            raise ConfigurationError("bins must be odd and >= 3")
        if self.residual_range <= 0 or not 0 < self.depth_min < self.depth_max:
            raise ConfigurationError("invalid depth / residual range")
        if self.global_skip and not self.use_reference:
            raise ConfigurationError("the global skip needs the reference input")
        if self.bn_mode not in ("batch", "affine"):
            raise ConfigurationError(f"bn_mode must be batch or affine, got {self.bn_mode!r}")
        n_down = 1 + sum(1 for t, _ in self.blocks if t == "scaled")
        for t, _ in self.blocks:
            if t not in BLOCK_TYPES:
                raise ConfigurationError(f"unknown block type {t!r}")
        if n_down - len(self.deconv_channels) != 1:
            raise ConfigurationError("stride-2 stages minus deconv stages must equal 1 (half-size output)")
        f = 2 ** n_down
        if self.in_height % f or self.in_width % f:
            raise ConfigurationError(f"input size must be divisible by {f}")
        c = self.stem_channels
        for t, out in self.blocks:
            if t == "identical" and out != c:
                raise ConfigurationError("identical block must keep its channel count")
            c = out

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.in_height // 2, self.in_width // 2

    def binspec(self) -> "BinSpec":
        if self.global_skip:
            return BinSpec.residual(self.bins, self.residual_range)
        return BinSpec.absolute(self.bins, self.depth_min, self.depth_max)


@dataclass(frozen=True)
class BinSpec:
    """K linearly spaced bin centers (meters)."""
    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 1 or len(c) < 2 or np.any(np.diff(c) <= 0):
            raise ConfigurationError("bin centers must be strictly increasing")
        object.__setattr__(self, "centers", c)

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def width(self) -> float:
        return float(self.centers[1] - self.centers[0])

    @classmethod
    def residual(cls, k: int, half_range: float) -> "BinSpec":
        """Residual bins symmetric about 0 on [-R, R]; the middle center is exactly 0."""
        if k < 3 or k % 2 == 0:
            raise ConfigurationError("residual bins need odd K >= 3")
        half = (k - 1) // 2
        c = np.arange(-half, half + 1, dtype=np.float64) * (half_range / half)
        return cls(c)

    @classmethod
    def absolute(cls, k: int, lo: float, hi: float) -> "BinSpec":
        return cls(np.linspace(lo, hi, k))


def argmax_decode(probs: np.ndarray, binspec: BinSpec) -> np.ndarray:
    """Center of the most probable bin per pixel; ties go to the lowest index."""
    return binspec.centers[np.argmax(probs, axis=1)]


def expected_decode(probs: np.ndarray, binspec: BinSpec) -> np.ndarray:
    return np.einsum("bkhw,k->bhw", probs.astype(np.float64), binspec.centers)


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 block mean of an (..., H, W) array (bilinear 2x downsampling)."""
    h, w = a.shape[-2:]
    return a.reshape(*a.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


@dataclass
class NetOutput:
    logits: Tensor
    probs: Tensor
    residual: Tensor       # expected value over bins, (B, 1, h, w)
    depth: Tensor          # clamped prediction, (B, 1, h, w)
    reference: np.ndarray  # downsampled reference, (B, 1, h, w)


def residual_block(x: Tensor, p: dict, block_type: str, stride: int = 1,
                   bn: dict | None = None, training: bool = True, bn_mode: str = "batch") -> Tensor:
    """relu(F(x) + h(x)) with F = conv-bn-relu-conv-bn-relu-conv-bn.

    ``p`` holds ``w1, g1, b1, w2, g2, b2, w3, g3, b3`` and, for scaled
    blocks, the 1x1 shortcut ``ws, bs``.  ``bn`` maps ``"1".."3"`` to
    running statistics.
    """
    bn = bn or {}

    def norm(t, i):
        return ad.batch_norm(t, p[f"g{i}"], p[f"b{i}"], bn.get(str(i)), training, mode=bn_mode)

    f = ad.relu(norm(ad.conv2d(x, p["w1"]), 1))
    f = ad.relu(norm(ad.conv2d(f, p["w2"], stride=stride, padding=1), 2))
    f = norm(ad.conv2d(f, p["w3"]), 3)
    if block_type == "identical":
        if stride != 1 or f.shape != x.shape:
            raise ShapeError(f"identical block: residual {f.shape} vs input {x.shape}")
        h = x
    elif block_type == "scaled":
        h = ad.conv2d(x, p["ws"], p["bs"], stride=stride)
    else:
        raise ConfigurationError(f"unknown block type {block_type!r}")
    return ad.relu(ad.add(f, h))


class DepthNet:
    """Parameters, running statistics and the forward pass."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.bins = cfg.binspec()
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, ad.BatchNormState] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction
    def _conv(self, name, cout, cin, k, rng, transpose=False, bias=None, zero=False):
        shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
        fan_in = cin * k * k / (4 if transpose else 1)
        w = np.zeros(shape) if zero else rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        self.params[name] = Tensor(w.astype(self.dtype), requires_grad=True)
        if bias:
            self.params[bias] = Tensor(np.zeros(cout, self.dtype), requires_grad=True)

    def _norm(self, prefix, c):
        self.params[prefix + ".gamma"] = Tensor(np.ones(c, self.dtype), requires_grad=True)
        self.params[prefix + ".beta"] = Tensor(np.zeros(c, self.dtype), requires_grad=True)
        self.bn[prefix] = ad.BatchNormState(np.zeros(c, self.dtype), np.ones(c, self.dtype), self.cfg.bn_decay)

    def _build(self, rng):
        cfg = self.cfg
        self._conv("stem.w", cfg.stem_channels, 2, 3, rng)
        self._norm("stem.bn", cfg.stem_channels)
        c = cfg.stem_channels
        for i, (btype, out) in enumerate(cfg.blocks):
            mid = max(out // 2, 1)
            pre = f"block{i}"
            self._conv(f"{pre}.w1", mid, c, 1, rng)
            self._norm(f"{pre}.bn1", mid)
            self._conv(f"{pre}.w2", mid, mid, 3, rng)
            self._norm(f"{pre}.bn2", mid)
            self._conv(f"{pre}.w3", out, mid, 1, rng)
            self._norm(f"{pre}.bn3", out)
            if btype == "scaled":
                self._conv(f"{pre}.ws", out, c, 1, rng, bias=f"{pre}.bs")
            c = out
        for i, out in enumerate(cfg.deconv_channels):
            self._conv(f"deconv{i}.w", out, c, 4, rng, transpose=True)
            self._norm(f"deconv{i}.bn", out)
            c = out
        # zero logits at init: uniform probabilities, prediction starts at the reference
        self._conv("head.w", cfg.bins, c, 1, rng, bias="head.b", zero=True)

    # -- state
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.mean
            out[name + ".running_var"] = st.var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ConfigurationError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ConfigurationError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=self.dtype)
        for name, st in self.bn.items():
            st.mean = np.array(state[name + ".running_mean"], dtype=self.dtype)
            st.var = np.array(state[name + ".running_var"], dtype=self.dtype)

    # -- forward
    def _block_params(self, i: int) -> tuple[dict, dict]:
        pre = f"block{i}"
        p = {k: self.params[f"{pre}.{k}"] for k in ("w1", "w2", "w3")}
        for j in (1, 2, 3):
            p[f"g{j}"] = self.params[f"{pre}.bn{j}.gamma"]
            p[f"b{j}"] = self.params[f"{pre}.bn{j}.beta"]
        if f"{pre}.ws" in self.params:
            p["ws"], p["bs"] = self.params[f"{pre}.ws"], self.params[f"{pre}.bs"]
        return p, {str(j): self.bn[f"{pre}.bn{j}"] for j in (1, 2, 3)}

    def trunk(self, x: Tensor, training: bool) -> Tensor:
        """Stem, residual blocks and deconvolution stages up to the K logits."""
        cfg, P = self.cfg, self.params

        def norm(t, prefix):
            return ad.batch_norm(t, P[prefix + ".gamma"], P[prefix + ".beta"], self.bn[prefix],
                                 training, mode=cfg.bn_mode)

        x = ad.relu(norm(ad.conv2d(x, P["stem.w"], stride=2, padding=1), "stem.bn"))
        for i, (btype, _) in enumerate(cfg.blocks):
            p, bn = self._block_params(i)
            x = residual_block(x, p, btype, 2 if btype == "scaled" else 1, bn, training, cfg.bn_mode)
        for i in range(len(cfg.deconv_channels)):
            x = ad.relu(norm(ad.conv_transpose2d(x, P[f"deconv{i}.w"], stride=2, padding=1),
                             f"deconv{i}.bn"))
        return ad.conv2d(x, P["head.w"], P["head.b"])

    def forward(self, image, reference, training: bool = False, trunk_reference=None) -> NetOutput:
        """Run the network on (B, H, W) or (B, 1, H, W) image and reference arrays.

        ``trunk_reference`` overrides the reference fed to the input channel
        while the global skip still uses ``reference``.
        """
        cfg = self.cfg
        image = self._nchw(image)
        reference = self._nchw(reference)
        if image.shape != reference.shape:
            raise ShapeError(f"image {image.shape} and reference {reference.shape} misaligned")
        if image.shape[2:] != (cfg.in_height, cfg.in_width):
            raise ShapeError(f"input {image.shape[2:]} != configured {(cfg.in_height, cfg.in_width)}")
        ref_in = reference if trunk_reference is None else self._nchw(trunk_reference)
        if cfg.use_reference:
            ref_channel = ref_in * self.dtype.type(cfg.reference_scale)
        else:
            ref_channel = np.zeros_like(ref_in)
        x = Tensor(np.concatenate([image, ref_channel], axis=1))
        logits = self.trunk(x, training)
        probs = ad.softmax_channels(logits)
        residual = ad.channel_expectation(probs, self.bins.centers)
        ref_down = downsample2(reference).astype(self.dtype)
        if cfg.global_skip and cfg.use_reference:
            depth = ad.add(residual, Tensor(ref_down))
        else:
            depth = residual
        depth = ad.clamp(depth, cfg.depth_min, cfg.depth_max)
        return NetOutput(logits, probs, residual, depth, ref_down)

    def _nchw(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=self.dtype)
        if a.ndim == 3:
            a = a[:, None]
        if a.ndim != 4 or a.shape[1] != 1:
            raise ShapeError(f"expected (B, H, W) or (B, 1, H, W), got {a.shape}")
        return a
