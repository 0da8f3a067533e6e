"""Combined classification + regression objective and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Sample
from .errors import ConfigurationError, NonFiniteError
from .network import BinSpec, DepthNet, NetworkConfig, downsample2

LOSS_LOG_HEADER = ["iter", "loss", "loss_cls", "loss_reg", "lr"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    alpha: float = 1.0
    lr0: float = 1e-2
    decay_base: float = 0.98
    decay_step: int = 1000
    momentum: float = 0.9
    iterations: int = 1000
    flip: bool = True
    scale_jitter: float = 0.1
    rng_seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.iterations < 0 or self.decay_step < 1 or not self.lr0 > 0:
            raise ConfigurationError("invalid schedule settings")


@dataclass
class TrainingSample:
    """Full-resolution rasters plus targets at the network's output resolution."""
    image: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    reference: np.ndarray
    target_bins: np.ndarray = None
    target_residual: np.ndarray = None
    target_mask: np.ndarray = None

    def with_targets(self, bins: BinSpec, residual_bins: bool = True) -> "TrainingSample":
        gt_down, mask = downsample_depth(self.gt, self.valid)
        ref_down = downsample2(self.reference.astype(np.float64))
        target = gt_down - ref_down if residual_bins else gt_down
        idx = discretize(target, bins)
        return replace(self, target_bins=np.where(mask, idx, 0),
                       target_residual=np.where(mask, target, 0.0), target_mask=mask)


def downsample_depth(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 mean depth; an output pixel is valid only if all four inputs are."""
    v = downsample2(np.where(valid, values, 0.0).astype(np.float64))
    m = downsample2(valid.astype(np.float64)) == 1.0
    return np.where(m, v, 0.0), m


def to_training_sample(s: Sample) -> TrainingSample:
    return TrainingSample(s.image.astype(np.float32), s.depth.values, s.depth.valid,
                          s.reference.values)


def discretize(residual, bins: BinSpec) -> np.ndarray:
    """Index of the nearest bin center; values beyond the range clamp to the edge bins."""
    r = np.asarray(residual, dtype=np.float64)
    idx = np.floor((r - bins.centers[0]) / bins.width + 0.5)
    return np.clip(idx, 0, bins.K - 1).astype(np.int64)


def combined_loss(probs: Tensor, predicted: Tensor, target_bins, gt, mask, alpha: float = 1.0):
    """``L = NLL(probs, bins) + alpha * L1(predicted, gt)``, each averaged over valid pixels.

    Returns ``(L, L_cls, L_reg)``.  The regression term is always computed
    so it can be logged; with ``alpha == 0`` it does not enter ``L``.
    """
    mask = np.asarray(mask, dtype=bool)
    l_cls = ad.nll_channel_loss(probs, target_bins, mask)
    gt4 = np.asarray(gt, dtype=np.float64).reshape(predicted.shape)
    l_reg = ad.l1_loss(predicted, gt4, mask.reshape(predicted.shape))
    if alpha == 0:
        return l_cls, l_cls, l_reg
    return ad.add(l_cls, ad.scale(l_reg, alpha)), l_cls, l_reg


def lr_at(n: int, lr0: float = 1e-6, decay_base: float = 0.98, decay_step: int = 1000) -> float:
    if n < 0:
        raise ValueError("iteration must be >= 0")
    return lr0 * decay_base ** (n // decay_step)


def flip(sample: TrainingSample) -> TrainingSample:
    """Mirror every raster left-right (bearings mirror with the image)."""
    def f(a):
        return None if a is None else np.ascontiguousarray(a[..., ::-1])
    return TrainingSample(f(sample.image), f(sample.gt), f(sample.valid), f(sample.reference),
                          f(sample.target_bins), f(sample.target_residual), f(sample.target_mask))


def scale_image(sample: TrainingSample, factor: float) -> TrainingSample:
    if factor == 1.0:
        return sample
    return replace(sample, image=(sample.image * np.float32(factor)).astype(np.float32))


def augment(sample: TrainingSample, rng: np.random.Generator, do_flip: bool = True,
            jitter: float = 0.1) -> TrainingSample:
    """Random horizontal flip and image value scaling in [1 - jitter, 1 + jitter]."""
    flip_it = rng.random() < 0.5
    factor = rng.uniform(1.0 - jitter, 1.0 + jitter)
    if do_flip and flip_it:
        sample = flip(sample)
    if jitter > 0:
        sample = scale_image(sample, factor)
    return sample


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; the last good state is kept."""

    def __init__(self, message: str, iteration: int, last_good: dict):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class TrainResult:
    net: DepthNet
    log: list = field(default_factory=list)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from consecutive shuffled epochs."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def train(samples: list[TrainingSample], net_cfg: NetworkConfig, cfg: TrainConfig,
          checkpoint_path=None, log_path=None, progress=None) -> TrainResult:
    """Minibatch momentum SGD on the combined loss.

    Writes the loss log (``iter,loss,loss_cls,loss_reg,lr``) and checkpoints
    when paths are given.  Deterministic for a fixed ``cfg.rng_seed``.
    """
    if not samples:
        raise ValueError("empty training set")
    net = DepthNet(net_cfg, seed=cfg.rng_seed)
    bins = net.bins
    residual_bins = net_cfg.global_skip
    opt = ad.SGD(net.params, cfg.momentum)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    stream = batches(len(samples), cfg.batch_size, rng)
    log: list[list] = []
    last_good = {k: v.copy() for k, v in net.state_dict().items()}

    def save(state):
        if checkpoint_path is not None:
            ad.save_checkpoint(checkpoint_path, state)

    for it in range(cfg.iterations):
        batch = [augment(samples[i], rng, cfg.flip, cfg.scale_jitter).with_targets(bins, residual_bins)
                 for i in next(stream)]
        img = np.stack([s.image for s in batch])
        ref = np.stack([s.reference for s in batch]).astype(np.float32)
        tb = np.stack([s.target_bins for s in batch])
        mask = np.stack([s.target_mask for s in batch])
        gt_down = np.stack([downsample_depth(s.gt, s.valid)[0] for s in batch])
        lr = lr_at(it, cfg.lr0, cfg.decay_base, cfg.decay_step)
        out = net.forward(img, ref, training=True)
        loss, l_cls, l_reg = combined_loss(out.probs, out.depth, tb, gt_down, mask, cfg.alpha)
        values = [float(loss.data), float(l_cls.data), float(l_reg.data)]
        try:
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteError(f"non-finite loss at iteration {it}: {values}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
        except NonFiniteError as exc:
            save(last_good)
            _write_log(log_path, log)
            raise TrainingAborted(str(exc), it, last_good) from exc
        log.append([it, *values, lr])
        last_good = {k: v.copy() for k, v in net.state_dict().items()}
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save(last_good)
        if progress is not None:
            progress(it, values)
    save(net.state_dict())
    _write_log(log_path, log)
    return TrainResult(net, log)


def _write_log(path, log) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for it, loss, lc, lr_, lr in log:
            w.writerow([it, repr(loss), repr(lc), repr(lr_), repr(lr)])


def read_loss_log(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(x) for x in r] for r in rows], dtype=np.float64).reshape(-1, len(LOSS_LOG_HEADER))
