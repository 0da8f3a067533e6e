"""Inference and dataset-level evaluation on top of a trained network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DepthMap
from .dataset import Sample
from .evaluation import BandReport, MetricsReport, band_metrics, compute_metrics, median_refine, upscale_nearest
from .geometry import depth_map_heights
from .network import DepthNet


def predict(net: DepthNet, samples: list[Sample], batch_size: int = 16) -> list[DepthMap]:
    """Evaluation-mode predictions at the network's output resolution."""
    out = []
    for s in range(0, len(samples), batch_size):
        chunk = samples[s:s + batch_size]
        img = np.stack([x.image for x in chunk])
        ref = np.stack([x.reference.values for x in chunk])
        depth = net.forward(img, ref, training=False).depth.data[:, 0]
        out.extend(DepthMap.dense(d) for d in depth)
    return out


def _pool(preds: list[DepthMap], gts: list[DepthMap]) -> tuple[DepthMap, DepthMap]:
    # stacking side by side keeps per-pixel metrics identical to pooling all pixels
    return (DepthMap(np.concatenate([p.values for p in preds], axis=1),
                     np.concatenate([p.valid for p in preds], axis=1)),
            DepthMap(np.concatenate([g.values for g in gts], axis=1),
                     np.concatenate([g.valid for g in gts], axis=1)))


@dataclass
class EvalResult:
    metrics: MetricsReport
    bands: list[BandReport]


def evaluate(preds: list[DepthMap], samples: list[Sample], refine_window: int = 0,
             bands=None) -> EvalResult:
    """Pooled metrics over all test pixels; predictions are upscaled to ground-truth size.

    ``refine_window > 0`` median-filters each prediction at its own
    resolution before upscaling.
    """
    full = []
    for p, s in zip(preds, samples):
        if refine_window:
            p = median_refine(p, refine_window)
        full.append(upscale_nearest(p, s.depth.values.shape))
    pred_all, gt_all = _pool(full, [s.depth for s in samples])
    heights = np.concatenate([depth_map_heights(np.where(s.depth.valid, s.depth.values, 0.0),
                                                s.intrinsics, s.gravity) for s in samples], axis=1)
    return EvalResult(compute_metrics(pred_all, gt_all), band_metrics(pred_all, gt_all, heights, bands))
