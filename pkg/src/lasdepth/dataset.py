"""Load generated datasets into memory, building each sample's reference map."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .data import DepthMap, LaserScan, ReferenceDepthMap
from .geometry import CameraIntrinsics, GravityFrame
from .refmap import build_reference


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray          # (H, W) float32 in [0, 1]
    depth: DepthMap            # ground truth
    scan: LaserScan
    reference: ReferenceDepthMap
    intrinsics: CameraIntrinsics
    gravity: GravityFrame
    directory: Path | None = None


def read_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "manifest.csv"
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_sample(sample_dir, window: int = 5) -> Sample:
    d = Path(sample_dir)
    k, gf = io.read_camera_meta(d / "camera.txt")
    scan = io.read_scan_csv(d / "scan.csv")
    return Sample(d.name, io.read_pgm(d / "image.pgm"), io.read_pfm(d / "depth.pfm"), scan,
                  build_reference(scan, gf, k, window), k, gf, d)


def load_split(dataset_dir, split: str, window: int = 5) -> list[Sample]:
    root = Path(dataset_dir)
    rows = [r for r in read_manifest(root) if r["split"] == split]
    return [load_sample((root / r["depth"]).parent, window) for r in rows]
