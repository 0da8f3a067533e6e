"""Raster and scan containers shared by every stage of the pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class DepthMap:
    """Per-pixel metric z-depth (float32) with a validity mask.

    Invalid pixels carry no depth semantics; they are excluded from every
    loss and metric.
    """
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise DomainError("depth values and mask must be equal-shape 2D arrays")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values, np.ones(values.shape, dtype=bool))

    def check(self, max_range: float = np.inf) -> None:
        """Raise if a valid pixel is outside (0, max_range]."""
        v = self.values[self.valid]
        if v.size and not (np.all(v > 0) and np.all(v <= max_range) and np.all(np.isfinite(v))):
            raise DomainError("valid depth outside (0, max_range]")


@dataclass
class ReferenceDepthMap(DepthMap):
    """Dense depth rendered from a laser scan; ``extrapolated`` marks edge-filled pixels."""
    extrapolated: np.ndarray = None
    scan_id: str = ""
    resolution: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.extrapolated is None:
            self.extrapolated = np.zeros(self.values.shape, dtype=bool)
        self.extrapolated = np.asarray(self.extrapolated, dtype=bool)


@dataclass
class LaserScan:
    """A planar scan: ordered bearings (rad, camera azimuth), ranges (m) and per-ray validity."""
    mount_height: float
    bearings: np.ndarray
    ranges: np.ndarray
    valid: np.ndarray = None
    scan_id: str = ""

    def __post_init__(self):
        self.bearings = np.asarray(self.bearings, dtype=np.float64)
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.ranges) & (self.ranges > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.bearings.shape == self.ranges.shape == self.valid.shape) or self.bearings.ndim != 1:
            raise DomainError("bearings, ranges and valid must be equal-length 1D arrays")
        if np.any(np.diff(self.bearings) <= 0):
            raise DomainError("bearings must be strictly increasing")
        if np.any(self.ranges[self.valid] <= 0):
            raise DomainError("valid ranges must be positive")
        if not self.mount_height > 0:
            raise DomainError("mount_height must be positive")

    def __len__(self) -> int:
        return len(self.bearings)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def points(self) -> np.ndarray:
        """Valid returns as planar (right, forward) coordinates."""
        b, r = self.bearings[self.valid], self.ranges[self.valid]
        return np.stack([r * np.sin(b), r * np.cos(b)], axis=-1)
