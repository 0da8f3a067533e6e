"""Depth metrics, median refinement, height-stratified evaluation and obstacle maps."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import DepthMap
from .errors import DomainError, UndefinedMetricsError
from .geometry import CameraIntrinsics, GravityFrame, Pose, back_project, depth_map_heights

DELTA = 1.25
# CSV label -> attribute
METRIC_NAMES = (("rms", "rms"), ("rel", "rel"), ("log10", "log10"), ("d1", "delta1"),
                ("d2", "delta2"), ("d3", "delta3"), ("n_pixels", "n_pixels"))


@dataclass
class MetricsReport:
    rms: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def rows(self) -> list[tuple[str, str]]:
        return [(label, repr(getattr(self, attr))) for label, attr in METRIC_NAMES]


def _errors(pred: np.ndarray, gt: np.ndarray) -> dict[str, np.ndarray]:
    p, g = pred.astype(np.float64), gt.astype(np.float64)
    ratio = np.maximum(p / g, g / p)
    return {"sq": (p - g) ** 2, "rel": np.abs(p - g) / g,
            "log10": np.abs(np.log10(p) - np.log10(g)), "ratio": ratio}


def compute_metrics(pred: DepthMap, gt: DepthMap, mask=None) -> MetricsReport:
    """rms, rel, log10 and delta_k (percent, strict ``<``) over pixels valid in both maps."""
    if pred.values.shape != gt.values.shape:
        raise DomainError(f"shape mismatch {pred.values.shape} vs {gt.values.shape}")
    m = pred.valid & gt.valid & (pred.values > 0) & (gt.values > 0)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise UndefinedMetricsError("no pixels to evaluate")
    e = _errors(pred.values[m], gt.values[m])
    deltas = [100.0 * np.count_nonzero(e["ratio"] < DELTA ** k) / n for k in (1, 2, 3)]
    return MetricsReport(float(np.sqrt(e["sq"].mean())), float(e["rel"].mean()),
                         float(e["log10"].mean()), *deltas, n)


def median_refine(pred: DepthMap, window: int = 3) -> DepthMap:
    """2D median over valid neighbours; invalid pixels stay invalid and untouched."""
    if window < 1 or window % 2 == 0:
        raise DomainError(f"median window must be odd and >= 1, got {window}")
    if window == 1:
        return DepthMap(pred.values.copy(), pred.valid.copy())
    half = window // 2
    v = np.where(pred.valid, pred.values.astype(np.float64), np.nan)
    padded = np.pad(v, half, constant_values=np.nan)
    win = sliding_window_view(padded, (window, window))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)   # all-NaN windows
        med = np.nanmedian(win.reshape(*v.shape, -1), axis=-1)
    out = np.where(pred.valid, med, pred.values)
    return DepthMap(out.astype(np.float32), pred.valid.copy())


def upscale_nearest(depth: DepthMap, shape: tuple[int, int]) -> DepthMap:
    """Nearest-neighbour resize to ``shape`` (integer factors replicate pixels exactly)."""
    h, w = depth.values.shape
    rows = np.minimum((np.arange(shape[0]) * h) // shape[0], h - 1)
    cols = np.minimum((np.arange(shape[1]) * w) // shape[1], w - 1)
    return DepthMap(depth.values[np.ix_(rows, cols)], depth.valid[np.ix_(rows, cols)])


# ------------------------------------------------------------ height bands

def default_bands() -> list[tuple[float, float]]:
    """21 bands of 10 cm centered on 10, 20, ..., 210 cm (meters)."""
    return [((c - 5) / 100.0, (c + 5) / 100.0) for c in range(10, 211, 10)]


@dataclass
class BandReport:
    lo: float
    hi: float
    report: MetricsReport | None

    @property
    def empty(self) -> bool:
        return self.report is None


def band_membership(heights: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (heights > lo) & (heights <= hi)


def metrics_by_height(pred: DepthMap, gt: DepthMap, k: CameraIntrinsics, gf: GravityFrame,
                      bands=None, mask=None) -> list[BandReport]:
    """Per-band metrics; each pixel's band is the height of its ground-truth 3D point."""
    heights = depth_map_heights(np.where(gt.valid, gt.values, 0.0), k, gf)
    return band_metrics(pred, gt, heights, bands, mask)


def band_metrics(pred: DepthMap, gt: DepthMap, heights: np.ndarray, bands=None,
                 mask=None) -> list[BandReport]:
    """Per-band metrics given a per-pixel height raster aligned with ``gt``."""
    bands = default_bands() if bands is None else list(bands)
    if not bands:
        raise DomainError("need at least one band")
    base = gt.valid & pred.valid
    if mask is not None:
        base &= np.asarray(mask, dtype=bool)
    out = []
    for lo, hi in bands:
        m = base & band_membership(heights, lo, hi)
        out.append(BandReport(lo, hi, compute_metrics(pred, gt, m) if m.any() else None))
    return out


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(report.rows())


BAND_HEADER = ["band_lo_cm", "band_hi_cm", "rms", "rel", "log10", "d1", "d2", "d3"]


def write_bands_csv(path, bands: list[BandReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BAND_HEADER)
        for b in bands:
            lo, hi = round(b.lo * 100, 6), round(b.hi * 100, 6)
            if b.empty:
                w.writerow([lo, hi, "", "", "", "", "", ""])
            else:
                r = b.report
                w.writerow([lo, hi, *(repr(x) for x in (r.rms, r.rel, r.log10, r.delta1, r.delta2, r.delta3))])


# ------------------------------------------------------------ obstacle maps

@dataclass
class ObstacleMap:
    bearing_edges: np.ndarray
    nearest: np.ndarray            # NaN where the bin is empty
    height_range: tuple[float, float]

    @property
    def bearings(self) -> np.ndarray:
        return 0.5 * (self.bearing_edges[:-1] + self.bearing_edges[1:])

    @property
    def empty(self) -> np.ndarray:
        return np.isnan(self.nearest)


def bearing_edges(k: CameraIntrinsics, n_bearings: int) -> np.ndarray:
    lo, hi = k.bearing_span()
    return np.linspace(lo, hi, n_bearings + 1)


def bin_planar_points(bearings: np.ndarray, dists: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Minimum distance per bearing bin (NaN for empty bins)."""
    n = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, bearings, side="right") - 1, 0, n - 1)
    nearest = np.full(n, np.inf)
    np.minimum.at(nearest, idx, dists)
    return np.where(np.isfinite(nearest), nearest, np.nan)


def planar_coordinates(points: np.ndarray, gf: GravityFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(bearing, planar distance, height) of camera-frame points."""
    right, fwd = gf.horizontal_basis()
    x, z = _dot3(points, right), _dot3(points, fwd)
    return np.arctan2(x, z), np.sqrt(x * x + z * z), gf.camera_height - _dot3(points, gf.vector)


def _dot3(points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    # fixed summation order, so results do not depend on the BLAS kernel or batch size
    return points[..., 0] * axis[0] + points[..., 1] * axis[1] + points[..., 2] * axis[2]


def obstacle_map(depth: DepthMap, k: CameraIntrinsics, gf: GravityFrame, M: float = 1.0,
                 n_bearings: int = 64, min_height: float = 0.05) -> ObstacleMap:
    """Down-project valid pixels with height in (min_height, M] to nearest distance per bearing.

    ``min_height`` separates the ground from obstacles; 0 reproduces the
    literal (0, M] filter but then numerically noisy ground points count.
    """
    if not M > 0:
        raise DomainError("M must be positive")
    u, v = k.pixel_grid()
    m = depth.valid & (depth.values > 0)
    pts = back_project(u[m], v[m], depth.values[m], k)
    bearing, dist, height = planar_coordinates(pts, gf)
    keep = (height > min_height) & (height <= M)
    edges = bearing_edges(k, n_bearings)
    return ObstacleMap(edges, bin_planar_points(bearing[keep], dist[keep], edges), (min_height, M))


def laser_obstacle_map(scan, edges: np.ndarray, M: float = 1.0, min_height: float = 0.05) -> ObstacleMap:
    """Obstacle map from a planar scan (all returns sit at the mount height)."""
    pts_ok = scan.valid if min_height < scan.mount_height <= M else np.zeros_like(scan.valid)
    return ObstacleMap(edges, bin_planar_points(scan.bearings[pts_ok], scan.ranges[pts_ok], edges),
                       (min_height, M))


@dataclass
class ObstacleComparison:
    maps: dict[str, ObstacleMap]
    missed: list[dict] = field(default_factory=list)

    def csv_rows(self) -> list[tuple]:
        rows = []
        for source, om in self.maps.items():
            for b, d in zip(om.bearings, om.nearest):
                rows.append((repr(float(b)), "" if np.isnan(d) else repr(float(d)), source))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bearing_rad", "nearest_m", "source"])
            w.writerows(self.csv_rows())

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["laser", "dense", "bin", "bearing_rad", "dense_m", "laser_m"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(self.missed)


def find_misses(laser: ObstacleMap, dense: ObstacleMap, margin: float = 0.1) -> list[int]:
    """Bins where the dense map sees an obstacle the laser misses or places > margin farther."""
    out = []
    for i, (dl, dd) in enumerate(zip(laser.nearest, dense.nearest)):
        if np.isnan(dd):
            continue
        if np.isnan(dl) or dl > dd + margin:
            out.append(i)
    return out


def compare_obstacle_sources(scene, pose: Pose, k: CameraIntrinsics, heights=(0.2, 0.8),
                             model: Callable | None = None, M: float = 1.0, n_bearings: int = 64,
                             min_height: float = 0.05, reference_height: float = 0.8,
                             margin: float = 0.1) -> ObstacleComparison:
    """Obstacle maps from planar lasers at ``heights``, predicted depth and ground truth.

    ``model(image, reference)`` must return a full-resolution DepthMap; the
    reference is built from a noiseless scan at ``reference_height``.
    """
    from .refmap import build_reference
    from .scene_sim import raycast_depth, shade_image, simulate_laser

    gf = pose.gravity_frame()
    edges = bearing_edges(k, n_bearings)
    lo, hi = k.bearing_span()
    half = max(abs(lo), abs(hi))
    n_rays = 4 * k.width
    maps: dict[str, ObstacleMap] = {}
    for h in heights:
        scan = simulate_laser(scene, pose, h, 2 * half, n_rays)
        maps[f"laser_{round(h * 100)}cm"] = laser_obstacle_map(scan, edges, M, min_height)
    gt = raycast_depth(scene, pose, k)
    dense = {"depth_gt": obstacle_map(gt, k, gf, M, n_bearings, min_height)}
    if model is not None:
        ref_scan = simulate_laser(scene, pose, reference_height, 2 * half, k.width)
        pred = model(shade_image(scene, pose, k), build_reference(ref_scan, gf, k))
        dense["depth_pred"] = obstacle_map(pred, k, gf, M, n_bearings, min_height)
    maps.update(dense)
    missed = []
    for lname in [n for n in maps if n.startswith("laser_")]:
        for dname, dmap in dense.items():
            for i in find_misses(maps[lname], dmap, margin):
                missed.append({"laser": lname, "dense": dname, "bin": i,
                               "bearing_rad": repr(float(dmap.bearings[i])),
                               "dense_m": repr(float(dmap.nearest[i])),
                               "laser_m": "" if np.isnan(maps[lname].nearest[i]) else repr(float(maps[lname].nearest[i]))})
    return ObstacleComparison(maps, missed)


def table_scene():
    """A table top on thin legs in front of a level camera, with open space beneath."""
    from .scene_sim import Box, Scene
    top = Box((-0.6, 0.70, 1.6), (0.6, 0.76, 2.4), 0.6)
    legs = [Box((x, 0.0, z), (x + 0.04, 0.70, z + 0.04), 0.6)
            for x in (-0.6, 0.56) for z in (1.6, 2.36)]
    scene = Scene.room(-3.0, 3.0, -0.5, 6.0, boxes=[top, *legs])
    return scene, Pose.level(0.0, 1.2, 0.0)
