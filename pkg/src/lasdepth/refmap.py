"""Dense reference depth from a single planar laser scan.

The scan is median filtered, linearly interpolated to one bearing per image
column, and each point is extruded into a line along gravity.  The resulting
ruled surface is rendered into the camera.
"""
from __future__ import annotations

import numpy as np

from .data import LaserScan, ReferenceDepthMap
from .errors import ConfigurationError, DomainError, EmptyScanError
from .geometry import CameraIntrinsics, GravityFrame


def median_filter_scan(scan: LaserScan, window: int = 5) -> LaserScan:
    """Replace each valid range by the median of the valid ranges in its window.

    Near the ends of the scan the window shrinks symmetrically, so the first
    and last rays keep their own range.
    """
    if window < 1 or window % 2 == 0:
        raise DomainError(f"median window must be odd and >= 1, got {window}")
    half = window // 2
    ranges = scan.ranges.copy()
    for i in np.flatnonzero(scan.valid):
        h = min(half, i, len(scan) - 1 - i)
        lo, hi = i - h, i + h + 1
        neighbours = scan.ranges[lo:hi][scan.valid[lo:hi]]
        ranges[i] = np.median(neighbours)
    return LaserScan(scan.mount_height, scan.bearings.copy(), ranges, scan.valid.copy(), scan.scan_id)


def interpolate_scan(scan: LaserScan, target_bearings) -> LaserScan:
    """Ranges at ``target_bearings``, linear in range over bearing between valid rays."""
    if scan.n_valid == 0:
        raise EmptyScanError("scan has no valid rays")
    b = scan.bearings[scan.valid]
    r = scan.ranges[scan.valid]
    target = np.asarray(target_bearings, dtype=np.float64)
    if np.any(target < b[0]) or np.any(target > b[-1]):
        raise DomainError("target bearings outside the valid span of the scan")
    return LaserScan(scan.mount_height, target, np.interp(target, b, r),
                     np.ones(target.shape, dtype=bool), scan.scan_id)


def _laser_origin(scan: LaserScan, gf: GravityFrame) -> np.ndarray:
    # foot of the camera center on the scan plane, camera frame
    return (gf.camera_height - scan.mount_height) * gf.vector


def scan_points_3d(scan: LaserScan, gf: GravityFrame) -> np.ndarray:
    """Valid laser returns lifted into the camera frame at mount height."""
    right, fwd = gf.horizontal_basis()
    b, r = scan.bearings[scan.valid], scan.ranges[scan.valid]
    return (_laser_origin(scan, gf) + (r * np.sin(b))[:, None] * right
            + (r * np.cos(b))[:, None] * fwd)


def render_ruled_surface(points: np.ndarray, gf: GravityFrame, k: CameraIntrinsics):
    """Ray-cast the surface swept by lines through ``points`` along g.

    Consecutive points are joined by planar strips.  Returns ``(depth, hit)``
    as (H, W) arrays; ``depth`` is z-depth and is 0 where no strip is hit.
    Works for any camera orientation that is not looking straight along g.
    """
    right, fwd = gf.horizontal_basis()
    d = k.ray_directions().reshape(-1, 3)
    # everything reduces to 2D once the g component is projected away
    dx, dz = d @ right, d @ fwd
    px, pz = points @ right, points @ fwd
    ax, az = px[:-1], pz[:-1]
    ex, ez = px[1:] - ax, pz[1:] - az
    depth = np.full(d.shape[0], np.inf)
    chunk = 4096
    with np.errstate(divide="ignore", invalid="ignore"):
        for s in range(0, d.shape[0], chunk):
            rx, rz = dx[s:s + chunk, None], dz[s:s + chunk, None]
            denom = rx * ez - rz * ex
            t = (ax * ez - az * ex) / denom
            lam = (ax * rz - az * rx) / denom
            ok = (denom != 0) & (t > 0) & (lam >= 0) & (lam <= 1)
            depth[s:s + chunk] = np.min(np.where(ok, t, np.inf), axis=1)
    hit = np.isfinite(depth)
    depth = np.where(hit, depth, 0.0)   # d has unit z, so t is z-depth
    return depth.reshape(k.height, k.width), hit.reshape(k.height, k.width)


def _column_fill(scan: LaserScan, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    # level camera: every pixel of column u sees the surface line at the column's bearing
    cols = k.column_bearings()
    b, r = scan.bearings[scan.valid], scan.ranges[scan.valid]
    clamped = np.clip(cols, b[0], b[-1])
    z = np.interp(clamped, b, r) * np.cos(clamped)
    shape = (k.height, k.width)
    return np.broadcast_to(z, shape).copy(), np.broadcast_to(clamped != cols, shape).copy()


def extrude_and_render(scan: LaserScan, gf: GravityFrame, k: CameraIntrinsics) -> ReferenceDepthMap:
    """Render the gravity-extruded scan into a dense reference map.

    ``scan`` should already be dense over the image's horizontal FOV (see
    :func:`interpolate_scan`).  A level camera (g along +y) takes the exact
    column-fill path.  Any other orientation uses the full ray-surface
    intersection.  Pixels whose ray misses the surface take the depth of the
    nearest scan edge and are flagged in ``extrapolated``.
    """
    g = gf.vector
    if abs(g[2]) > 1.0 - 1e-9:
        raise ConfigurationError("gravity parallel to the optical axis")
    if scan.n_valid < 2:
        raise EmptyScanError("need at least two valid rays to build a surface")
    if gf.is_level():
        values, extrap = _column_fill(scan, k)
    else:
        values, hit = render_ruled_surface(scan_points_3d(scan, gf), gf, k)
        extrap = ~hit
        if not hit.all():
            values = np.where(hit, values, _edge_extension(scan, gf, k))
    return ReferenceDepthMap(values, np.ones_like(extrap), extrapolated=extrap,
                             scan_id=scan.scan_id, resolution=len(scan))


def _edge_extension(scan: LaserScan, gf: GravityFrame, k: CameraIntrinsics) -> np.ndarray:
    """Depth where each pixel ray reaches the horizontal range of the nearer scan edge."""
    right, fwd = gf.horizontal_basis()
    d = k.ray_directions().reshape(-1, 3)
    o = _laser_origin(scan, gf)
    dx, dz = d @ right, d @ fwd
    ox, oz = o @ right, o @ fwd
    az = np.arctan2(dx, dz)
    b, r = scan.bearings[scan.valid], scan.ranges[scan.valid]
    edge_r = np.where(az < 0.5 * (b[0] + b[-1]), r[0], r[-1])
    # |o_h + t d_h| = edge_r, take the positive root
    qa = dx * dx + dz * dz
    qb = 2.0 * (ox * dx + oz * dz)
    qc = ox * ox + oz * oz - edge_r ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-qb + np.sqrt(np.maximum(qb * qb - 4 * qa * qc, 0.0))) / (2 * qa)
    t = np.where(np.isfinite(t) & (t > 0), t, edge_r)
    return t.reshape(k.height, k.width)


def dense_scan(scan: LaserScan, k: CameraIntrinsics, window: int = 5) -> LaserScan:
    """Median filter, then resample at every column bearing inside the valid span.

    The span's end rays are kept as well: a tilted camera sees azimuths
    beyond the column bearings.
    """
    smooth = median_filter_scan(scan, window)
    if smooth.n_valid < 2:
        raise EmptyScanError("need at least two valid rays to build a reference map")
    b = smooth.bearings[smooth.valid]
    cols = k.column_bearings()
    target = np.unique(np.concatenate([[b[0]], cols[(cols > b[0]) & (cols < b[-1])], [b[-1]]]))
    return interpolate_scan(smooth, target)


def build_reference(scan: LaserScan, gf: GravityFrame, k: CameraIntrinsics,
                    window: int = 5) -> ReferenceDepthMap:
    """Median filter, interpolate to one bearing per column, extrude and render."""
    return extrude_and_render(dense_scan(scan, k, window), gf, k)
