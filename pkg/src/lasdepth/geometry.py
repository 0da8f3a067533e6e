"""Pinhole camera model, gravity frame and projection primitives.

Camera frame: x right, y down, z forward.  World frame: X right, Y up,
Z forward, ground plane at Y = 0.  Integer pixel coordinates address pixel
centers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, ConfigurationError, DomainError

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float) -> "CameraIntrinsics":
        """Square-pixel camera centered on the image with horizontal FOV ``hfov`` (rad)."""
        f = (width / 2.0) / math.tan(hfov / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan((self.width / 2.0) / self.fx)

    def column_bearings(self) -> np.ndarray:
        """Azimuth of each pixel column's center (radians, increasing with u)."""
        u = np.arange(self.width, dtype=np.float64)
        return np.arctan((u - self.cx) / self.fx)

    def bearing_span(self) -> tuple[float, float]:
        """Azimuths of the left and right image borders."""
        return (math.atan((-0.5 - self.cx) / self.fx),
                math.atan((self.width - 0.5 - self.cx) / self.fx))

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v

    def ray_directions(self) -> np.ndarray:
        """Unnormalized (H, W, 3) directions with unit z component."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)

    def downsample(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of an image block-averaged by ``factor``."""
        w, h = self.width // factor, self.height // factor
        return CameraIntrinsics(self.fx / factor, self.fy / factor,
                                (self.cx + 0.5) / factor - 0.5,
                                (self.cy + 0.5) / factor - 0.5, w, h)


def _as_unit(vec, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > _UNIT_TOL:
        raise DomainError(f"{what} must be a unit vector (norm {n})")
    return v


@dataclass(frozen=True)
class GravityFrame:
    g: tuple = (0.0, 1.0, 0.0)
    camera_height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(c) for c in _as_unit(self.g, "gravity")))
        if not self.camera_height > 0:
            raise DomainError("camera_height must be positive")

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.g, dtype=np.float64)

    def is_level(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.g, (0.0, 1.0, 0.0), atol=tol, rtol=0))

    def horizontal_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit (right, forward) vectors spanning the plane perpendicular to g."""
        g = self.vector
        z = np.array([0.0, 0.0, 1.0])
        fwd = z - np.dot(z, g) * g
        n = np.linalg.norm(fwd)
        if n < 1e-6:
            raise ConfigurationError("gravity parallel to the optical axis")
        fwd /= n
        right = np.cross(g, fwd)
        return right, fwd


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", _as_unit(self.direction, "ray direction"))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Pose:
    """Camera pose: ``rotation`` maps camera-frame vectors to world, ``position`` in world."""
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, 1.0]))
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    @classmethod
    def level(cls, x: float = 0.0, height: float = 1.0, z: float = 0.0,
              yaw: float = 0.0, pitch: float = 0.0) -> "Pose":
        """Camera at (x, height, z); yaw about world up, pitch > 0 tilts the view down."""
        base = np.diag([1.0, -1.0, 1.0])
        cp, sp = math.cos(pitch), math.sin(pitch)
        # rotation about camera x; positive pitch sends +z toward +y (down)
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
        cy, sy = math.cos(yaw), math.sin(yaw)
        ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
        return cls(ry @ base @ rx, np.array([x, height, z], dtype=np.float64))

    def to_world(self, p_cam: np.ndarray) -> np.ndarray:
        return p_cam @ self.rotation.T + self.position

    def dir_to_world(self, d_cam: np.ndarray) -> np.ndarray:
        return d_cam @ self.rotation.T

    def gravity_frame(self) -> GravityFrame:
        down_world = np.array([0.0, -1.0, 0.0])
        g = self.rotation.T @ down_world
        return GravityFrame(tuple(g / np.linalg.norm(g)), float(self.position[1]))


def pixel_to_ray(u: float, v: float, k: CameraIntrinsics) -> Ray:
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise DomainError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    return Ray(np.zeros(3), d / np.linalg.norm(d))


def project(p, k: CameraIntrinsics) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in np.asarray(p, dtype=np.float64).reshape(3))
    if z <= 0:
        raise BehindCameraError(f"point has z={z} <= 0")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def back_project(u, v, depth, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame 3D points for pixels (u, v) at z-depth ``depth``; broadcasts."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    return np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z + 0.0 * u], axis=-1)


def pixel_height(u, v, depth, k: CameraIntrinsics, gf: GravityFrame):
    """Height above the ground plane of the back-projected point(s)."""
    if np.any(np.asarray(depth) <= 0):
        raise DomainError("depth must be positive")
    p = back_project(u, v, depth, k)
    h = gf.camera_height - p @ gf.vector
    return float(h) if np.ndim(h) == 0 else h


def depth_map_heights(depth: np.ndarray, k: CameraIntrinsics, gf: GravityFrame) -> np.ndarray:
    """Per-pixel heights for a full (H, W) depth raster; non-positive depths give NaN."""
    u, v = k.pixel_grid()
    z = np.where(depth > 0, depth, np.nan).astype(np.float64)
    p = back_project(u, v, z, k)
    return gf.camera_height - p @ gf.vector
