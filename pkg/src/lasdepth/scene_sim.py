"""Synthetic scenes with analytic ground truth.

Scenes are a ground plane, vertical wall segments and axis-aligned boxes in
the world frame (Y up, ground at Y = 0).  Everything is ray cast exactly, so
depth, images and laser scans are pure functions of (scene, pose, seed).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .data import DepthMap, LaserScan
from .geometry import CameraIntrinsics, Pose
from .errors import DomainError

EPS = 1e-9
# direction toward the light, world frame
LIGHT_DIR = np.array([0.3, 0.8, -0.5]) / np.linalg.norm([0.3, 0.8, -0.5])


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(float(c) for c in self.hi))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise DomainError("box must have positive extent")
        if self.lo[1] < 0:
            raise DomainError("box bottom below ground")
        if not 0 < self.albedo <= 1:
            raise DomainError("albedo must be in (0, 1]")


@dataclass(frozen=True)
class Wall:
    """Vertical wall segment from (x0, z0) to (x1, z1), standing on the ground."""
    p0: tuple
    p1: tuple
    height: float = 3.0
    albedo: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "p0", tuple(float(c) for c in self.p0))
        object.__setattr__(self, "p1", tuple(float(c) for c in self.p1))
        if self.p0 == self.p1 or self.height <= 0:
            raise DomainError("degenerate wall")
        if not 0 < self.albedo <= 1:
            raise DomainError("albedo must be in (0, 1]")


@dataclass(frozen=True)
class Scene:
    boxes: tuple = ()
    walls: tuple = ()
    ground: bool = True
    ground_albedo: float = 0.5
    max_range: float = 20.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        d = json.loads(text)
        return cls(tuple(Box(**b) for b in d["boxes"]), tuple(Wall(**w) for w in d["walls"]),
                   d["ground"], d["ground_albedo"], d["max_range"])

    @classmethod
    def room(cls, x0: float, x1: float, z0: float, z1: float, height: float = 3.0,
             albedo: float = 0.8, boxes=(), **kw) -> "Scene":
        corners = [(x0, z0), (x1, z0), (x1, z1), (x0, z1)]
        walls = tuple(Wall(corners[i], corners[(i + 1) % 4], height, albedo) for i in range(4))
        return cls(tuple(boxes), walls, **kw)


def intersect(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit of each ray (world frame, any direction scale).

    Returns ``(t, normal, albedo)`` with ``t = inf`` where nothing is hit.
    ``t`` is measured in units of the given direction vectors.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros(n)

    def take(t, nrm, alb):
        better = t < best
        best[better] = t[better]
        normal[better] = nrm[better] if np.ndim(nrm) == 2 else nrm
        albedo[better] = alb

    ox, oy, oz = origins[:, 0], origins[:, 1], origins[:, 2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if scene.ground:
            t = np.where(dy < 0, -oy / dy, np.inf)
            t = np.where(t > EPS, t, np.inf)
            take(t, np.array([0.0, 1.0, 0.0]), scene.ground_albedo)

        for wall in scene.walls:
            ex, ez = wall.p1[0] - wall.p0[0], wall.p1[1] - wall.p0[1]
            denom = dx * ez - dz * ex
            rx, rz = wall.p0[0] - ox, wall.p0[1] - oz
            t = (rx * ez - rz * ex) / denom
            s = (rx * dz - rz * dx) / denom
            y = oy + t * dy
            ok = (denom != 0) & (t > EPS) & (s >= 0) & (s <= 1) & (y >= 0) & (y <= wall.height)
            t = np.where(ok, t, np.inf)
            nrm = np.array([ez, 0.0, -ex]) / math.hypot(ex, ez)
            facing = np.where((dirs @ nrm)[:, None] < 0, nrm, -nrm)
            take(t, facing, wall.albedo)

        for box in scene.boxes:
            lo, hi = np.array(box.lo), np.array(box.hi)
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
            tnear = np.minimum(t1, t2)
            tfar = np.maximum(t1, t2)
            axis = np.argmax(tnear, axis=1)
            t_in = np.max(tnear, axis=1)
            t_out = np.min(tfar, axis=1)
            ok = (t_in <= t_out) & (t_in > EPS)
            t = np.where(ok, t_in, np.inf)
            nrm = np.zeros((n, 3))
            nrm[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            take(t, nrm, box.albedo)
    return best, normal, albedo


def _camera_rays(pose: Pose, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    d_cam = k.ray_directions().reshape(-1, 3)   # z component 1 -> t is z-depth
    return pose.position, pose.dir_to_world(d_cam)


def raycast_depth(scene: Scene, pose: Pose, k: CameraIntrinsics) -> DepthMap:
    origin, dirs = _camera_rays(pose, k)
    t, _, _ = intersect(scene, origin, dirs)
    valid = np.isfinite(t) & (t * np.linalg.norm(dirs, axis=1) <= scene.max_range)
    values = np.where(valid, t, 0.0).reshape(k.height, k.width)
    return DepthMap(values, valid.reshape(k.height, k.width))


def shade_image(scene: Scene, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Lambertian pseudo-intensity ``albedo * max(0, <n, light>)`` in [0, 1]; misses are 0."""
    origin, dirs = _camera_rays(pose, k)
    t, normal, albedo = intersect(scene, origin, dirs)
    valid = np.isfinite(t) & (t * np.linalg.norm(dirs, axis=1) <= scene.max_range)
    img = albedo * np.clip(normal @ LIGHT_DIR, 0.0, None)
    img = np.where(valid, img, 0.0)
    return np.clip(img, 0.0, 1.0).reshape(k.height, k.width).astype(np.float32)


def laser_rays(pose: Pose, mount_height: float, bearings: np.ndarray):
    """World-frame origin and unit directions of a scan plane perpendicular to gravity."""
    gf = pose.gravity_frame()
    right, fwd = gf.horizontal_basis()
    d_cam = np.sin(bearings)[:, None] * right + np.cos(bearings)[:, None] * fwd
    dirs = pose.dir_to_world(d_cam)
    dirs[:, 1] = 0.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([pose.position[0], mount_height, pose.position[2]])
    return origin, dirs


def simulate_laser(scene: Scene, pose: Pose, mount_height: float, fov: float, n_rays: int,
                   noise_sigma: float = 0.0, dropout_p: float = 0.0,
                   rng_seed=None, scan_id: str = "") -> LaserScan:
    if not mount_height > 0:
        raise DomainError("mount_height must be positive")
    if n_rays < 2:
        raise DomainError("need at least two rays")
    bearings = np.linspace(-fov / 2.0, fov / 2.0, n_rays)
    origin, dirs = laser_rays(pose, mount_height, bearings)
    t, _, _ = intersect(scene, origin, dirs)
    hit = np.isfinite(t) & (t <= scene.max_range)
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, 1.0, n_rays) * noise_sigma
    dropped = rng.random(n_rays) < dropout_p
    ranges = np.where(hit, t + noise, 0.0)
    valid = hit & ~dropped & (ranges > 0)
    return LaserScan(mount_height, bearings, np.where(valid, ranges, 0.0), valid, scan_id)


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 48
    hfov_deg: float = 60.0
    camera_height_min: float = 1.0
    camera_height_max: float = 1.5
    room_min: float = 4.0
    room_max: float = 8.0
    wall_height: float = 3.0
    box_count_min: int = 2
    box_count_max: int = 6
    box_size_min: float = 0.2
    box_size_max: float = 1.5
    floating_box_p: float = 0.2
    max_range: float = 20.0
    laser_mount_height: float = 0.8
    laser_noise_sigma: float = 0.01
    laser_dropout_p: float = 0.05
    laser_n_rays: int = 0          # 0 -> image width
    laser_fov_deg: float = 0.0     # 0 -> camera horizontal FOV

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, math.radians(self.hfov_deg))


def random_scene(cfg: SceneConfig, rng: np.random.Generator) -> tuple[Scene, Pose]:
    """Rectangular room with 2-6 boxes placed in front of a level camera."""
    width = rng.uniform(cfg.room_min, cfg.room_max)
    depth = rng.uniform(cfg.room_min, cfg.room_max)
    cam_x = rng.uniform(-0.3, 0.3) * width
    cam_z = -rng.uniform(0.3, 1.0)
    cam_h = rng.uniform(cfg.camera_height_min, cfg.camera_height_max)
    x0, x1 = -width / 2, width / 2
    z0, z1 = cam_z - 0.05, cam_z + depth
    boxes = []
    for _ in range(int(rng.integers(cfg.box_count_min, cfg.box_count_max + 1))):
        sx, sy, sz = rng.uniform(cfg.box_size_min, cfg.box_size_max, 3)
        bz = rng.uniform(cam_z + 1.0, max(z1 - sz - 0.05, cam_z + 1.05))
        bx = rng.uniform(x0 + 0.05, max(x1 - sx - 0.05, x0 + 0.06))
        by = 0.0
        if rng.random() < cfg.floating_box_p:
            by = rng.uniform(0.3, 1.2)
            sy = min(sy, rng.uniform(0.05, 0.3))
        boxes.append(Box((bx, by, bz), (bx + sx, by + sy, bz + sz), float(rng.uniform(0.2, 1.0))))
    scene = Scene.room(x0, x1, z0, z1, height=cfg.wall_height, albedo=float(rng.uniform(0.5, 1.0)),
                       boxes=boxes, ground_albedo=float(rng.uniform(0.2, 0.6)),
                       max_range=cfg.max_range)
    return scene, Pose.level(cam_x, cam_h, cam_z)


def render_sample(cfg: SceneConfig, seed) -> dict:
    """Everything one dataset sample needs, as in-memory objects."""
    rng = np.random.default_rng(seed)
    scene, pose = random_scene(cfg, rng)
    k = cfg.intrinsics()
    fov = math.radians(cfg.laser_fov_deg) if cfg.laser_fov_deg > 0 else k.hfov
    n_rays = cfg.laser_n_rays or cfg.width
    laser_seed = int(rng.integers(0, 2**63 - 1))
    return {
        "scene": scene,
        "pose": pose,
        "intrinsics": k,
        "gravity": pose.gravity_frame(),
        "image": shade_image(scene, pose, k),
        "depth": raycast_depth(scene, pose, k),
        "scan": simulate_laser(scene, pose, cfg.laser_mount_height, fov, n_rays,
                               cfg.laser_noise_sigma, cfg.laser_dropout_p, laser_seed),
    }


SAMPLE_FILES = {"image": "image.pgm", "depth": "depth.pfm", "scan": "scan.csv",
                "camera": "camera.txt", "scene": "scene.json"}


def write_sample(sample_dir: Path, sample: dict) -> None:
    sample_dir.mkdir(parents=True, exist_ok=True)
    io.write_pgm(sample_dir / SAMPLE_FILES["image"], sample["image"])
    io.write_pfm(sample_dir / SAMPLE_FILES["depth"], sample["depth"])
    io.write_scan_csv(sample_dir / SAMPLE_FILES["scan"], sample["scan"])
    io.write_camera_meta(sample_dir / SAMPLE_FILES["camera"], sample["intrinsics"], sample["gravity"])
    pose = sample["pose"]
    scene = json.loads(sample["scene"].to_json())
    scene["pose"] = {"rotation": pose.rotation.tolist(), "position": pose.position.tolist()}
    (sample_dir / SAMPLE_FILES["scene"]).write_text(json.dumps(scene, sort_keys=True))


def read_scene(path) -> tuple[Scene, Pose]:
    d = json.loads(Path(path).read_text())
    p = d.pop("pose")
    return Scene.from_json(json.dumps(d)), Pose(np.array(p["rotation"]), np.array(p["position"]))


def generate_dataset(out_dir, n_scenes: int, split_ratio: float = 0.8,
                     config: SceneConfig | None = None, rng_seed: int = 0) -> Path:
    """Write ``n_scenes`` samples (one per scene) plus ``manifest.csv``.

    The first ``round(n_scenes * split_ratio)`` scenes form the train split.
    Each sample is seeded from its own child of ``rng_seed``, so samples can
    be generated independently of each other.
    """
    if n_scenes < 2:
        raise DomainError("need at least two scenes")
    cfg = config or SceneConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = int(round(n_scenes * split_ratio))
    seeds = np.random.SeedSequence(rng_seed).spawn(n_scenes)
    rows = []
    for i, seed in enumerate(seeds):
        split = "train" if i < n_train else "test"
        rel = Path(split) / f"{i:05d}"
        write_sample(out / rel, render_sample(cfg, seed))
        rows.append({"split": split, "sample_id": f"{i:05d}",
                     **{key: str(rel / name) for key, name in SAMPLE_FILES.items()}})
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return out
