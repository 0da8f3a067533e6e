"""Readers and writers for the on-disk formats.

* depth rasters: PFM grayscale ("Pf"), little-endian, bottom-to-top rows,
  invalid pixels stored as -1.0
* images / masks: binary 8-bit PGM ("P5")
* laser scans: CSV with a ``# mount_height_m=<v>`` line then
  ``bearing_rad,range_m,valid``
* camera meta and configs: flat ``key=value`` text
"""
from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .data import DepthMap, LaserScan
from .geometry import CameraIntrinsics, GravityFrame

INVALID_DEPTH = -1.0


def write_pfm(path, depth: DepthMap) -> None:
    values = np.where(depth.valid, depth.values, INVALID_DEPTH).astype("<f4")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path) -> DepthMap:
    with open(path, "rb") as f:
        raw = f.read()
    header = []
    pos = 0
    while len(header) < 3:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].strip()
        pos = end + 1
        if line:
            header.append(line.decode("ascii"))
    if header[0] != "Pf":
        raise ValueError(f"{path}: not a grayscale PFM")
    w, h = (int(t) for t in header[1].split())
    scale = float(header[2])
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)[::-1]
    values = values.astype(np.float32)
    valid = values > 0
    return DepthMap(np.where(valid, values, 0.0), valid)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float raster (or a bool mask) as 8-bit PGM."""
    img = np.asarray(image)
    if img.dtype == bool:
        data = img.astype(np.uint8) * 255
    else:
        data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM into float32 values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float32) / np.float32(maxval)


def write_scan_csv(path, scan: LaserScan) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# mount_height_m={scan.mount_height!r}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bearing_rad", "range_m", "valid"])
        for b, r, ok in zip(scan.bearings, scan.ranges, scan.valid):
            writer.writerow([repr(float(b)), repr(float(r) if ok else 0.0), int(ok)])


def read_scan_csv(path) -> LaserScan:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# mount_height_m="):
        raise ValueError(f"{path}: missing mount height meta line")
    mount = float(lines[0].split("=", 1)[1])
    rows = list(csv.DictReader(_io.StringIO("\n".join(lines[1:]))))
    bearings = np.array([float(r["bearing_rad"]) for r in rows])
    ranges = np.array([float(r["range_m"]) for r in rows])
    valid = np.array([r["valid"].strip() in ("1", "true", "True") for r in rows], dtype=bool)
    ranges = np.where(valid, ranges, 0.0)
    return LaserScan(mount, bearings, ranges, valid, scan_id=Path(path).parent.name)


def read_kv(path) -> dict[str, str]:
    """Parse flat ``key=value`` text; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as f:
        for key, value in items.items():
            f.write(f"{key}={value}\n")


CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "camera_height", "g_x", "g_y", "g_z")


def write_camera_meta(path, k: CameraIntrinsics, gf: GravityFrame) -> None:
    write_kv(path, {
        "fx": repr(k.fx), "fy": repr(k.fy), "cx": repr(k.cx), "cy": repr(k.cy),
        "width": k.width, "height": k.height, "camera_height": repr(gf.camera_height),
        "g_x": repr(gf.g[0]), "g_y": repr(gf.g[1]), "g_z": repr(gf.g[2]),
    })


def read_camera_meta(path) -> tuple[CameraIntrinsics, GravityFrame]:
    kv = read_kv(path)
    missing = [key for key in CAMERA_KEYS if key not in kv]
    if missing:
        raise ValueError(f"{path}: missing camera keys {missing}")
    k = CameraIntrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                         int(kv["width"]), int(kv["height"]))
    g = np.array([float(kv["g_x"]), float(kv["g_y"]), float(kv["g_z"])])
    return k, GravityFrame(tuple(g / np.linalg.norm(g)), float(kv["camera_height"]))
