"""Monocular depth estimation guided by a single planar laser scan."""

from .data import DepthMap, LaserScan, ReferenceDepthMap
from .geometry import CameraIntrinsics, GravityFrame, Pose, Ray
from .network import BinSpec, DepthNet, NetworkConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = ["BinSpec", "CameraIntrinsics", "DepthMap", "DepthNet", "GravityFrame", "LaserScan",
           "NetworkConfig", "Pose", "Ray", "ReferenceDepthMap", "TrainConfig"]
