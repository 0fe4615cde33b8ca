"""Endoscope-style visibility cropping.

A camera pose is drawn on a sphere around the cloud (spherical coordinates
constrained to configured polar/azimuth windows).  Points are visible when
the angle between their outward normal and the direction to the camera is
below a cutoff; among the visible candidates, the fixed fraction of the
cloud closest to the camera is retained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CropError, DataError
from .geometry import PointCloud


@dataclass
class CropConfig:
    keep_fraction: float = 0.05
    max_angle: float = 80.0
    polar_range: tuple = (10.0, 60.0)
    azimuth_range: tuple = (-70.0, 70.0)
    radius_scale: float = 2.5

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if not 0.0 < self.max_angle < 90.0:
            raise ConfigError(f"max_angle must be in (0, 90) degrees, got {self.max_angle}")
        self.polar_range = (float(self.polar_range[0]), float(self.polar_range[1]))
        self.azimuth_range = (float(self.azimuth_range[0]), float(self.azimuth_range[1]))
        for name, (lo, hi) in (("polar_range", self.polar_range),
                               ("azimuth_range", self.azimuth_range)):
            if hi < lo:
                raise ConfigError(f"{name} is empty: [{lo}, {hi}]")
        if self.radius_scale <= 0:
            raise ConfigError("radius_scale must be > 0")


@dataclass
class CameraPose:
    position: np.ndarray
    look_at: np.ndarray
    polar: float
    azimuth: float
    radius: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise DataError("camera radius must be > 0")
        expect = self.look_at + spherical_offset(self.polar, self.azimuth, self.radius)
        if not np.allclose(self.position, expect, atol=1e-9 * max(self.radius, 1.0)):
            raise DataError("camera position inconsistent with its spherical coordinates")


def spherical_offset(polar_deg: float, azimuth_deg: float, radius: float) -> np.ndarray:
    """Offset from the look-at point; polar measured from +z, azimuth from +x."""
    p = math.radians(polar_deg)
    a = math.radians(azimuth_deg)
    return radius * np.array(
        [math.sin(p) * math.cos(a), math.sin(p) * math.sin(a), math.cos(p)]
    )


def sample_camera(rng: np.random.Generator, cloud: PointCloud,
                  config: CropConfig) -> CameraPose:
    """Draw a camera pose; rng draws polar then azimuth, uniform in range."""
    look_at = cloud.points.mean(axis=0)
    bounding = float(np.linalg.norm(cloud.points - look_at, axis=1).max())
    if bounding == 0.0:
        raise DataError("cloud is a single point; no bounding sphere")
    radius = config.radius_scale * bounding
    polar = float(rng.uniform(config.polar_range[0], config.polar_range[1]))
    azimuth = float(rng.uniform(config.azimuth_range[0], config.azimuth_range[1]))
    position = look_at + spherical_offset(polar, azimuth, radius)
    return CameraPose(position, look_at, polar, azimuth, radius)


def facing_candidates(cloud: PointCloud, camera: CameraPose,
                      config: CropConfig) -> np.ndarray:
    """Indices whose normal-to-camera angle is below max_angle (ascending)."""
    if cloud.normals is None:
        raise DataError("visibility test needs per-point normals")
    to_cam = camera.position - cloud.points
    dist = np.linalg.norm(to_cam, axis=1)
    dist_safe = np.maximum(dist, 1e-300)
    cos_angle = np.einsum("ij,ij->i", cloud.normals, to_cam) / dist_safe
    return np.flatnonzero(cos_angle > math.cos(math.radians(config.max_angle)))


def visible_crop(cloud: PointCloud, camera: CameraPose,
                 config: CropConfig) -> np.ndarray:
    """Indices (ascending) of the retained visible points.

    Candidates face the camera: angle(normal, point->camera) < max_angle.
    Of those, the ceil(keep_fraction * M) nearest the camera are kept
    (ties broken by lower index); fewer candidates than that means all of
    them are kept and the caller may flag the sample.
    """
    candidates = facing_candidates(cloud, camera, config)
    if len(candidates) == 0:
        raise CropError("no points face the camera; resample the pose")
    target = math.ceil(config.keep_fraction * len(cloud))
    if len(candidates) <= target:
        return candidates
    dist = np.linalg.norm(camera.position - cloud.points[candidates], axis=1)
    order = np.lexsort((candidates, dist))
    return np.sort(candidates[order[:target]])
