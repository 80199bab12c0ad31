"""Pinhole camera, projection and depth-image geometry.

Camera space looks down +z with x to the right and y down the image.
No lens distortion. Depth rasters are millimetres with 0 meaning no return.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import quat

MAX_DEPTH_MM = 8000.0


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "cam"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("principal point must lie inside the image")
        object.__setattr__(self, "rotation", quat.canonicalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(3))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def R(self) -> np.ndarray:
        """World-to-camera rotation matrix."""
        return quat.to_matrix(self.rotation)

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.R.T + self.translation

    def camera_to_world(self, points) -> np.ndarray:
        return (np.asarray(points, float) - self.translation) @ self.R

    def to_dict(self) -> dict:
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsic": {"rotation_xyzw": self.rotation.tolist(),
                              "translation_mm": self.translation.tolist()},
                "convention": "world->camera; camera looks down +z, x right, y down"}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        ext = d.get("extrinsic", {})
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.array(ext.get("rotation_xyzw", quat.IDENTITY)),
                   np.array(ext.get("translation_mm", [0.0, 0.0, 0.0])),
                   d.get("name", "cam"))


def look_at(eye, target, up=(0.0, 1.0, 0.0), **intrinsics) -> CameraModel:
    """Camera at ``eye`` (world, y up) looking at ``target``."""
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return CameraModel(rotation=quat.from_matrix(r), translation=-r @ eye, **intrinsics)


def kinect_v2(**kw) -> dict:
    """Intrinsics resembling the Kinect v2 depth sensor (512x424)."""
    d = dict(fx=365.0, fy=365.0, cx=256.0, cy=212.0, width=512, height=424)
    d.update(kw)
    return d


def project(camera: CameraModel, points):
    """Project camera-space points (K, 3) to pixels (K, 2).

    Returns ``(pixels, valid)``; rows with z <= 0 are NaN and flagged invalid.
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    valid = z > 0
    zs = np.where(valid, z, np.nan)
    uv = np.stack([camera.fx * p[..., 0] / zs + camera.cx,
                   camera.fy * p[..., 1] / zs + camera.cy], axis=-1)
    return uv, valid


def backproject(camera: CameraModel, pixel, depth):
    """Inverse of :func:`project` for pixel(s) at given camera-space depth(s)."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise CameraError("depth must be positive")
    x = (pixel[..., 0] - camera.cx) * depth / camera.fx
    y = (pixel[..., 1] - camera.cy) * depth / camera.fy
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


@dataclass(frozen=True, eq=False)
class DepthImage:
    raster: np.ndarray
    camera: CameraModel

    def __post_init__(self):
        r = np.asarray(self.raster, dtype=float)
        if r.shape != (self.camera.height, self.camera.width):
            raise CameraError(f"raster shape {r.shape} does not match camera "
                              f"{(self.camera.height, self.camera.width)}")
        if np.any((r < 0) | (r > MAX_DEPTH_MM)):
            raise CameraError("depth values must lie in [0, 8000] mm")
        object.__setattr__(self, "raster", r)

    @property
    def mask(self) -> np.ndarray:
        return self.raster > 0


def depth_to_pointcloud(image: DepthImage, mask=None):
    """Back-project masked valid pixels to camera space.

    :return: points (P, 3) in mm and their source pixels (P, 2) as (u, v)
    """
    valid = image.raster > 0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != image.raster.shape:
            raise CameraError("mask shape does not match depth raster")
        valid &= mask
    v, u = np.nonzero(valid)
    if len(u) == 0:
        return np.zeros((0, 3)), np.zeros((0, 2), dtype=int)
    pix = np.stack([u, v], axis=-1)
    return backproject(image.camera, pix.astype(float), image.raster[v, u]), pix


def save_camera(camera: CameraModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(camera.to_dict(), fh, indent=1)


def load_camera(path) -> CameraModel:
    with open(path) as fh:
        return CameraModel.from_dict(json.load(fh))
