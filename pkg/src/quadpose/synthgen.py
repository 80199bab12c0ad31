"""Synthetic depth datasets from skinned meshes.

Rendering is a plain z-buffer over camera-space triangles with
perspective-correct depth; sensor noise is a simple Gaussian plus
quantization stand-in. Each frame is seen by every camera of a rig; samples
whose joints leave the image are skipped and logged, and mirrored copies
double what survives.

Dataset directory::

    manifest.json
    skeleton.json, mesh.obj, mesh.skin.json, poses.jsonl
    frames/<cam>/<frame>.pgm     16-bit depth in mm
    masks/<cam>/<frame>.pgm      8-bit, 255 = dog
    annot/<cam>/<frame>.json     crop, normalized joints, camera, gt joints
    heatmaps/<cam>/<frame>.qphm  heatmap stack (binary)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import io as qio
from .camera import MAX_DEPTH_MM, CameraModel, DepthImage, kinect_v2, look_at, project
from .heatmap import (CropTransform, HeatmapError, HeatmapStack, NormalizedJoints,
                      crop_for_network, crop_transform_for_bbox, encode_heatmaps, mask_bbox,
                      normalize_joints, read_heatmaps, write_heatmaps)
from .skeleton import (Pose, Skeleton, SkinnedMesh, forward_kinematics, load_poses_jsonl,
                       load_skeleton, save_poses_jsonl, save_skeleton, skin_mesh)

log = logging.getLogger(__name__)

NEAR_MM = 1.0


# ---------------------------------------------------------------------------
# Rendering


def rasterize_depth(vertices, triangles, camera: CameraModel, world: bool = True):
    """Z-buffer render of a triangle mesh to a depth image.

    :param vertices: (N, 3) mm, world space unless ``world`` is False
    :return: ``(DepthImage, mask)``; pixels with no surface, or surface past
        8 m, read 0. Triangles touching the near plane are dropped, not clipped.
    """
    v = np.asarray(vertices, float)
    if world:
        v = camera.world_to_camera(v)
    tri = np.asarray(triangles, np.int64).reshape(-1, 3)
    h, w = camera.height, camera.width
    zbuf = np.full(h * w, np.inf)

    z = v[tri, 2]                                          # (M, 3)
    tri = tri[(z > NEAR_MM).all(axis=1)]
    if len(tri):
        uv, _ = project(camera, v)
        p = uv[tri]                                        # (M, 3, 2)
        zt = v[tri, 2]
        lo = np.ceil(p.min(axis=1)).astype(np.int64)
        hi = np.floor(p.max(axis=1)).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [w - 1, h - 1])
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        keep = (hi >= lo).all(axis=1) & (np.abs(area) > 1e-12)
        p, zt, lo, hi, area = p[keep], zt[keep], lo[keep], hi[keep], area[keep]
        bw, bh = hi[:, 0] - lo[:, 0] + 1, hi[:, 1] - lo[:, 1] + 1
        counts = bw * bh
        # one row per (triangle, candidate pixel in its bbox)
        t = np.repeat(np.arange(len(counts)), counts)
        start = np.cumsum(counts) - counts
        k = np.arange(counts.sum()) - start[t]
        px = lo[t, 0] + k % bw[t]
        py = lo[t, 1] + k // bw[t]
        d = np.stack([px, py], axis=-1) - p[t, 0]
        b1 = (d[:, 0] * e2[keep][t, 1] - d[:, 1] * e2[keep][t, 0]) / area[t]
        b2 = (e1[keep][t, 0] * d[:, 1] - e1[keep][t, 1] * d[:, 0]) / area[t]
        b0 = 1.0 - b1 - b2
        eps = -1e-9
        inside = (b0 >= eps) & (b1 >= eps) & (b2 >= eps)
        t, px, py = t[inside], px[inside], py[inside]
        inv = (b0[inside] / zt[t, 0] + b1[inside] / zt[t, 1] + b2[inside] / zt[t, 2])
        np.minimum.at(zbuf, py * w + px, 1.0 / inv)

    zbuf = zbuf.reshape(h, w)
    raster = np.where(np.isfinite(zbuf) & (zbuf <= MAX_DEPTH_MM), zbuf, 0.0)
    return DepthImage(raster, camera), raster > 0


def apply_noise(image: DepthImage, sigma_mm: float = 0.0, quant_step_mm: float = 0.0,
                seed=None) -> DepthImage:
    """Additive Gaussian noise then quantization on valid pixels; zeros stay zero."""
    if sigma_mm < 0 or quant_step_mm < 0:
        raise ValueError("noise parameters must be non-negative")
    r = image.raster.copy()
    valid = r > 0
    if sigma_mm > 0:
        rng = np.random.default_rng(seed)
        r[valid] += rng.normal(0.0, sigma_mm, valid.sum())
    if quant_step_mm > 0:
        r[valid] = np.round(r[valid] / quant_step_mm) * quant_step_mm
    floor = quant_step_mm if quant_step_mm > 0 else 1e-3
    r[valid] = np.clip(r[valid], floor, MAX_DEPTH_MM)
    return DepthImage(r, image.camera)


@dataclass(frozen=True)
class Occlusion:
    col: int          # top-left corner
    row: int
    size: int

    def contains(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, float)
        return ((p[..., 0] >= self.col - 0.5) & (p[..., 0] < self.col + self.size - 0.5)
                & (p[..., 1] >= self.row - 0.5) & (p[..., 1] < self.row + self.size - 0.5))

    @property
    def centre(self) -> np.ndarray:
        return np.array([self.col, self.row]) + (self.size - 1) / 2.0


def occlude(image, square_px: int = 75, seed=None):
    """Zero a randomly placed square; accepts a DepthImage or a bare raster.

    Returns the occluded image (same type) and an :class:`Occlusion` record.
    """
    raster = image.raster if isinstance(image, DepthImage) else np.asarray(image)
    h, w = raster.shape
    if square_px > min(h, w) or square_px <= 0:
        raise ValueError(f"{square_px}px square does not fit a {w}x{h} frame")
    rng = np.random.default_rng(seed)
    col = int(rng.integers(0, w - square_px + 1))
    row = int(rng.integers(0, h - square_px + 1))
    out = raster.copy()
    out[row:row + square_px, col:col + square_px] = 0
    rec = Occlusion(col, row, square_px)
    if isinstance(image, DepthImage):
        return DepthImage(out, image.camera), rec
    return out, rec


def camera_rig(n: int, target, radius: float = 2500.0, height: float = 600.0,
               phase: float = 0.0, seed=None, **intrinsics) -> list:
    """``n`` cameras on a horizontal ring around ``target``, all looking at it."""
    rng = np.random.default_rng(seed)
    target = np.asarray(target, float)
    intr = kinect_v2(**intrinsics)
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        r = radius * (1.0 + (0.1 * rng.uniform(-1, 1) if seed is not None else 0.0))
        eye = target + np.array([r * np.sin(a), height, r * np.cos(a)])
        cams.append(look_at(eye, target, name=f"cam{i:02d}", **intr))
    return cams


def mirror_camera(camera: CameraModel) -> CameraModel:
    """Intrinsics of a horizontally flipped image (extrinsics kept)."""
    return CameraModel(camera.fx, camera.fy, camera.width - 1 - camera.cx, camera.cy,
                       camera.width, camera.height, camera.rotation, camera.translation,
                       camera.name + "_m")


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class NoiseConfig:
    sigma_mm: float = 0.0
    quant_step_mm: float = 0.0


@dataclass
class RenderJob:
    skeleton: Skeleton
    mesh: SkinnedMesh
    poses: list
    cameras: list
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    mirror: bool = True
    fixed_root: bool = False
    seed: int = 0
    out_dir: Path = None


@dataclass(eq=False)
class Sample:
    """One rendered (frame, camera) view with its ground truth."""
    frame: int
    camera_index: int
    camera: CameraModel
    depth: DepthImage
    mask: np.ndarray
    crop: CropTransform
    normalized: NormalizedJoints
    j3d_cam: np.ndarray
    j2d_full: np.ndarray
    skeleton: Skeleton
    mirrored: bool = False
    fixed_root: bool = False

    @property
    def key(self) -> str:
        return f"{self.frame:06d}" + ("m" if self.mirrored else "") + ("f" if self.fixed_root else "")

    @cached_property
    def network_input(self) -> np.ndarray:
        return crop_for_network(self.depth, self.mask)[0]

    @cached_property
    def heatmaps(self) -> HeatmapStack:
        return encode_heatmaps(self.normalized, self.skeleton)


def _annotate(skeleton, camera, depth, mask, j3d_cam, frame, cam_index, mirrored, fixed):
    """Crop and normalize; returns a Sample or the reason it is skipped."""
    if not mask.any():
        return "empty mask"
    uv, valid = project(camera, j3d_cam)
    if not valid.all():
        return "joint behind camera"
    inside = ((uv[:, 0] >= 0) & (uv[:, 0] <= camera.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height - 1))
    if not inside.all():
        return f"joint {skeleton.names[int(np.argmin(inside))]} outside image"
    if j3d_cam[0, 2] > MAX_DEPTH_MM:
        return "root beyond depth range"
    crop = crop_transform_for_bbox(*mask_bbox(mask))
    norm = normalize_joints(j3d_cam, camera, crop)
    if not norm.in_range():
        return "joint outside network crop"
    return Sample(frame, cam_index, camera, depth, mask, crop, norm, j3d_cam, uv,
                  skeleton, mirrored, fixed)


def _mirror_sample(s: Sample) -> Sample | str:
    cam = mirror_camera(s.camera)
    depth = DepthImage(s.depth.raster[:, ::-1], cam)
    j = s.j3d_cam[s.skeleton.pairs] * np.array([-1.0, 1.0, 1.0])
    return _annotate(s.skeleton, cam, depth, s.mask[:, ::-1].copy(), j, s.frame,
                     s.camera_index, True, s.fixed_root)


def build_dataset(job: RenderJob):
    """Render every (frame, camera) view of a job.

    :return: ``(samples, skipped)`` where ``skipped`` lists
        ``(frame, camera_index, reason)``. Mirrored samples follow the
        originals, in the same order.
    """
    skel = job.skeleton
    frames = list(enumerate(job.poses))
    if job.fixed_root and job.poses:
        ref = job.poses[0]
        frames += [(f, p.replace(root_rotation=ref.root_rotation,
                                 root_translation=ref.root_translation)) for f, p in frames]
    samples, skipped = [], []
    for n, (f, pose) in enumerate(frames):
        fixed = n >= len(job.poses)
        verts = skin_mesh(job.mesh, skel, pose)
        _, joints = forward_kinematics(skel, pose)
        for c, cam in enumerate(job.cameras):
            depth, mask = rasterize_depth(verts, job.mesh.triangles, cam)
            if job.noise.sigma_mm > 0 or job.noise.quant_step_mm > 0:
                ss = np.random.SeedSequence([job.seed, f, c, int(fixed)])
                depth = apply_noise(depth, job.noise.sigma_mm, job.noise.quant_step_mm,
                                    np.random.default_rng(ss))
                mask = mask & (depth.raster > 0)
            out = _annotate(skel, cam, depth, mask, cam.world_to_camera(joints), f, c,
                            False, fixed)
            if isinstance(out, str):
                log.info("event=skip frame=%d camera=%d reason=%r", f, c, out)
                skipped.append((f, c, out))
            else:
                samples.append(out)
    if job.mirror:
        mirrored = []
        for s in samples:
            m = _mirror_sample(s)
            if isinstance(m, str):      # cannot happen for a symmetric crop; kept defensive
                raise HeatmapError(f"mirrored sample invalid: {m}")
            mirrored.append(m)
        samples += mirrored
    for cam_index in range(len(job.cameras)):
        if not any(s.camera_index == cam_index for s in samples):
            log.warning("event=empty_camera camera=%d", cam_index)
    return samples, skipped


def write_dataset(out_dir, job: RenderJob, samples, skipped, heatmaps: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_skeleton(job.skeleton, out / "skeleton.json")
    qio.save_mesh(job.mesh, out / "mesh.obj", job.skeleton)
    save_poses_jsonl(job.poses, out / "poses.jsonl")
    entries = []
    for s in samples:
        cam = f"cam{s.camera_index:02d}"
        for sub in ("frames", "masks", "annot") + (("heatmaps",) if heatmaps else ()):
            (out / sub / cam).mkdir(parents=True, exist_ok=True)
        qio.write_pgm16(out / "frames" / cam / f"{s.key}.pgm", s.depth.raster)
        qio.write_pgm8(out / "masks" / cam / f"{s.key}.pgm", s.mask * 255)
        annot = {"frame": s.frame, "camera_index": s.camera_index, "camera": s.camera.to_dict(),
                 "mirrored": s.mirrored, "fixed_root": s.fixed_root,
                 "crop": s.crop.to_dict(), "normalized": s.normalized.to_dict(),
                 "j3d_cam": s.j3d_cam.tolist(), "j2d_full": s.j2d_full.tolist()}
        (out / "annot" / cam / f"{s.key}.json").write_text(json.dumps(annot))
        if heatmaps:
            write_heatmaps(s.heatmaps, out / "heatmaps" / cam / f"{s.key}.qphm")
        entries.append({"camera": cam, "key": s.key})
    manifest = {"skeleton": "skeleton.json", "mesh": "mesh.obj", "poses": "poses.jsonl",
                "cameras": [c.to_dict() for c in job.cameras], "n_frames": len(job.poses),
                "mirror": job.mirror, "fixed_root": job.fixed_root, "seed": job.seed,
                "noise": {"sigma_mm": job.noise.sigma_mm,
                          "quant_step_mm": job.noise.quant_step_mm},
                "samples": entries,
                "skipped": [{"frame": f, "camera_index": c, "reason": r} for f, c, r in skipped]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


@dataclass
class Dataset:
    root: Path
    manifest: dict
    skeleton: Skeleton
    mesh: SkinnedMesh
    poses: list
    samples: list


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    skel = load_skeleton(root / manifest["skeleton"])
    mesh = qio.load_mesh(root / manifest["mesh"])
    poses = load_poses_jsonl(root / manifest["poses"])
    samples = []
    for e in manifest["samples"]:
        cam, key = e["camera"], e["key"]
        a = json.loads((root / "annot" / cam / f"{key}.json").read_text())
        camera = CameraModel.from_dict(a["camera"])
        depth = DepthImage(qio.read_pgm(root / "frames" / cam / f"{key}.pgm").astype(float), camera)
        mask = qio.read_pgm(root / "masks" / cam / f"{key}.pgm") > 0
        s = Sample(a["frame"], a["camera_index"], camera, depth, mask,
                   CropTransform.from_dict(a["crop"]), NormalizedJoints.from_dict(a["normalized"]),
                   np.array(a["j3d_cam"]), np.array(a["j2d_full"]), skel, a["mirrored"],
                   a["fixed_root"])
        hm = root / "heatmaps" / cam / f"{key}.qphm"
        if hm.exists():
            s.__dict__["heatmaps"] = read_heatmaps(hm)
        samples.append(s)
    return Dataset(root, manifest, skel, mesh, poses, samples)

