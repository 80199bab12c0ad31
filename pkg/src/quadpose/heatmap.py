"""Network-input normalization and tri-planar joint heatmaps.

Each joint owns three 64x64 planes, in the fixed order xy, yz, xz, at plane
indices ``3 * j + k``. A plane for axes (a, b) is stored image-like: rows index
the second axis, columns the first (``plane[b, a]``). All coordinates handled
here use the pixel-centre-at-integer convention.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import MAX_DEPTH_MM, CameraModel, DepthImage, backproject, project
from .skeleton import Skeleton

INPUT_SIZE = 256
PADDED_SIZE = 293
HEATMAP_SIZE = 64
ROOT_RANGE_MM = MAX_DEPTH_MM
OFFSET_RANGE_MM = 2000.0
PLANE_AXES = ((0, 1), (1, 2), (0, 2))
PLANE_NAMES = ("xy", "yz", "xz")
HEATMAP_MAGIC = b"QPHM"


class HeatmapError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Image crop


@dataclass(frozen=True)
class CropTransform:
    """Affine map full-image pixel -> 256x256 network pixel: ``out = scale * p + translation``."""
    scale: float
    translation: tuple
    pad: dict

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) * self.scale + np.asarray(self.translation)

    def invert(self, points) -> np.ndarray:
        return (np.asarray(points, float) - np.asarray(self.translation)) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation), "pad": self.pad}

    @classmethod
    def from_dict(cls, d: dict) -> "CropTransform":
        return cls(float(d["scale"]), tuple(float(v) for v in d["translation"]), dict(d["pad"]))


def crop_transform_for_bbox(c0: int, r0: int, c1: int, r1: int) -> CropTransform:
    """Compose the crop -> square pad -> 256 -> pad 293 -> 256 resampling chain.

    ``(c0, r0)``-``(c1, r1)`` is the inclusive pixel bounding box.
    """
    w, h = c1 - c0 + 1, r1 - r0 + 1
    side = max(w, h)
    pad_left, pad_top = (side - w) // 2, (side - h) // 2
    inner = (PADDED_SIZE - INPUT_SIZE) // 2
    k1 = INPUT_SIZE / side
    k2 = INPUT_SIZE / PADDED_SIZE
    # pixel edges scale, centres sit half a pixel in
    tx = ((0.5 - (c0 - pad_left)) * k1 + inner) * k2 - 0.5
    ty = ((0.5 - (r0 - pad_top)) * k1 + inner) * k2 - 0.5
    pad = {"bbox": [int(c0), int(r0), int(c1), int(r1)], "side": int(side),
           "pad_left": int(pad_left), "pad_right": int(side - w - pad_left),
           "pad_top": int(pad_top), "pad_bottom": int(side - h - pad_top),
           "inner_pad": [inner, PADDED_SIZE - INPUT_SIZE - inner]}
    return CropTransform(k1 * k2, (tx, ty), pad)


def mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise HeatmapError("mask is empty")
    return cols[0], rows[0], cols[-1], rows[-1]


def crop_for_network(depth: DepthImage, mask):
    """Masked, square-padded 256x256 greyscale input and its CropTransform.

    Valid depths are rescaled linearly to [0, 1] over their own range;
    background is 0.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.raster.shape:
        raise HeatmapError("mask shape does not match depth raster")
    crop = crop_transform_for_bbox(*mask_bbox(mask))
    masked = np.where(mask, depth.raster, 0.0)
    grid = np.mgrid[0:INPUT_SIZE, 0:INPUT_SIZE].astype(float)
    src = crop.invert(np.stack([grid[1], grid[0]], axis=-1))
    out = ndimage.map_coordinates(masked, [src[..., 1], src[..., 0]], order=0, cval=0.0)
    valid = out > 0
    if valid.any():
        lo, hi = out[valid].min(), out[valid].max()
        out = np.where(valid, (out - lo) / (hi - lo) if hi > lo else 1.0, 0.0)
    return out, crop


# ---------------------------------------------------------------------------
# Depth normalization


def normalize_depth(z, root_index: int = 0) -> np.ndarray:
    """Camera-space joint depths (mm) -> codes in [0, 255].

    The root is coded absolutely over 0-8 m, the others as offsets from the
    root clamped to +-2 m.
    """
    z = np.asarray(z, dtype=float)
    root = z[..., root_index:root_index + 1]
    out = np.clip((z - root) / OFFSET_RANGE_MM, -1.0, 1.0) * (255 / 2) + 255 / 2
    out[..., root_index] = np.minimum(z[..., root_index], ROOT_RANGE_MM) / ROOT_RANGE_MM * 255
    return out


def denormalize_depth(zn, root_index: int = 0) -> np.ndarray:
    zn = np.asarray(zn, dtype=float)
    root = zn[..., root_index:root_index + 1] / 255 * ROOT_RANGE_MM
    out = root + (zn - 255 / 2) / (255 / 2) * OFFSET_RANGE_MM
    out[..., root_index] = root[..., 0]
    return out


@dataclass(frozen=True, eq=False)
class NormalizedJoints:
    """Joints in network space: x, y in 256-pixel units, z as a depth code."""
    j3d256: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "j3d256", np.asarray(self.j3d256, dtype=float).reshape(-1, 3))

    def in_range(self) -> bool:
        return bool(np.all((self.j3d256 >= 0) & (self.j3d256 <= 255)))

    def to_dict(self) -> dict:
        return {"j3d256": self.j3d256.tolist(), "root_index": self.root_index}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizedJoints":
        return cls(np.array(d["j3d256"]), int(d.get("root_index", 0)))


def normalize_joints(j3dcam, camera: CameraModel, crop: CropTransform,
                     root_index: int = 0) -> NormalizedJoints:
    uv, valid = project(camera, j3dcam)
    if not valid.all():
        raise HeatmapError("joint behind the camera")
    xy = crop.apply(uv)
    z = normalize_depth(np.asarray(j3dcam)[:, 2], root_index)
    return NormalizedJoints(np.column_stack([xy, z]), root_index)


def denormalize_joints(j3d256, camera: CameraModel, crop: CropTransform, root_index: int = 0):
    """Invert network-space joints to full-image pixels and camera-space mm."""
    j3d256 = np.asarray(j3d256, float)
    full = crop.invert(j3d256[:, :2])
    z = denormalize_depth(j3d256[:, 2], root_index)
    return full, backproject(camera, full, z)


# ---------------------------------------------------------------------------
# Heatmaps


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float32)
        if p.ndim != 3 or p.shape[0] % 3 or p.shape[1:] != (HEATMAP_SIZE, HEATMAP_SIZE):
            raise HeatmapError(f"bad heatmap stack shape {p.shape}")
        if (p < 0).any():
            raise HeatmapError("heatmap scores must be non-negative")
        object.__setattr__(self, "planes", p)

    @property
    def n_joints(self) -> int:
        return self.planes.shape[0] // 3

    @property
    def joint_plane_index(self) -> np.ndarray:
        return np.arange(self.planes.shape[0]).reshape(-1, 3)

    def joint_planes(self, j: int) -> np.ndarray:
        return self.planes[3 * j:3 * j + 3]


def to_grid(j3d256) -> np.ndarray:
    """Zero-based 64-grid cell index, i.e. ``floor(j / 4) + 1`` minus one."""
    g = np.floor(np.asarray(j3d256, float) / 4.0).astype(int)
    return np.clip(g, 0, HEATMAP_SIZE - 1)


def from_grid(g) -> np.ndarray:
    """Cell (possibly offset) back to 256-space at the cell centre."""
    return np.asarray(g, float) * 4.0 + 2.0


def _gaussians(centres, sigma):
    """(N, 2) centres as (a, b) -> (N, 64, 64) planes indexed [b, a]."""
    ax = np.arange(HEATMAP_SIZE, dtype=np.float32)
    ga = np.exp(-(ax[None, :] - centres[:, 0:1]) ** 2 / (2 * sigma ** 2))
    gb = np.exp(-(ax[None, :] - centres[:, 1:2]) ** 2 / (2 * sigma ** 2))
    return gb[:, :, None] * ga[:, None, :]


def encode_heatmaps(normalized: NormalizedJoints, skeleton: Skeleton,
                    sigma: float = 1.0) -> HeatmapStack:
    """Render unit Gaussians at each joint's xy, yz and xz grid coordinates.

    Symmetric pairs share a bimodal plane (both joints' Gaussians summed,
    peak-normalized to 1).
    """
    j = normalized.j3d256
    if j.shape[0] != skeleton.n_joints:
        raise HeatmapError("joint count does not match skeleton")
    if not normalized.in_range():
        raise HeatmapError("normalized joints must lie in [0, 255]")
    g = to_grid(j).astype(np.float32)
    centres = g[:, np.array(PLANE_AXES)].reshape(-1, 2)   # (J * 3, 2) as (a, b)
    single = _gaussians(centres, sigma).reshape(-1, 3, HEATMAP_SIZE, HEATMAP_SIZE)
    pairs = skeleton.pairs
    paired = np.flatnonzero(pairs != np.arange(len(pairs)))
    planes = single.copy()
    if len(paired):
        both = single[paired] + single[pairs[paired]]
        planes[paired] = both / both.max(axis=(2, 3), keepdims=True)
    return HeatmapStack(planes.reshape(-1, HEATMAP_SIZE, HEATMAP_SIZE))


def write_heatmaps(stack: HeatmapStack, path) -> None:
    """16-byte header (magic, joints, plane size, planes per joint) + LE float32 planes."""
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC + struct.pack("<III", stack.n_joints, HEATMAP_SIZE, 3))
        fh.write(stack.planes.astype("<f4").tobytes())


def read_heatmaps(path) -> HeatmapStack:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != HEATMAP_MAGIC:
            raise HeatmapError("not a heatmap file")
        n, size, per = struct.unpack("<III", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if size != HEATMAP_SIZE or per != 3 or data.size != n * 3 * size * size:
        raise HeatmapError("heatmap file header does not match payload")
    return HeatmapStack(data.reshape(n * 3, size, size))


# ---------------------------------------------------------------------------
# Decoding


def find_modes(planes, radius: int = 2, floor: float = 1e-3):
    """Local maxima per plane after greedy non-maximum suppression.

    :return: list (one per plane) of ``(value, a, b)`` sorted by value, high first
    """
    planes = np.asarray(planes, dtype=float)
    n, size, _ = planes.shape
    k, bs, as_ = np.nonzero(planes > floor)
    d = np.arange(-radius, radius + 1)
    db, da = (v.ravel() for v in np.meshgrid(d, d, indexing="ij"))
    # clipping re-reads in-window border pixels, which leaves the max unchanged
    window = planes[k[:, None], np.clip(bs[:, None] + db, 0, size - 1),
                    np.clip(as_[:, None] + da, 0, size - 1)]
    vals = planes[k, bs, as_]
    is_peak = vals >= window.max(axis=1)
    k, bs, as_, vals = k[is_peak], bs[is_peak], as_[is_peak], vals[is_peak]
    out = [[] for _ in range(n)]
    for i in np.lexsort((-vals, k)):
        kept = out[k[i]]
        if all(max(abs(as_[i] - a), abs(bs[i] - b)) > radius for _, a, b in kept):
            kept.append((float(vals[i]), int(as_[i]), int(bs[i])))
    return out


def quarter_offset(plane, a: int, b: int):
    """+-0.25 cell towards the larger 4-neighbour along each plane axis."""
    n = plane.shape[0]
    da = db = 0.0
    if 0 < a < n - 1:
        da = 0.25 * np.sign(plane[b, a + 1] - plane[b, a - 1])
    if 0 < b < n - 1:
        db = 0.25 * np.sign(plane[b + 1, a] - plane[b - 1, a])
    return float(da), float(db)


def _candidate(planes, modes):
    """Joint location in grid units: the strongest plane gives two
    coordinates, the next strongest the third."""
    values = [m[0][0] if m else 0.0 for m in modes]
    best = int(np.argmax(values))
    if values[best] <= 0:
        return None
    out = np.full(3, np.nan)
    _, a, b = modes[best][0]
    da, db = quarter_offset(planes[best], a, b)
    ax0, ax1 = PLANE_AXES[best]
    out[ax0], out[ax1] = a + da, b + db
    missing = 3 - ax0 - ax1
    others = [k for k in range(3) if k != best and modes[k]]
    if not others:
        return None
    second = max(others, key=lambda k: (values[k], -k))
    axes2 = PLANE_AXES[second]
    _, a2, b2 = modes[second][0]
    da2, db2 = quarter_offset(planes[second], a2, b2)
    out[missing] = (a2 + da2) if axes2[0] == missing else (b2 + db2)
    return out, values[best]


def _plane_points(plane, modes, limit: int = 2):
    out = []
    for v, a, b in modes[:limit]:
        da, db = quarter_offset(plane, a, b)
        out.append((v, np.array([a + da, b + db])))
    return out


def _pair_candidates(planes, modes, collision: float):
    """Both locations of a left/right pair from its shared bimodal planes.

    Each plane's two modes are split between the two joints so that the
    coordinates every two planes share agree best; a plane showing a single
    mode (the joints coincide in that view) serves both. Each coordinate is
    the mean of its two plane estimates.
    """
    pts = [_plane_points(planes[p], modes[p]) for p in range(3)]
    for p in pts:
        if len(p) == 2 and np.abs(p[0][1] - p[1][1]).max() <= collision:
            del p[1]
    live = [p for p in range(3) if pts[p]]
    if len(live) < 2:
        return []
    split = [p for p in live if len(pts[p]) == 2]
    best = None
    # the first two-mode plane fixes which joint is "first"
    for flips in np.ndindex(*([2] * max(len(split) - 1, 0))):
        order = {p: 0 for p in live}
        for p, f in zip(split[1:], flips):
            order[p] = f
        cost, cands = 0.0, []
        for which in (0, 1):
            est = [[] for _ in range(3)]
            score = 0.0
            for p in live:
                m = order[p] ^ which if len(pts[p]) == 2 else 0
                v, xy = pts[p][m]
                for ax, val in zip(PLANE_AXES[p], xy):
                    est[ax].append(val)
                score = max(score, v)
            cost += sum((e[0] - e[1]) ** 2 for e in est if len(e) == 2)
            cands.append((np.array([sum(e) / len(e) if e else np.nan for e in est]), score))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, cands)
    return best[1]


@dataclass(frozen=True, eq=False)
class DecodedJoints:
    j3d256: np.ndarray        # (J, 3) network space
    confidence: np.ndarray    # (J,) peak score, 0 when unpredicted
    predicted: np.ndarray     # (J,) bool
    j2d_full: np.ndarray = None
    j3d_cam: np.ndarray = None


def _chain_consistent(grid, conf, skeleton: Skeleton) -> None:
    """Swap pair identities so each joint stays nearest its own parent.

    Paired planes are identical, so which mode belongs to the left joint is
    not observable; below a paired parent we pick the assignment with the
    shorter total parent-child distance. Top-level pairs keep rank order.
    """
    pairs, parents = skeleton.pairs, skeleton.parents
    for j in range(1, skeleton.n_joints):
        k = pairs[j]
        pj, pk = parents[j], parents[k]
        if k <= j or pairs[pj] != pk or pj == pk:
            continue
        rows = grid[[j, k, pj, pk]]
        if not np.isfinite(rows).all():
            continue
        keep = np.linalg.norm(rows[0] - rows[2]) + np.linalg.norm(rows[1] - rows[3])
        swap = np.linalg.norm(rows[1] - rows[2]) + np.linalg.norm(rows[0] - rows[3])
        if swap < keep:
            grid[[j, k]] = grid[[k, j]]
            conf[[j, k]] = conf[[k, j]]


def decode_to_network(stack: HeatmapStack, skeleton: Skeleton,
                      collision_px: float = 2.0, nms_radius: int = 2, chain: bool = True):
    """Recover network-space joints (256 units) and confidences from a stack."""
    if stack.n_joints != skeleton.n_joints:
        raise HeatmapError("heatmap stack does not match skeleton")
    planes = stack.planes.astype(float)
    all_modes = find_modes(planes, nms_radius)
    n = skeleton.n_joints
    grid = np.full((n, 3), np.nan)
    conf = np.zeros(n)
    pairs = skeleton.pairs
    for j in range(n):
        modes = all_modes[3 * j:3 * j + 3]
        jp = planes[3 * j:3 * j + 3]
        if pairs[j] == j:
            c = _candidate(jp, modes)
            if c is not None:
                grid[j], conf[j] = c
        elif pairs[j] > j:
            k = pairs[j]
            cands = _pair_candidates(jp, modes, collision_px)
            for idx, (loc, c) in zip((j, k), cands):
                grid[idx], conf[idx] = loc, c
    if chain:
        _chain_consistent(grid, conf, skeleton)
    predicted = np.isfinite(grid).all(axis=1)
    conf[~predicted] = 0.0
    return from_grid(grid), conf, predicted


def decode_heatmaps(stack: HeatmapStack, skeleton: Skeleton, crop: CropTransform,
                    camera: CameraModel, collision_px: float = 2.0,
                    nms_radius: int = 2, root_index: int = 0,
                    chain: bool = True) -> DecodedJoints:
    """Heatmaps -> full-image 2D joints, camera-space 3D joints and confidences.

    Unpredicted joints carry NaN coordinates and confidence 0; if the root is
    unpredicted no depth can be recovered and every 3D joint is NaN.
    """
    j256, conf, predicted = decode_to_network(stack, skeleton, collision_px, nms_radius, chain)
    full = crop.invert(j256[:, :2])
    j3d = np.full_like(j256, np.nan)
    if predicted[root_index]:
        z = denormalize_depth(np.where(predicted, j256[:, 2], 255 / 2), root_index)
        ok = predicted & (z > 0)
        j3d[ok] = backproject(camera, full[ok], z[ok])
    return DecodedJoints(j256, conf, predicted, full, j3d)
