"""Procedural stand-in dogs: proportion-varied skeletons with tube meshes.

Every dog built here shares the template's joint list and mesh topology, so
a corpus of them can feed the PCA shape model. Nothing here tries to look
like a real animal beyond plausible proportions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .skeleton import Skeleton, SkinnedMesh, load_skeleton

# part -> joints whose rest offsets it scales
PARTS = {
    "legs": ("_upper_arm", "_elbow", "_wrist", "_paw", "_toe", "_knee", "_ankle", "_foot"),
    "body": ("spine1", "spine2", "_shoulder", "_hip", "tail1"),
    "neck": ("neck1", "neck2", "neck3", "head"),
    "head": ("muzzle", "nose", "_ear", "_ear_tip"),
    "tail": ("tail2", "tail3", "tail4", "tail5", "tail6", "tail7", "tail_tip"),
}

BASE_RADIUS = {  # mm, by joint at the start of the segment
    "root": 95.0, "spine1": 105.0, "spine2": 85.0,
    "shoulder": 45.0, "upper_arm": 40.0, "elbow": 30.0, "wrist": 24.0, "paw": 20.0,
    "hip": 50.0, "knee": 35.0, "ankle": 25.0, "foot": 20.0,
    "neck1": 55.0, "neck2": 50.0, "neck3": 48.0, "head": 50.0, "muzzle": 32.0,
    "ear": 14.0, "tail": 16.0,
}


@dataclass(frozen=True)
class DogShape:
    size: float = 1.0
    legs: float = 1.0
    body: float = 1.0
    neck: float = 1.0
    head: float = 1.0
    tail: float = 1.0
    girth: float = 1.0

    @classmethod
    def random(cls, rng: np.random.Generator, spread: float = 0.15,
               residual: float = 0.03) -> "DogShape":
        """Overall size plus three breed factors (leggy/stocky, long/short
        head and neck, tail length); each part also gets a small independent
        residual."""
        size, leggy, snout, tail = rng.normal(0.0, 1.0, 4)
        e = rng.normal(0.0, residual, 6)
        s = spread
        return cls(size=float(np.exp(1.3 * s * size)),
                   legs=float(np.exp(0.8 * s * leggy + e[0])),
                   body=float(np.exp(-0.3 * s * leggy + e[1])),
                   neck=float(np.exp(0.5 * s * snout + e[2])),
                   head=float(np.exp(0.7 * s * snout + e[3])),
                   tail=float(np.exp(1.0 * s * tail + e[4])),
                   girth=float(np.exp(-0.6 * s * leggy + e[5])))


def _part_of(name: str):
    for part, keys in PARTS.items():
        if any(name == k or (k.startswith("_") and name.endswith(k)) for k in keys):
            return part
    return None


def _radius_key(name: str) -> str:
    if name.startswith("tail"):
        return "tail"
    base = name.split("_", 1)[1] if name[:3] in ("FL_", "FR_", "BL_", "BR_") else name
    if base.startswith("L_") or base.startswith("R_"):
        return "ear"
    return base


def shaped_skeleton(shape: DogShape, template: Skeleton = None, rng=None,
                    jitter: float = 0.0) -> Skeleton:
    """Scale template bones per body part; optional symmetric per-bone jitter."""
    template = template or load_skeleton()
    offsets = template.offsets.copy()
    for i, name in enumerate(template.names):
        part = _part_of(name)
        factor = shape.size * (getattr(shape, part) if part else 1.0)
        offsets[i] *= factor
    if rng is not None and jitter > 0:
        noise = np.exp(rng.normal(0.0, jitter, template.n_joints))
        noise = np.where(template.pairs < np.arange(template.n_joints),
                         noise[template.pairs], noise)       # keep pairs symmetric
        offsets *= noise[:, None]
    return template.with_offsets(offsets, name="surrogate_dog")


def tube_mesh(skeleton: Skeleton, radii=None, segments: int = 8, rings: int = 3) -> SkinnedMesh:
    """Open tube per bone, skinned to the bone's parent joint.

    The first ring of each tube is blended half-and-half with the
    grandparent joint so bends stay connected.
    """
    if radii is None:
        radii = np.array([BASE_RADIUS.get(_radius_key(n), 20.0) for n in skeleton.names])
    pos = skeleton.rest_positions
    verts, tris, sj, sw = [], [], [], []
    ang = 2 * np.pi * np.arange(segments) / segments
    for c in range(1, skeleton.n_joints):
        p = skeleton.parents[c]
        a, b = pos[p], pos[c]
        axis = b - a
        length = np.linalg.norm(axis)
        d = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        w = np.cross(d, u)
        r = radii[p]
        gp = skeleton.parents[p]
        for k in range(rings):
            t = k / (rings - 1)
            centre = a + t * axis
            # taper slightly toward the child
            rr = r * (1.0 - 0.25 * t)
            ring = centre + rr * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
            verts.append(ring)
            if k == 0 and gp >= 0:
                sj.append(np.tile([p, gp], (segments, 1)))
                sw.append(np.tile([0.5, 0.5], (segments, 1)))
            else:
                sj.append(np.tile([p, p], (segments, 1)))
                sw.append(np.tile([1.0, 0.0], (segments, 1)))
        base = (c - 1) * rings * segments
        for k in range(rings - 1):
            for s in range(segments):
                i0 = base + k * segments + s
                i1 = base + k * segments + (s + 1) % segments
                j0, j1 = i0 + segments, i1 + segments
                tris += [[i0, i1, j1], [i0, j1, j0]]
    return SkinnedMesh(np.concatenate(verts), np.array(tris), np.concatenate(sj),
                       np.concatenate(sw))


def dog_radii(skeleton: Skeleton, shape: DogShape) -> np.ndarray:
    return np.array([BASE_RADIUS.get(_radius_key(n), 20.0) for n in skeleton.names]) \
        * shape.size * shape.girth


@dataclass(frozen=True, eq=False)
class SurrogateDog:
    skeleton: Skeleton
    mesh: SkinnedMesh
    neutral_rotations: np.ndarray     # (J, 4) common pose -> standing pose
    shape: DogShape


def make_dog(shape: DogShape = DogShape(), rng=None, jitter: float = 0.01,
             segments: int = 8, rings: int = 3, template: Skeleton = None) -> SurrogateDog:
    template = template or load_skeleton()
    skel = shaped_skeleton(shape, template, rng, jitter)
    mesh = tube_mesh(skel, dog_radii(skel, shape), segments, rings)
    neutral = np.tile(quat.IDENTITY, (skel.n_joints, 1))
    if rng is not None:
        # head and tail carriage differ between dogs
        for name, scale in (("neck1", 0.15), ("head", 0.1), ("tail1", 0.3)):
            i = skel.index(name)
            neutral[i] = quat.from_axis_angle([1.0, 0.0, 0.0], rng.normal(0.0, scale))
    return SurrogateDog(skel, mesh, quat.canonicalize(neutral), shape)


def surrogate_corpus(n: int, seed: int = 0, spread: float = 0.15, **kw) -> list:
    rng = np.random.default_rng(seed)
    return [make_dog(DogShape.random(rng, spread), rng, **kw) for _ in range(n)]


def icosphere(radius: float = 1.0, subdivisions: int = 3):
    """Vertices and outward-wound triangles of a subdivided icosahedron."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return np.array(verts) * radius, np.array(faces)
