"""PCA shape model over mesh vertices, bone lengths and neutral rotations.

Each exemplar is flattened to ``[vertices (3N), bone lengths (J-1),
neutral quaternions (4J)]``. Blocks are centred per column and divided by
one scalar per block (their RMS spread), so no block dominates purely
through its units, and the result is decomposed with an SVD.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .io import read_archive, write_archive
from .skeleton import Skeleton, SkinnedMesh, rest_bone_lengths

BLOCKS = ("vertices", "bones", "rotations")
MIN_CLOUD_POINTS = 100


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ShapeModel:
    mean: np.ndarray            # (D,)
    components: np.ndarray      # (K, D) orthonormal rows, by decreasing variance
    variances: np.ndarray       # (K,)
    block_scale: dict           # block -> scalar divisor
    slices: dict                # block -> (start, end)
    template: Skeleton          # joint hierarchy; rest offsets give bone directions
    directions: np.ndarray      # (J, 3) mean unit offset directions
    triangles: np.ndarray
    skin_joints: np.ndarray
    skin_weights: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.variances)

    def scale_vector(self) -> np.ndarray:
        s = np.empty(len(self.mean))
        for b, (lo, hi) in self.slices.items():
            s[lo:hi] = self.block_scale[b]
        return s

    def reconstruct(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, float)
        return self.mean + self.scale_vector() * (c @ self.components[:len(c)])

    def project(self, vector) -> np.ndarray:
        return ((np.asarray(vector, float) - self.mean) / self.scale_vector()) @ self.components.T

    def split(self, vector) -> dict:
        return {b: vector[lo:hi] for b, (lo, hi) in self.slices.items()}

    def save(self, path) -> None:
        meta = {"kind": "shape_model", "block_scale": self.block_scale,
                "slices": {b: list(v) for b, v in self.slices.items()},
                "skeleton": self.template.to_dict()}
        write_archive(path, meta, {"mean": self.mean, "components": self.components,
                                   "variances": self.variances, "directions": self.directions,
                                   "triangles": self.triangles, "skin_joints": self.skin_joints,
                                   "skin_weights": self.skin_weights})

    @classmethod
    def load(cls, path) -> "ShapeModel":
        meta, a = read_archive(path)
        if meta.get("kind") != "shape_model":
            raise ShapeError(f"{path} does not hold a shape model")
        return cls(a["mean"], a["components"], a["variances"], meta["block_scale"],
                   {b: tuple(v) for b, v in meta["slices"].items()},
                   Skeleton.from_dict(meta["skeleton"]), a["directions"],
                   a["triangles"].astype(np.int64), a["skin_joints"].astype(np.int64),
                   a["skin_weights"])


def shape_vector(mesh: SkinnedMesh, skeleton: Skeleton, neutral_rotations) -> np.ndarray:
    q = quat.canonicalize(np.asarray(neutral_rotations, float).reshape(skeleton.n_joints, 4))
    return np.concatenate([mesh.vertices.ravel(), rest_bone_lengths(skeleton), q.ravel()])


def build_shape_model(corpus, tol: float = 1e-10) -> ShapeModel:
    """PCA over a corpus of ``(mesh, skeleton, neutral_rotations)`` triples."""
    corpus = list(corpus)
    if len(corpus) < 2:
        raise ShapeError("need at least two exemplars")
    mesh0, skel0, _ = corpus[0]
    for mesh, skel, _ in corpus[1:]:
        if mesh.vertices.shape != mesh0.vertices.shape or not np.array_equal(
                mesh.triangles, mesh0.triangles):
            raise ShapeError("meshes do not share topology")
        if skel.n_joints != skel0.n_joints:
            raise ShapeError("skeletons differ in joint count")
    data = np.stack([shape_vector(*item) for item in corpus])
    nv, nb = mesh0.vertices.size, skel0.n_joints - 1
    slices = {"vertices": (0, nv), "bones": (nv, nv + nb), "rotations": (nv + nb, data.shape[1])}
    mean = data.mean(axis=0)
    centred = data - mean
    scale = {}
    for b, (lo, hi) in slices.items():
        rms = float(np.sqrt(np.mean(centred[:, lo:hi] ** 2)))
        scale[b] = rms if rms > 1e-12 else 1.0
        centred[:, lo:hi] /= scale[b]
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    keep = s > tol * max(s[0], 1e-300)
    offs = np.stack([sk.offsets for _, sk, _ in corpus])
    norms = np.linalg.norm(offs, axis=-1, keepdims=True)
    dirs = np.divide(offs, norms, out=np.zeros_like(offs), where=norms > 0).mean(axis=0)
    dn = np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = np.divide(dirs, dn, out=np.zeros_like(dirs), where=dn > 0)
    return ShapeModel(mean, vt[keep], s[keep] ** 2 / (len(corpus) - 1), scale, slices, skel0,
                      dirs, mesh0.triangles, mesh0.skin_joints, mesh0.skin_weights)


@dataclass(frozen=True, eq=False)
class ShapePrediction:
    mesh: SkinnedMesh
    skeleton: Skeleton
    neutral_rotations: np.ndarray
    coefficients: np.ndarray
    bone_lengths: np.ndarray


def decode_shape(model: ShapeModel, coeffs) -> ShapePrediction:
    parts = model.split(model.reconstruct(coeffs))
    lengths = np.maximum(parts["bones"], 1e-6)
    offsets = np.zeros((model.template.n_joints, 3))
    offsets[1:] = model.directions[1:] * lengths[:, None]
    skel = model.template.with_offsets(offsets, name="predicted")
    mesh = SkinnedMesh(parts["vertices"].reshape(-1, 3), model.triangles, model.skin_joints,
                       model.skin_weights)
    q = parts["rotations"].reshape(-1, 4)
    q = quat.canonicalize(q / np.linalg.norm(q, axis=-1, keepdims=True))
    return ShapePrediction(mesh, skel, q, np.asarray(coeffs, float), lengths)


def predict_shape(model: ShapeModel, target_bone_lengths, n_components: int = 4) -> ShapePrediction:
    """Least-squares fit of the leading components to measured bone lengths."""
    t = np.asarray(target_bone_lengths, float)
    if not np.any(t):
        raise ShapeError("target bone lengths are all zero")
    if n_components > model.rank:
        raise ShapeError(f"{n_components} components requested, model rank is {model.rank}")
    lo, hi = model.slices["bones"]
    s = model.block_scale["bones"]
    B = model.components[:n_components, lo:hi].T          # (J-1, k)
    coeffs = np.linalg.lstsq(B, (t - model.mean[lo:hi]) / s, rcond=None)[0]
    return decode_shape(model, coeffs)


def estimate_scale(points, model_mesh, axis: int = 1, lo: float = 10.0, hi: float = 90.0) -> float:
    """Ratio of the cloud's robust extent along ``axis`` to the mesh's.

    Both inputs must share the axis convention (world space, y up, by default).
    """
    p = np.asarray(points, float)
    if len(p) < MIN_CLOUD_POINTS:
        raise ShapeError(f"{len(p)} points; at least {MIN_CLOUD_POINTS} needed")
    v = model_mesh.vertices if isinstance(model_mesh, SkinnedMesh) else np.asarray(model_mesh)
    ext_p = np.diff(np.percentile(p[:, axis], [lo, hi]))[0]
    ext_m = np.diff(np.percentile(v[:, axis], [lo, hi]))[0]
    if ext_m <= 0:
        raise ShapeError("model mesh has no extent along the height axis")
    return float(ext_p / ext_m)
