"""Hierarchical GPLVM over body-part blocks of the pose vector.

Leaves generate joint rotations (and shoulder translations) for seven body
parts; a legs node generates the four leg latents and the root node
generates tail, legs, spine and head latents. Ears and end-effector joints
are not modelled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import quat
from ..io import read_archive, write_archive
from ..skeleton import Pose, Skeleton, fk_arrays, mirror_pose, translation_array
from .gplvm import GplvmNode, train_node

log = logging.getLogger(__name__)

LEAF_PARTS = (
    ("tail", ("tail1", "tail2", "tail3", "tail4", "tail5", "tail6", "tail7")),
    ("BL", ("BL_hip", "BL_knee", "BL_ankle", "BL_foot")),
    ("FL", ("FL_shoulder", "FL_upper_arm", "FL_elbow", "FL_wrist", "FL_paw")),
    ("BR", ("BR_hip", "BR_knee", "BR_ankle", "BR_foot")),
    ("FR", ("FR_shoulder", "FR_upper_arm", "FR_elbow", "FR_wrist", "FR_paw")),
    ("spine", ("spine1", "spine2")),
    ("head", ("neck1", "neck2", "neck3", "head", "muzzle")),
)
LEG_LEAVES = ("BL", "FL", "BR", "FR")
ROOT_CHILDREN = ("tail", "legs", "spine", "head")
DEFAULT_DIMS = {"root": 3, "legs": 3, "leaf": 2}


@dataclass(frozen=True)
class PoseLayout:
    """Column layout of the flattened pose vector.

    Per leaf, joints in order; each joint contributes a quaternion (x, y, z, w)
    followed, for translating joints, by its 3-vector offset from rest.
    """
    joint_names: tuple
    blocks: dict           # leaf -> (start, end)
    quat_cols: dict        # joint index -> column of its quaternion
    trans_cols: dict       # joint index -> column of its translation

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton) -> "PoseLayout":
        blocks, qc, tc, col = {}, {}, {}, 0
        translating = set(skeleton.translating)
        for leaf, names in LEAF_PARTS:
            start = col
            for n in names:
                j = skeleton.index(n)
                qc[j] = col
                col += 4
                if j in translating:
                    tc[j] = col
                    col += 3
            blocks[leaf] = (start, col)
        return cls(tuple(skeleton.names), blocks, qc, tc)

    @property
    def dim(self) -> int:
        return max(e for _, e in self.blocks.values())

    @property
    def rotation_joints(self) -> list:
        return sorted(self.quat_cols)

    def from_pose(self, pose: Pose, skeleton: Skeleton) -> np.ndarray:
        v = np.zeros(self.dim)
        rots = quat.canonicalize(pose.joint_rotations)
        trans = translation_array(skeleton, pose.joint_translations)
        for j, c in self.quat_cols.items():
            v[c:c + 4] = rots[j]
        for j, c in self.trans_cols.items():
            v[c:c + 3] = trans[j]
        return v

    def quaternions(self, vectors) -> np.ndarray:
        """(..., R, 4) unit quaternions of the modelled joints, renormalized."""
        v = np.asarray(vectors, float)
        cols = np.array([self.quat_cols[j] for j in self.rotation_joints])
        q = v[..., cols[:, None] + np.arange(4)]
        return q / np.linalg.norm(q, axis=-1, keepdims=True)

    def to_local_rotations(self, vectors, n_joints: int) -> np.ndarray:
        """(..., J, 3, 3) local rotation matrices; unmodelled joints identity."""
        v = np.asarray(vectors, float)
        out = np.broadcast_to(np.eye(3), v.shape[:-1] + (n_joints, 3, 3)).copy()
        out[..., self.rotation_joints, :, :] = quat.to_matrix(self.quaternions(v))
        return out

    def translations(self, vectors, n_joints: int) -> np.ndarray:
        v = np.asarray(vectors, float)
        out = np.zeros(v.shape[:-1] + (n_joints, 3))
        for j, c in self.trans_cols.items():
            out[..., j, :] = v[..., c:c + 3]
        return out

    def to_pose(self, vector, skeleton: Skeleton, root_rotation=quat.IDENTITY,
                root_translation=(0.0, 0.0, 0.0)) -> Pose:
        rots = np.tile(quat.IDENTITY, (skeleton.n_joints, 1))
        rots[self.rotation_joints] = self.quaternions(vector)
        trans = self.translations(vector, skeleton.n_joints)[skeleton.translating]
        return Pose(root_rotation, root_translation, rots, trans)


def pose_dissimilarity(qa, qb) -> np.ndarray:
    """Summed per-bone ``1 - |qa . qb|``; broadcasts over leading axes."""
    return np.sum(1.0 - np.abs(np.sum(qa * qb, axis=-1)), axis=-1)


def dedup_poses(poses, skeleton: Skeleton, threshold: float = 0.1, mirror: bool = True,
                layout: PoseLayout = None):
    """Greedy training-set selection over a pose sequence.

    A frame joins the set when its dissimilarity to every pose already in
    the set exceeds ``threshold``. Mirrors of the kept poses are appended.

    :return: (kept poses, kept frame indices)
    """
    if len(poses) == 0:
        raise ValueError("no poses to deduplicate")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    layout = layout or PoseLayout.for_skeleton(skeleton)
    q = layout.quaternions(np.stack([layout.from_pose(p, skeleton) for p in poses]))
    kept = [0]
    for i in range(1, len(poses)):
        if pose_dissimilarity(q[i], q[kept]).min() > threshold:
            kept.append(i)
    out = [poses[i] for i in kept]
    if mirror:
        out += [mirror_pose(skeleton, poses[i]) for i in kept]
    return out, kept


@dataclass(eq=False)
class LatentTree:
    skeleton: Skeleton
    layout: PoseLayout
    nodes: dict                       # name -> GplvmNode
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))

    @property
    def n_frames(self) -> int:
        return self.nodes["root"].n_frames

    def leaf_latents(self) -> dict:
        return {name: self.nodes[name].X for name, _ in LEAF_PARTS}

    def children_of_root(self, x_root) -> dict:
        """Latents of the root's children (and through the legs node, the leg leaves)."""
        out = self.nodes["root"].predict(x_root)
        coords, col = {}, 0
        for name in ROOT_CHILDREN:
            q = self.nodes[name].q
            coords[name] = out[..., col:col + q]
            col += q
        legs = self.nodes["legs"].predict(coords.pop("legs"))
        col = 0
        for name in LEG_LEAVES:
            q = self.nodes[name].q
            coords[name] = legs[..., col:col + q]
            col += q
        return coords

    def leaf_vectors(self, coords: dict) -> np.ndarray:
        """Pose vectors (..., d) generated by the leaves at ``coords``."""
        first = next(iter(coords.values()))
        v = np.zeros(np.shape(first)[:-1] + (self.layout.dim,))
        for name, _ in LEAF_PARTS:
            s, e = self.layout.blocks[name]
            v[..., s:e] = self.nodes[name].predict(coords[name])
        return v

    def root_vectors(self, x_root) -> np.ndarray:
        return self.leaf_vectors(self.children_of_root(x_root))

    def save(self, path) -> None:
        arrays, meta_nodes = {}, {}
        for name, node in self.nodes.items():
            arrays.update(node.arrays(name))
            meta_nodes[name] = node.meta()
        meta = {"kind": "latent_tree", "skeleton": self.skeleton.to_dict(),
                "dims": self.dims, "nodes": meta_nodes}
        write_archive(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "LatentTree":
        meta, arrays = read_archive(path)
        if meta.get("kind") != "latent_tree":
            raise ValueError(f"{path} does not hold a latent tree")
        skel = Skeleton.from_dict(meta["skeleton"])
        nodes = {n: GplvmNode.from_parts(m, arrays, n) for n, m in meta["nodes"].items()}
        return cls(skel, PoseLayout.for_skeleton(skel), nodes, meta["dims"])


def train_tree(poses, skeleton: Skeleton, dims: dict = None, maxiter: int = 500) -> LatentTree:
    """Train leaves on pose-vector blocks, then the legs and root nodes on latents."""
    dims = dict(DEFAULT_DIMS, **(dims or {}))
    layout = PoseLayout.for_skeleton(skeleton)
    Y = np.stack([layout.from_pose(p, skeleton) for p in poses])
    if len(Y) < 2:
        raise ValueError("need at least two training poses")
    nodes = {}
    for name, _ in LEAF_PARTS:
        s, e = layout.blocks[name]
        nodes[name] = train_node(Y[:, s:e], dims.get(name, dims["leaf"]), maxiter)
        log.info("event=train_leaf node=%s frames=%d cols=%d", name, len(Y), e - s)
    nodes["legs"] = train_node(np.hstack([nodes[n].X for n in LEG_LEAVES]), dims["legs"], maxiter)
    nodes["root"] = train_node(np.hstack([nodes[n].X for n in ("tail", "legs", "spine", "head")]),
                               dims["root"], maxiter)
    return LatentTree(skeleton, layout, nodes, dims)


def decode_vectors(tree: LatentTree, vectors, skeleton: Skeleton = None, root_rot=None,
                   root_trans=None, shoulder_t=None) -> np.ndarray:
    """Batched FK of pose vectors (..., d) -> joints (..., J, 3).

    ``root_rot`` is (..., 3, 3); ``shoulder_t`` (..., T, 3) replaces the
    modelled translations of the translating joints when given.
    """
    skel = skeleton or tree.skeleton
    v = np.asarray(vectors, float)
    batch = v.shape[:-1]
    local = tree.layout.to_local_rotations(v, skel.n_joints)
    trans = tree.layout.translations(v, skel.n_joints)
    if shoulder_t is not None:
        idx = sorted(tree.layout.trans_cols)
        trans[..., idx, :] = shoulder_t
    R = np.broadcast_to(np.eye(3), batch + (3, 3)) if root_rot is None else root_rot
    T = np.zeros(batch + (3,)) if root_trans is None else root_trans
    return fk_arrays(skel.parents, skel.offsets, R, T, local, trans)[1]


def decode_pose(tree: LatentTree, coords: dict, root_rotation=quat.IDENTITY,
                root_translation=(0.0, 0.0, 0.0), shoulder_translations=None,
                skeleton: Skeleton = None):
    """Leaf coords (or ``{"root": x}``) -> (Pose, joints)."""
    skel = skeleton or tree.skeleton
    if "root" in coords:
        coords = tree.children_of_root(np.asarray(coords["root"], float))
    vec = tree.leaf_vectors({k: np.asarray(v, float) for k, v in coords.items()})
    if shoulder_translations is not None:
        for j, t in zip(sorted(tree.layout.trans_cols), np.asarray(shoulder_translations)):
            c = tree.layout.trans_cols[j]
            vec[c:c + 3] = t
    pose = tree.layout.to_pose(vec, skel, root_rotation, root_translation)
    joints = decode_vectors(tree, vec, skel, quat.to_matrix(pose.root_rotation),
                            pose.root_translation)
    return pose, joints
