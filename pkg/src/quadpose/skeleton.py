"""Kinematic skeleton, poses, forward kinematics and linear blend skinning.

Conventions: millimetres, scalar-last quaternions, joints topologically
sorted (depth-first from the root, root = 0). Body frame axes are x = the
animal's left, y = up, z = forward, so the sagittal plane is x = 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import quat

GROUPS = ("head", "body", "tail", "ear")


class SkeletonError(ValueError):
    """Raised for malformed skeletons or poses that do not fit a skeleton."""

    def __init__(self, message, joint=None):
        super().__init__(message if joint is None else f"{message} (joint {joint!r})")
        self.joint = joint


@dataclass(frozen=True)
class JointDef:
    name: str
    parent: Optional[int]
    rest_offset: tuple
    rot_dof: int = 3
    translates: bool = False
    symmetric_pair: Optional[int] = None
    group: str = "body"

    @property
    def dof(self) -> int:
        return self.rot_dof + (3 if self.translates else 0)


@dataclass(frozen=True)
class Skeleton:
    joints: tuple
    name: str = "skeleton"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if not self.joints:
            raise SkeletonError("skeleton has no joints")
        roots = [j.name for j in self.joints if j.parent is None]
        if len(roots) != 1 or self.joints[0].parent is not None:
            raise SkeletonError("exactly one root, at index 0, is required")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not 0 <= j.parent < i:
                raise SkeletonError("parent index must precede the joint", j.name)
            if j.group not in GROUPS:
                raise SkeletonError(f"unknown group {j.group!r}", j.name)
            p = j.symmetric_pair
            if p is not None and (not 0 <= p < len(self.joints)
                                  or self.joints[p].symmetric_pair != i):
                raise SkeletonError("symmetric_pair must be an involution", j.name)

    # -- cached array views -------------------------------------------------
    @cached_property
    def n_joints(self) -> int:
        return len(self.joints)

    @cached_property
    def names(self) -> list:
        return [j.name for j in self.joints]

    @cached_property
    def parents(self) -> np.ndarray:
        return np.array([-1 if j.parent is None else j.parent for j in self.joints])

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.array([j.rest_offset for j in self.joints], dtype=float)

    @cached_property
    def pairs(self) -> np.ndarray:
        """Index of the symmetric partner, or the joint itself when unpaired."""
        return np.array([i if j.symmetric_pair is None else j.symmetric_pair
                         for i, j in enumerate(self.joints)])

    @cached_property
    def translating(self) -> list:
        """Non-root joints carrying translation DOF, in joint order."""
        return [i for i, j in enumerate(self.joints) if j.translates and j.parent is not None]

    @cached_property
    def total_dof(self) -> int:
        return sum(j.dof for j in self.joints)

    @cached_property
    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for i in range(1, self.n_joints):
            pos[i] = pos[self.parents[i]] + self.offsets[i]
        return pos

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SkeletonError("no such joint", name) from None

    def group_indices(self, group: str) -> list:
        return [i for i, j in enumerate(self.joints) if j.group == group]

    def children(self, i: int) -> list:
        return [k for k, j in enumerate(self.joints) if j.parent == i]

    def with_offsets(self, offsets, name=None) -> "Skeleton":
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != (self.n_joints, 3):
            raise SkeletonError(f"expected offsets of shape {(self.n_joints, 3)}, got {offsets.shape}")
        joints = [JointDef(j.name, j.parent, tuple(float(v) for v in o), j.rot_dof,
                           j.translates, j.symmetric_pair, j.group)
                  for j, o in zip(self.joints, offsets)]
        return Skeleton(tuple(joints), name or self.name)

    def height(self) -> float:
        """Vertical extent of the rest skeleton."""
        y = self.rest_positions[:, 1]
        return float(y.max() - y.min())

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        names = self.names
        return {
            "name": self.name,
            "units": "mm",
            "joints": [{
                "name": j.name,
                "parent": None if j.parent is None else names[j.parent],
                "rest_offset": [float(v) for v in j.rest_offset],
                "rot_dof": j.rot_dof,
                "translates": j.translates,
                "pair": None if j.symmetric_pair is None else names[j.symmetric_pair],
                "group": j.group,
            } for j in self.joints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        names = [j["name"] for j in d["joints"]]
        lookup = {n: i for i, n in enumerate(names)}

        def ref(v, who):
            if v is None:
                return None
            if v not in lookup:
                raise SkeletonError(f"unknown joint reference {v!r}", who)
            return lookup[v]

        joints = [JointDef(
            name=j["name"],
            parent=ref(j.get("parent"), j["name"]),
            rest_offset=tuple(float(v) for v in j["rest_offset"]),
            rot_dof=int(j.get("rot_dof", 3)),
            translates=bool(j.get("translates", False)),
            symmetric_pair=ref(j.get("pair"), j["name"]),
            group=j.get("group", "body"),
        ) for j in d["joints"]]
        return cls(tuple(joints), d.get("name", "skeleton"))


def load_skeleton(path=None) -> Skeleton:
    """Load a skeleton JSON file; the canonical 43-joint dog when ``path`` is None."""
    if path is None:
        text = resources.files("quadpose.data").joinpath("dog_skeleton.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return Skeleton.from_dict(json.loads(text))


def save_skeleton(skeleton: Skeleton, path) -> None:
    with open(path, "w") as fh:
        json.dump(skeleton.to_dict(), fh, indent=1)


def static_joint_weights(skeleton: Skeleton) -> np.ndarray:
    """Per-joint static fitting weights looked up by joint name (missing names get 1)."""
    table = json.loads(resources.files("quadpose.data")
                       .joinpath("joint_weights.json").read_text())["weights"]
    return np.array([float(table.get(n, 1.0)) for n in skeleton.names])


# ---------------------------------------------------------------------------
# Pose


@dataclass(frozen=True, eq=False)
class Pose:
    """Root transform, per-joint local rotations and per-translating-joint offsets.

    ``joint_rotations`` has one row per joint; row 0 is the root's local
    rotation applied after ``root_rotation``. ``joint_translations`` has one
    row per entry of ``Skeleton.translating`` and is relative to the rest offset.
    """
    root_rotation: np.ndarray
    root_translation: np.ndarray
    joint_rotations: np.ndarray
    joint_translations: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        object.__setattr__(self, "root_rotation", quat.canonicalize(self.root_rotation))
        object.__setattr__(self, "root_translation",
                           np.asarray(self.root_translation, dtype=float).reshape(3))
        object.__setattr__(self, "joint_rotations", quat.canonicalize(
            np.asarray(self.joint_rotations, dtype=float).reshape(-1, 4)))
        object.__setattr__(self, "joint_translations",
                           np.asarray(self.joint_translations, dtype=float).reshape(-1, 3))

    @classmethod
    def identity(cls, skeleton: Skeleton, root_translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat.IDENTITY, root_translation,
                   np.tile(quat.IDENTITY, (skeleton.n_joints, 1)),
                   np.zeros((len(skeleton.translating), 3)))

    def replace(self, **changes) -> "Pose":
        fields = dict(root_rotation=self.root_rotation, root_translation=self.root_translation,
                      joint_rotations=self.joint_rotations,
                      joint_translations=self.joint_translations)
        fields.update(changes)
        return Pose(**fields)

    def validate(self, skeleton: Skeleton) -> None:
        if self.joint_rotations.shape[0] != skeleton.n_joints:
            missing = skeleton.names[min(self.joint_rotations.shape[0], skeleton.n_joints - 1)]
            raise SkeletonError(
                f"pose has {self.joint_rotations.shape[0]} joint rotations, skeleton "
                f"has {skeleton.n_joints}", missing)
        if self.joint_translations.shape[0] != len(skeleton.translating):
            k = min(self.joint_translations.shape[0], len(skeleton.translating) - 1)
            raise SkeletonError(
                f"pose has {self.joint_translations.shape[0]} joint translations, skeleton "
                f"has {len(skeleton.translating)} translating joints",
                skeleton.names[skeleton.translating[max(k, 0)]] if skeleton.translating else None)

    def to_dict(self) -> dict:
        return {
            "root_rotation": self.root_rotation.tolist(),
            "root_translation": self.root_translation.tolist(),
            "joint_rotations": self.joint_rotations.tolist(),
            "joint_translations": self.joint_translations.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["root_rotation"]), np.array(d["root_translation"]),
                   np.array(d["joint_rotations"]),
                   np.array(d.get("joint_translations", [])).reshape(-1, 3))

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        return all(np.allclose(a, b, atol=atol) for a, b in (
            (self.root_rotation, other.root_rotation),
            (self.root_translation, other.root_translation),
            (self.joint_rotations, other.joint_rotations),
            (self.joint_translations, other.joint_translations)))


def save_poses_jsonl(poses: Sequence[Pose], path) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(json.dumps(p.to_dict()) + "\n")


def load_poses_jsonl(path) -> list:
    with open(path) as fh:
        return [Pose.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Forward kinematics


def fk_arrays(parents, offsets, root_rot, root_trans, local_rot, translations):
    """Batched forward kinematics on raw arrays.

    :param parents: (J,) parent indices, root first
    :param offsets: (J, 3) rest offsets
    :param root_rot: (..., 3, 3) root rotation
    :param root_trans: (..., 3) root position
    :param local_rot: (..., J, 3, 3) local joint rotations
    :param translations: (..., J, 3) per-joint translations added to the rest offsets
    :return: world rotations (..., J, 3, 3) and positions (..., J, 3)
    """
    n = len(parents)
    batch = local_rot.shape[:-3]
    world_r = np.empty(batch + (n, 3, 3))
    world_p = np.empty(batch + (n, 3))
    world_r[..., 0, :, :] = root_rot @ local_rot[..., 0, :, :]
    world_p[..., 0, :] = root_trans
    bone = offsets + translations
    for i in range(1, n):
        p = parents[i]
        world_r[..., i, :, :] = world_r[..., p, :, :] @ local_rot[..., i, :, :]
        world_p[..., i, :] = world_p[..., p, :] + np.einsum(
            "...ij,...j->...i", world_r[..., p, :, :], bone[..., i, :])
    return world_r, world_p


def translation_array(skeleton: Skeleton, joint_translations) -> np.ndarray:
    """Scatter per-translating-joint offsets into a dense (..., J, 3) array."""
    jt = np.asarray(joint_translations, dtype=float)
    out = np.zeros(jt.shape[:-2] + (skeleton.n_joints, 3))
    if skeleton.translating:
        out[..., skeleton.translating, :] = jt
    return out


def forward_kinematics(skeleton: Skeleton, pose: Pose):
    """World transforms (J, 4, 4) and joint positions (J, 3) for a pose."""
    pose.validate(skeleton)
    rots, pos = fk_arrays(skeleton.parents, skeleton.offsets,
                          quat.to_matrix(pose.root_rotation), pose.root_translation,
                          quat.to_matrix(pose.joint_rotations),
                          translation_array(skeleton, pose.joint_translations))
    transforms = np.zeros((skeleton.n_joints, 4, 4))
    transforms[:, :3, :3] = rots
    transforms[:, :3, 3] = pos
    transforms[:, 3, 3] = 1.0
    return transforms, pos


def bone_lengths(skeleton: Skeleton, joints) -> np.ndarray:
    """Length of each bone (joint i to its parent) for i = 1..J-1.

    Accepts (..., J, 3) positions and returns (..., J-1).
    """
    joints = np.asarray(joints, dtype=float)
    return np.linalg.norm(joints[..., 1:, :] - joints[..., skeleton.parents[1:], :], axis=-1)


def rest_bone_lengths(skeleton: Skeleton) -> np.ndarray:
    return np.linalg.norm(skeleton.offsets[1:], axis=-1)


# ---------------------------------------------------------------------------
# Mirroring


def mirror_quaternions(q):
    """Reflect rotations across the x = 0 plane: (x, y, z, w) -> (x, -y, -z, w)."""
    q = np.array(q, dtype=float)
    q[..., 1:3] *= -1.0
    return q


def mirror_pose(skeleton: Skeleton, pose: Pose) -> Pose:
    """Reflect a pose across the sagittal plane, swapping left/right joints.

    The reflection is taken in the root's parent frame, so joint positions
    of the result are the x-reflected positions of the partner joints,
    provided the rest skeleton is itself symmetric.
    """
    pose.validate(skeleton)
    pairs = skeleton.pairs
    for i in range(skeleton.n_joints):
        if pairs[i] == i and abs(skeleton.offsets[i][0]) > 1e-9:
            raise SkeletonError("off-plane joint has no symmetric pair", skeleton.names[i])
    rots = mirror_quaternions(pose.joint_rotations)[pairs]
    trans = translation_array(skeleton, pose.joint_translations)
    trans = trans[pairs] * np.array([-1.0, 1.0, 1.0])
    root_t = pose.root_translation * np.array([-1.0, 1.0, 1.0])
    return Pose(mirror_quaternions(pose.root_rotation), root_t, rots,
                trans[skeleton.translating])


# ---------------------------------------------------------------------------
# Skinned mesh


@dataclass(frozen=True, eq=False)
class SkinnedMesh:
    """Rest-pose mesh with per-vertex skinning weights.

    Skin weights are stored padded: ``skin_joints`` and ``skin_weights`` are
    both (N, K); unused slots carry weight 0.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    skin_joints: np.ndarray
    skin_weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        sj = np.asarray(self.skin_joints, dtype=np.int64).reshape(len(v), -1)
        sw = np.asarray(self.skin_weights, dtype=float).reshape(len(v), -1)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise SkeletonError("triangle index out of range")
        if (sw < 0).any():
            raise SkeletonError("negative skin weight")
        if not np.allclose(sw.sum(axis=1), 1.0, atol=1e-5):
            raise SkeletonError("skin weights must sum to 1 per vertex")
        for name, val in (("vertices", v), ("triangles", t), ("skin_joints", sj),
                          ("skin_weights", sw)):
            object.__setattr__(self, name, val)

    def with_vertices(self, vertices) -> "SkinnedMesh":
        return SkinnedMesh(vertices, self.triangles, self.skin_joints, self.skin_weights)

    def weight_matrix(self, n_joints: int) -> np.ndarray:
        w = np.zeros((len(self.vertices), n_joints))
        np.add.at(w, (np.repeat(np.arange(len(self.vertices)), self.skin_joints.shape[1]),
                      self.skin_joints.ravel()), self.skin_weights.ravel())
        return w


def skin_mesh(mesh: SkinnedMesh, skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Linear blend skinning of the rest mesh into ``pose``; returns (N, 3)."""
    if mesh.skin_joints.size and mesh.skin_joints.max() >= skeleton.n_joints:
        raise SkeletonError("skin weight references a joint outside the skeleton")
    transforms, pos = forward_kinematics(skeleton, pose)
    rest = skeleton.rest_positions
    rots = transforms[:, :3, :3]
    r = rots[mesh.skin_joints]                      # (N, K, 3, 3)
    local = mesh.vertices[:, None, :] - rest[mesh.skin_joints]
    moved = np.einsum("nkij,nkj->nki", r, local) + pos[mesh.skin_joints]
    return np.einsum("nk,nki->ni", mesh.skin_weights, moved)
