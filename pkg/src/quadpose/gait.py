"""Procedural quadruped gaits over the template skeleton.

Sinusoidal walk/trot cycles, used as a stand-in for captured motion. Joint
rotations respect each joint's DOF: hinges bend about the lateral x axis,
tail joints swing without twist.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import quat
from .skeleton import Pose, Skeleton

LEG_PHASE = {
    "walk": {"BL": 0.0, "FL": 0.25, "BR": 0.5, "FR": 0.75},
    "trot": {"BL": 0.0, "FR": 0.0, "BR": 0.5, "FL": 0.5},
}

_X, _Y, _Z = np.eye(3)


@dataclass(frozen=True)
class GaitStyle:
    kind: str = "walk"
    stride: float = 0.35          # rad, hip / upper-arm swing
    knee: float = 0.45            # rad, knee / elbow flex
    spine_bend: float = 0.06
    head_pitch: float = 0.10
    head_bob: float = 0.05
    tail_elevation: float = 0.35
    tail_wag: float = 0.30
    shoulder_slide: float = 12.0  # mm
    ear: float = 0.12
    stride_length: float = 700.0  # mm travelled per cycle

    @classmethod
    def random(cls, rng: np.random.Generator, kind: str = "walk") -> "GaitStyle":
        base = cls(kind=kind)
        jitter = lambda v: float(v * np.exp(rng.normal(0.0, 0.2)))
        return replace(base, stride=jitter(base.stride), knee=jitter(base.knee),
                       spine_bend=jitter(base.spine_bend), head_pitch=jitter(base.head_pitch),
                       tail_elevation=jitter(base.tail_elevation), tail_wag=jitter(base.tail_wag))


def dof_rotation(rot_dof: int, angles) -> np.ndarray:
    """Quaternion from up to three angles honouring a joint's rotational DOF."""
    a = np.zeros(3)
    a[:len(angles)] = angles
    if rot_dof == 0:
        return quat.IDENTITY.copy()
    if rot_dof == 1:
        return quat.from_axis_angle(_X, a[0])
    if rot_dof == 2:
        return quat.multiply(quat.from_axis_angle(_X, a[0]), quat.from_axis_angle(_Y, a[1]))
    return quat.from_matrix(quat.rotvec_to_matrix(a))


def ground_height(skeleton: Skeleton) -> float:
    """Root height that puts the rest pose's lowest joint on y = 0."""
    return float(-skeleton.rest_positions[:, 1].min())


def gait_pose(skeleton: Skeleton, phase: float, style: GaitStyle = GaitStyle(),
              heading: float = 0.0, position=(0.0, 0.0, 0.0), rng=None,
              jitter: float = 0.0) -> Pose:
    """Pose at ``phase`` (cycles, any real) of a gait."""
    two_pi = 2 * np.pi
    angles = {}
    legs = LEG_PHASE[style.kind]
    for leg, off in legs.items():
        ph = two_pi * (phase + off)
        swing = style.stride * np.sin(ph)
        lift = max(0.0, np.sin(ph + np.pi / 2))
        if leg[0] == "F":
            angles[f"{leg}_shoulder"] = (0.3 * swing, 0.0, 0.0)
            angles[f"{leg}_upper_arm"] = (swing, 0.0, 0.0)
            angles[f"{leg}_elbow"] = (-style.knee * lift,)
            angles[f"{leg}_wrist"] = (0.8 * style.knee * lift,)
            angles[f"{leg}_paw"] = (0.2 * swing, 0.0, 0.0)
        else:
            angles[f"{leg}_hip"] = (swing, 0.0, 0.0)
            angles[f"{leg}_knee"] = (style.knee * lift,)
            angles[f"{leg}_ankle"] = (-0.8 * style.knee * lift,)
            angles[f"{leg}_foot"] = (0.3 * swing, 0.0, 0.0)
    body = two_pi * phase
    angles["spine1"] = (0.02 * np.sin(2 * body), style.spine_bend * np.sin(body), 0.0)
    angles["spine2"] = (0.0, -style.spine_bend * np.sin(body), 0.02 * np.sin(body))
    angles["neck1"] = (-style.head_pitch + style.head_bob * np.sin(2 * body), 0.0, 0.0)
    angles["neck2"] = (0.5 * style.head_bob * np.sin(2 * body + 0.5), 0.0, 0.0)
    angles["neck3"] = (0.0, 0.05 * np.sin(body), 0.0)
    angles["head"] = (style.head_pitch, 0.0, 0.0)
    n_tail = sum(1 for n in skeleton.names if n.startswith("tail") and n != "tail_tip")
    for k in range(1, n_tail + 1):
        angles[f"tail{k}"] = (-style.tail_elevation / n_tail,
                              style.tail_wag / n_tail * np.sin(2 * body - 0.5 * k))
    for side, sgn in (("L", 1.0), ("R", -1.0)):
        angles[f"{side}_ear"] = (style.ear * np.sin(2 * body), 0.0, sgn * 0.1)

    rots = np.tile(quat.IDENTITY, (skeleton.n_joints, 1))
    for i, j in enumerate(skeleton.joints):
        a = np.array(angles.get(j.name, (0.0, 0.0, 0.0)), float)
        if rng is not None and jitter > 0 and i > 0:
            a = a + rng.normal(0.0, jitter, a.shape)
        if i > 0:
            rots[i] = dof_rotation(j.rot_dof, a)

    trans = np.zeros((len(skeleton.translating), 3))
    for k, i in enumerate(skeleton.translating):
        name = skeleton.names[i]
        if name.endswith("_shoulder"):
            ph = two_pi * (phase + legs[name[:2]])
            trans[k] = [0.0, 0.3 * style.shoulder_slide * np.cos(ph),
                        style.shoulder_slide * np.sin(ph)]
        else:
            trans[k] = [0.0, 2.0 * np.sin(2 * body), 0.0]

    bob = 8.0 * np.sin(2 * two_pi * phase)
    root_rot = quat.multiply(quat.from_axis_angle(_Y, heading),
                             quat.from_axis_angle(_X, 0.03 * np.sin(2 * body)))
    root_t = np.asarray(position, float) + np.array([0.0, bob, 0.0])
    return Pose(root_rot, root_t, rots, trans)


def gait_sequence(skeleton: Skeleton, n_frames: int, style: GaitStyle = GaitStyle(),
                  cycles: float = 2.0, phase0: float = 0.0, heading: float = 0.0,
                  start=(0.0, 0.0, 0.0), seed=None, jitter: float = 0.0,
                  locomote: bool = True) -> list:
    """Frames of a gait; the root walks along ``heading`` on the y = 0 ground."""
    rng = np.random.default_rng(seed) if seed is not None else None
    fwd = quat.rotate(quat.from_axis_angle(_Y, heading), _Z)
    base = np.asarray(start, float) + np.array([0.0, ground_height(skeleton), 0.0])
    poses = []
    for f in range(n_frames):
        phase = phase0 + cycles * f / max(n_frames, 1)
        travel = style.stride_length * (phase - phase0) if locomote else 0.0
        poses.append(gait_pose(skeleton, phase, style, heading, base + travel * fwd,
                               rng, jitter))
    return poses
