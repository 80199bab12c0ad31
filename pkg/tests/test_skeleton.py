import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from quadpose import quat
from quadpose.skeleton import (JointDef, Pose, Skeleton, SkeletonError, SkinnedMesh, bone_lengths,
                               forward_kinematics, load_poses_jsonl, load_skeleton, mirror_pose,
                               rest_bone_lengths, save_poses_jsonl, save_skeleton, skin_mesh,
                               static_joint_weights)


def chain3():
    return Skeleton((JointDef("a", None, (0, 0, 0)), JointDef("b", 0, (0, 100, 0)),
                     JointDef("c", 1, (0, 100, 0))))


def test_template_shape(skel):
    assert skel.n_joints == 43
    assert skel.names[0] == skel.names[skel.parents.argmin()]
    assert len(skel.translating) == 4
    assert np.array_equal(skel.pairs[skel.pairs], np.arange(43))


def test_identity_pose_is_cumulative_offsets(skel):
    _, pos = forward_kinematics(skel, Pose.identity(skel))
    expected = np.zeros((43, 3))
    for i in range(1, 43):
        expected[i] = expected[skel.parents[i]] + skel.offsets[i]
    assert np.allclose(pos, expected)


def test_root_translation_shifts_everything(skel):
    p = random_pose(skel, np.random.default_rng(0))
    _, a = forward_kinematics(skel, p)
    _, b = forward_kinematics(skel, p.replace(root_translation=p.root_translation + [100, 0, 0]))
    assert np.allclose(b - a, [100, 0, 0], atol=1e-9)


def test_chain_against_matrix_oracle():
    s = chain3()
    rz = quat.from_axis_angle([0, 0, 1], np.pi / 2)
    rots = np.stack([quat.IDENTITY, rz, quat.IDENTITY])
    _, pos = forward_kinematics(s, Pose(quat.IDENTITY, np.zeros(3), rots))
    # homogeneous matrix chain: T0 * T1(offset, Rz) * T2(offset)
    def h(R, t):
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = R, t
        return m
    Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    end = h(np.eye(3), [0, 0, 0]) @ h(Rz, [0, 100, 0]) @ h(np.eye(3), [0, 100, 0])
    assert np.allclose(pos[2], end[:3, 3])
    assert np.allclose(pos[2], [-100, 100, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_fk_preserves_bone_lengths(seed):
    s = load_skeleton()
    p = random_pose(s, np.random.default_rng(seed)).replace(
        joint_translations=np.zeros((4, 3)))
    _, pos = forward_kinematics(s, p)
    L0 = rest_bone_lengths(s)
    assert np.allclose(bone_lengths(s, pos), L0, rtol=1e-6, atol=0)


def test_translated_bone_length(skel):
    rng = np.random.default_rng(1)
    p = random_pose(skel, rng)
    _, pos = forward_kinematics(skel, p)
    L = bone_lengths(skel, pos)
    for k, j in enumerate(skel.translating):
        assert np.isclose(L[j - 1], np.linalg.norm(skel.offsets[j] + p.joint_translations[k]))


def test_noisy_joints_change_lengths(skel):
    _, pos = forward_kinematics(skel, Pose.identity(skel))
    noisy = pos + np.random.default_rng(0).normal(0, 10, pos.shape)
    d = bone_lengths(skel, noisy) - rest_bone_lengths(skel)
    assert np.abs(d).max() > 1.0


def test_pose_serialization_bit_identical(tmp_path, skel):
    poses = [random_pose(skel, np.random.default_rng(i)) for i in range(5)]
    save_poses_jsonl(poses, tmp_path / "p.jsonl")
    back = load_poses_jsonl(tmp_path / "p.jsonl")
    for a, b in zip(poses, back):
        assert np.array_equal(a.joint_rotations, b.joint_rotations)
        assert np.array_equal(a.root_rotation, b.root_rotation)
        assert np.array_equal(a.joint_translations, b.joint_translations)


def test_skeleton_round_trip(tmp_path, skel):
    save_skeleton(skel, tmp_path / "s.json")
    assert load_skeleton(tmp_path / "s.json") == skel


def test_malformed_skeletons():
    with pytest.raises(SkeletonError):
        Skeleton((JointDef("a", None, (0, 0, 0)), JointDef("b", None, (0, 1, 0))))
    with pytest.raises(SkeletonError):
        Skeleton((JointDef("a", None, (0, 0, 0)), JointDef("b", 0, (1, 0, 0), symmetric_pair=0)))


def test_pose_with_wrong_joint_count_names_joint(skel):
    p = Pose.identity(skel)
    bad = p.replace(joint_rotations=p.joint_rotations[:10])
    with pytest.raises(SkeletonError) as e:
        forward_kinematics(skel, bad)
    assert e.value.joint == skel.names[10]


def test_mirror_fixed_point_and_involution(skel):
    p = Pose.identity(skel)
    assert mirror_pose(skel, p).allclose(p)
    for i in range(10):
        q = random_pose(skel, np.random.default_rng(i))
        assert mirror_pose(skel, mirror_pose(skel, q)).allclose(q, atol=1e-12)


def test_mirror_reflects_fk(skel):
    rng = np.random.default_rng(3)
    p = Pose.identity(skel)
    rots = p.joint_rotations.copy()
    lf = skel.index("FL_shoulder") if "FL_shoulder" in skel.names else next(
        i for i, n in enumerate(skel.names) if n.startswith("FL"))
    rots[lf] = quat.from_axis_angle([1, 0, 0], -0.8)            # raise the left front leg
    p = p.replace(joint_rotations=rots, root_rotation=quat.from_axis_angle(rng.normal(size=3), 0.4))
    _, a = forward_kinematics(skel, p)
    _, b = forward_kinematics(skel, mirror_pose(skel, p))
    assert np.allclose(b, (a * [-1, 1, 1])[skel.pairs], atol=1e-9)
    assert not np.allclose(a, b)


def test_skin_identity_and_rigid_binding(skel):
    rest = skel.rest_positions
    v = rest[[5, 10, 20]] + [[1, 2, 3], [0, 5, 0], [4, 0, 1]]
    mesh = SkinnedMesh(v, np.array([[0, 1, 2]]), np.array([[5], [10], [20]]), np.ones((3, 1)))
    assert np.allclose(skin_mesh(mesh, skel, Pose.identity(skel)), v)
    p = random_pose(skel, np.random.default_rng(2))
    tr, _ = forward_kinematics(skel, p)
    out = skin_mesh(mesh, skel, p)
    for k, j in enumerate([5, 10, 20]):
        local = v[k] - rest[j]
        assert np.allclose(out[k], tr[j, :3, :3] @ local + tr[j, :3, 3])


def test_skin_half_half_blend(skel):
    rest = skel.rest_positions
    v = np.array([rest[7] + [3.0, 1.0, 2.0]])
    mesh = SkinnedMesh(v, np.zeros((0, 3), int), np.array([[7, 30]]), np.array([[0.5, 0.5]]))
    p = random_pose(skel, np.random.default_rng(4))
    tr, _ = forward_kinematics(skel, p)
    a = tr[7, :3, :3] @ (v[0] - rest[7]) + tr[7, :3, 3]
    b = tr[30, :3, :3] @ (v[0] - rest[30]) + tr[30, :3, 3]
    assert np.allclose(skin_mesh(mesh, skel, p)[0], (a + b) / 2)


def test_skin_weights_must_sum_to_one():
    with pytest.raises(SkeletonError):
        SkinnedMesh(np.zeros((1, 3)), np.zeros((0, 3), int), [[0]], [[0.5]])


def test_static_weights_named(skel):
    w = static_joint_weights(skel)
    assert w.shape == (43,) and (w >= 0).all() and w[0] > 0
