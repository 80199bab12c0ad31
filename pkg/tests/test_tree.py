import numpy as np
import pytest

from quadpose import quat
from quadpose.prior.tree import (LEAF_PARTS, LatentTree, PoseLayout, decode_pose, dedup_poses,
                                 pose_dissimilarity, train_tree)
from quadpose.skeleton import Pose, forward_kinematics


def canonical_joints(skel, pose):
    _, J = forward_kinematics(skel, pose.replace(root_rotation=quat.IDENTITY,
                                                 root_translation=np.zeros(3)))
    return J


def test_layout_round_trip(skel, walk100):
    layout = PoseLayout.for_skeleton(skel)
    assert layout.dim == 134
    p = walk100[7]
    back = layout.to_pose(layout.from_pose(p, skel), skel, p.root_rotation, p.root_translation)
    modelled = [i for i in range(skel.n_joints) if i not in skel.group_indices("ear")]
    assert np.allclose(canonical_joints(skel, back)[modelled],
                       canonical_joints(skel, p)[modelled], atol=1e-6)


def test_dedup_identical_and_opposite(skel):
    p = Pose.identity(skel)
    kept, idx = dedup_poses([p] * 5, skel, 0.1)
    assert idx == [0] and len(kept) == 2
    rots = p.joint_rotations.copy()
    rots[skel.index("spine1")] = quat.from_axis_angle([1, 0, 0], np.pi)
    kept, idx = dedup_poses([p, p.replace(joint_rotations=rots)], skel, 0.1, mirror=False)
    assert idx == [0, 1]


def test_dissimilarity_sign_invariant():
    q = quat.from_axis_angle(np.random.default_rng(0).normal(size=(5, 3)), np.ones(5))
    assert np.isclose(pose_dissimilarity(q, -q), 0.0)


def test_dedup_monotone_in_threshold(skel, walk100):
    counts = [len(dedup_poses(walk100, skel, t, mirror=False)[1]) for t in (0.02, 0.05, 0.1, 0.2, 0.4)]
    assert counts == sorted(counts, reverse=True)


def test_dedup_rejects_bad_threshold(skel):
    with pytest.raises(ValueError):
        dedup_poses([Pose.identity(skel)], skel, 0.0)


def test_root_predicts_children_latents(tree100):
    root = tree100.nodes["root"]
    pred = root.predict(root.X)
    truth = np.hstack([tree100.nodes[n].X for n in ("tail", "legs", "spine", "head")])
    # per-frame jitter in the children is left to the root's noise term
    assert np.sqrt(np.mean((pred - truth) ** 2)) < 0.25 * truth.std()


def test_root_decode_matches_training_rotations(skel, tree100, walk100):
    layout = tree100.layout
    q_true = layout.quaternions(np.stack([layout.from_pose(p, skel) for p in walk100]))
    q_dec = layout.quaternions(tree100.root_vectors(tree100.nodes["root"].X))
    dots = np.abs(np.sum(q_true * q_dec, axis=-1))
    assert dots.min() >= 0.99


def test_leaf_latents_reproduce_joints(skel, tree100, walk100):
    lat = tree100.leaf_latents()
    errs = []
    for i, p in enumerate(walk100):
        _, J = decode_pose(tree100, {k: v[i] for k, v in lat.items()}, skeleton=skel)
        errs.append(np.linalg.norm(J - canonical_joints(skel, p), axis=1).mean())
    assert np.mean(errs) < 0.02 * skel.height()


def test_identity_root_at_origin(tree100):
    _, J = decode_pose(tree100, {"root": np.array([0.3, -0.2, 0.1])})
    assert np.allclose(J[0], 0.0)


def test_tail_perturbation_only_moves_tail(skel, tree100):
    coords = {k: v[3].copy() for k, v in tree100.leaf_latents().items()}
    _, a = decode_pose(tree100, coords)
    coords["tail"] = coords["tail"] + 0.5
    _, b = decode_pose(tree100, coords)
    tail = skel.group_indices("tail")
    other = np.setdiff1d(np.arange(skel.n_joints), tail)
    assert np.allclose(a[other], b[other])
    assert not np.allclose(a[tail], b[tail])


def test_save_load_round_trip(tmp_path, tree100):
    tree100.save(tmp_path / "t.qpa")
    back = LatentTree.load(tmp_path / "t.qpa")
    x = np.array([[0.1, 0.2, -0.3], [1.0, 0.0, 0.5]])
    assert np.array_equal(back.root_vectors(x), tree100.root_vectors(x))
    assert back.dims == tree100.dims


def test_two_frame_minimal_set(skel, walk100):
    tree = train_tree(walk100[:2], skel)
    assert tree.n_frames == 2
    assert set(tree.nodes) == {n for n, _ in LEAF_PARTS} | {"legs", "root"}
