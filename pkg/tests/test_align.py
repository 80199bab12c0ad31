import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from quadpose.align import (MatchSet, angle_deg, cloud_normals, make_matches, mutual_matches,
                            refine_root, rigid_solve, vertex_normals)
from quadpose.surrogate import icosphere, make_dog


def cube_with_face_centres():
    """Unit cube whose faces are fans of four triangles around a centre vertex,
    so every corner touches two equal triangles on each of its three faces."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    verts, tris = list(corners), []
    for axis in range(3):
        for side in (0, 1):
            face = [i for i, c in enumerate(corners) if c[axis] == side]
            centre = corners[face].mean(axis=0)
            verts.append(centre)
            ci = len(verts) - 1
            # order the four corners around the face
            u, w = [a for a in range(3) if a != axis]
            ang = np.arctan2(corners[face, w] - centre[w], corners[face, u] - centre[u])
            ring = [face[k] for k in np.argsort(ang)]
            for k in range(4):
                a, b = ring[k], ring[(k + 1) % 4]
                tri = [ci, a, b]
                n = np.cross(corners[a] - centre, corners[b] - centre)
                out = centre - 0.5
                tris.append(tri if n @ out > 0 else [ci, b, a])
    return np.array(verts), np.array(tris)


def grid_plane(n=11, spacing=10.0):
    xs = np.arange(n) * spacing
    pts = np.array([[x, y, 0.0] for y in xs for x in xs])
    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            tris += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    return pts, np.array(tris)


def test_cube_corner_normals():
    v, t = cube_with_face_centres()
    n, zero = vertex_normals(v, t)
    assert not zero.any()
    for i in range(8):
        expect = (v[i] - 0.5) / np.linalg.norm(v[i] - 0.5)
        assert np.allclose(n[i], expect, atol=1e-12)


def test_plane_interior_normal():
    v, t = grid_plane()
    n, _ = vertex_normals(v, t)
    assert np.allclose(n[5 * 11 + 5], [0.0, 0.0, 1.0])


def test_sphere_normals_radial():
    v, t = icosphere(100.0, 3)
    n, _ = vertex_normals(v, t)
    radial = v / np.linalg.norm(v, axis=1, keepdims=True)
    assert angle_deg(n, radial).max() < 5.0


def test_orphan_vertex_flagged():
    v, t = grid_plane(3)
    v = np.vstack([v, [[99.0, 99.0, 99.0]]])
    n, zero = vertex_normals(v, t)
    assert zero[-1] and not zero[:-1].any() and np.all(n[-1] == 0)


def test_identical_clouds_match_identity():
    v, t = icosphere(50.0, 2)
    n, _ = vertex_normals(v, t)
    m = make_matches(v, n, v, n, 70.0)
    assert np.array_equal(m.pairs, np.column_stack([np.arange(len(v))] * 2))


def test_flipped_normals_match_nothing():
    v, t = icosphere(50.0, 2)
    n, _ = vertex_normals(v, t)
    assert len(make_matches(v, n, v, -n, 70.0)) == 0


def test_tilted_planes_gate():
    src, _ = grid_plane()
    tilt = Rotation.from_rotvec([np.radians(60.0), 0.0, 0.0]).as_matrix()
    dst = src @ tilt.T + [0.0, 0.0, 30.0]
    sn = np.tile([0.0, 0.0, 1.0], (len(src), 1))
    dn = sn @ tilt.T
    assert len(make_matches(src, sn, dst, dn, 70.0)) == len(src)
    assert len(make_matches(src, sn, dst, dn, 45.0)) == 0
    # the boundary is strict: 60 is kept just above 60 and dropped at it
    assert len(make_matches(src, sn, dst, dn, 60.0 + 1e-6)) == len(src)
    assert len(make_matches(src, sn, dst, dn, 60.0 - 1e-6)) == 0


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        make_matches(np.zeros((0, 3)), np.zeros((0, 3)), np.ones((2, 3)), np.ones((2, 3)))


def test_ties_go_to_lowest_target():
    dst = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    n = np.tile([0.0, 0.0, 1.0], (2, 1))
    m = make_matches(np.zeros((1, 3)), n[:1], dst[::-1], n, 70.0)
    assert m.pairs.tolist() == [[0, 0]]


def test_mutual_examples():
    perm = np.random.default_rng(0).permutation(50)
    m1 = MatchSet(np.column_stack([np.arange(50), perm]))
    m2 = MatchSet(m1.pairs[:, ::-1].copy())
    both = mutual_matches(m1, m2)
    assert len(both) == 50 and both.mutual
    # a pairing that shares no pair with m1 in reverse
    shifted = MatchSet(np.column_stack([perm, (np.arange(50) + 1) % 50]))
    assert len(mutual_matches(m1, shifted)) == 0
    bad = m2.pairs.copy()
    bad[7, 1] = (bad[7, 1] + 1) % 50
    kept = mutual_matches(m1, MatchSet(bad))
    assert len(kept) == 49
    assert (int(m2.pairs[7, 1]), int(m2.pairs[7, 0])) not in kept.as_set()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_solve_beats_perturbations(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 100, (30, 3))
    R0 = Rotation.random(random_state=rng).as_matrix()
    dst = src @ R0.T + rng.normal(0, 50, 3) + rng.normal(0, 5, src.shape)
    w = rng.uniform(0.1, 1.0, 30)
    R, t = rigid_solve(src, dst, w)
    assert np.linalg.det(R) == pytest.approx(1.0)

    def cost(R, t):
        return float(w @ np.sum((src @ R.T + t - dst) ** 2, axis=1))

    best = cost(R, t)
    for _ in range(100):
        dR = Rotation.from_rotvec(rng.normal(0, 0.05, 3)).as_matrix()
        assert best <= cost(dR @ R, t + rng.normal(0, 2.0, 3)) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_threshold_180_is_plain_nearest_neighbour(seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
    sn, dn = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
    sn /= np.linalg.norm(sn, axis=1, keepdims=True)
    dn /= np.linalg.norm(dn, axis=1, keepdims=True)
    m = make_matches(src, sn, dst, dn, 180.0)
    brute = np.argmin(np.linalg.norm(src[:, None] - dst[None], axis=-1), axis=1)
    assert np.array_equal(m.pairs[:, 0], np.arange(40))
    assert np.array_equal(m.pairs[:, 1], brute)
    assert len(np.unique(m.pairs[:, 0])) == len(m)          # each source at most once


@pytest.fixture(scope="module")
def dog_mesh():
    d = make_dog()
    return d.mesh.vertices, d.mesh.triangles


def _moved(v, t, deg=5.0, mm=20.0, axis=(0.3, 1.0, 0.2)):
    a = np.asarray(axis) / np.linalg.norm(axis)
    R = Rotation.from_rotvec(np.radians(deg) * a).as_matrix()
    c = v.mean(axis=0)
    d = np.array([mm, 0.0, 0.0])
    cloud = (v - c) @ R.T + c + d
    n, _ = vertex_normals(cloud, t)
    return cloud, n, R, c + d - R @ c


def test_refine_recovers_small_motion(dog_mesh):
    v, t = dog_mesh
    cloud, cn, R, tr = _moved(v, t)
    res = refine_root(v, t, cloud, cn, policy="repeat")
    ang = np.degrees(Rotation.from_matrix(res.rotation @ R.T).magnitude())
    assert ang < 0.5
    c = v.mean(axis=0)
    assert np.linalg.norm(res.apply(c[None])[0] - (R @ c + tr)) < 2.0
    assert all(b <= a for a, b in zip(res.errors, res.errors[1:]))


def test_refine_exact_cloud_is_identity(dog_mesh):
    v, t = dog_mesh
    n, _ = vertex_normals(v, t)
    res = refine_root(v, t, v, n, policy="mutual-once")
    assert res.errors[0] == 0.0
    assert np.allclose(res.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(res.translation, 0.0, atol=1e-9)


@pytest.mark.parametrize("policy", ["once", "repeat", "mutual-once", "mutual-repeat"])
def test_refine_front_half_monotone(dog_mesh, policy):
    v, t = dog_mesh
    cloud, cn, _, _ = _moved(v, t, 2.0, 10.0)
    front = cloud[:, 2] > np.median(cloud[:, 2])
    res = refine_root(v, t, cloud[front], cn[front], policy=policy)
    assert all(b <= a for a, b in zip(res.errors, res.errors[1:]))
    assert res.rounds == len(res.errors) - 1
    if policy.startswith("mutual"):
        # union matching drags the unseen back half onto the cloud edge, so
        # only mutual matching is expected to make progress on a partial view
        assert res.rounds >= 1 and res.errors[-1] < res.errors[0]
    if not policy.endswith("repeat"):
        assert res.rounds <= 1


def test_refine_no_matches_returns_input(dog_mesh):
    v, t = dog_mesh
    n, _ = vertex_normals(v, t)
    res = refine_root(v, t, v, -n)
    assert res.rounds == 0 and res.diagnostics["status"] == "no matches"
    assert np.array_equal(res.rotation, np.eye(3))


def test_unknown_policy_rejected(dog_mesh):
    v, t = dog_mesh
    with pytest.raises(ValueError):
        refine_root(v, t, v, policy="icp")
