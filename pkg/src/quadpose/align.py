"""Mesh / point-cloud correspondence with a normal gate, and rigid root refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

POLICIES = ("once", "repeat", "mutual-once", "mutual-repeat")
DEFAULT_POLICY = "mutual-once"


@dataclass(frozen=True, eq=False)
class MatchSet:
    pairs: np.ndarray           # (M, 2) source index, target index
    mutual: bool = False

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set:
        return {(int(a), int(b)) for a, b in self.pairs}


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals.

    :return: (N, 3) unit normals and a (N,) bool flag for vertices whose
        accumulated normal vanished (those normals are left at zero).
    """
    v = np.asarray(vertices, float)
    t = np.asarray(triangles, np.int64)
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])   # length = 2 * area
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    zero = norm < 1e-12
    out = np.divide(acc, norm[:, None], out=np.zeros_like(acc), where=~zero[:, None])
    return out, zero


def cloud_normals(points, k: int = 12, viewpoint=(0.0, 0.0, 0.0)):
    """Point-cloud normals from the smallest principal axis of each k-neighbourhood,
    oriented toward ``viewpoint`` (the camera centre for camera-space clouds)."""
    p = np.asarray(points, float)
    k = min(k, len(p))
    _, idx = cKDTree(p).query(p, k=k)
    nb = p[idx] - p[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", n, np.asarray(viewpoint) - p) < 0
    n[flip] *= -1
    return n


def angle_deg(a, b) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(np.einsum("ni,ni->n", a, b), -1.0, 1.0)))


def make_matches(src_points, src_normals, dst_points, dst_normals,
                 angle_threshold_deg: float = 70.0) -> MatchSet:
    """Nearest target for each source point, kept when normals differ by less than the threshold.

    At a threshold of 180 degrees every nearest-neighbour pair is kept.
    Ties go to the lowest target index.
    """
    src = np.asarray(src_points, float)
    dst = np.asarray(dst_points, float)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("matching needs non-empty point sets")
    dist, j = cKDTree(dst).query(src, k=2 if len(dst) > 1 else 1)
    if j.ndim == 2:
        tie = np.isclose(dist[:, 0], dist[:, 1], rtol=0, atol=1e-12) & (j[:, 1] < j[:, 0])
        j = np.where(tie, j[:, 1], j[:, 0])
    ang = angle_deg(np.asarray(src_normals, float), np.asarray(dst_normals, float)[j])
    keep = ang < angle_threshold_deg if angle_threshold_deg < 180 else np.ones(len(src), bool)
    i = np.flatnonzero(keep)
    return MatchSet(np.column_stack([i, j[keep]]).astype(np.int64))


def mutual_matches(m1: MatchSet, m2: MatchSet) -> MatchSet:
    """Pairs (i, j) of ``m1`` whose reverse (j, i) is in ``m2``."""
    back = {(int(b), int(a)) for a, b in m2.pairs}
    keep = [k for k, (a, b) in enumerate(m1.pairs) if (int(a), int(b)) in back]
    return MatchSet(m1.pairs[keep].reshape(-1, 2), mutual=True)


def rigid_solve(src, dst, w=None):
    """Weighted least-squares proper rotation R and translation t with dst ~ R src + t."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    w = np.ones(len(src)) if w is None else np.asarray(w, float)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    H = ((src - cs) * w[:, None]).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


@dataclass
class RefineResult:
    rotation: np.ndarray        # applied on top of the input transform
    translation: np.ndarray
    errors: list                # mean matched distance, initial then per accepted round
    rounds: int
    diagnostics: dict = field(default_factory=dict)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation


def union_matches(m1: MatchSet, m2: MatchSet) -> MatchSet:
    """Pairs of ``m1`` together with the reversed pairs of ``m2``, without duplicates."""
    both = np.vstack([m1.pairs, m2.pairs[:, ::-1]])
    return MatchSet(np.unique(both, axis=0) if len(both) else both.reshape(0, 2))


def _matches(src, sn, dst, dn, policy, angle):
    """Matches in both directions, intersected (mutual policies) or merged."""
    m1 = make_matches(src, sn, dst, dn, angle)
    m2 = make_matches(dst, dn, src, sn, angle)
    if policy.startswith("mutual"):
        return mutual_matches(m1, m2)
    return union_matches(m1, m2)


def refine_root(vertices, triangles, cloud, cloud_normals_=None, policy: str = DEFAULT_POLICY,
                max_rounds: int = 3, improvement: float = 0.05, angle: float = 70.0,
                viewpoint=(0.0, 0.0, 0.0)) -> RefineResult:
    """Rigidly align a posed mesh to a point cloud.

    A round builds matches, solves the rigid transform in closed form and
    applies it. ``*-once`` policies run a single round; ``*-repeat`` run up
    to ``max_rounds``, continuing only while a round cuts the mean matched
    distance by at least ``improvement`` (relative). A round that raises the
    error is rejected.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown match policy {policy!r}")
    v = np.asarray(vertices, float)
    cloud = np.asarray(cloud, float)
    cn = cloud_normals(cloud, viewpoint=viewpoint) if cloud_normals_ is None else cloud_normals_
    R, t = np.eye(3), np.zeros(3)

    def state(R, t):
        pts = v @ R.T + t
        n, _ = vertex_normals(pts, triangles)
        m = _matches(pts, n, cloud, cn, policy, angle)
        if len(m) == 0:
            return pts, m, np.inf
        e = np.linalg.norm(pts[m.pairs[:, 0]] - cloud[m.pairs[:, 1]], axis=1).mean()
        return pts, m, float(e)

    pts, m, err = state(R, t)
    if len(m) == 0:
        log.warning("event=refine_root status=no_matches")
        return RefineResult(R, t, [], 0, {"status": "no matches"})
    errors, rounds = [err], 0
    for _ in range(max_rounds if policy.endswith("repeat") else 1):
        dR, dt = rigid_solve(pts[m.pairs[:, 0]], cloud[m.pairs[:, 1]])
        Rn, tn = dR @ R, dR @ t + dt
        new_pts, new_m, new_err = state(Rn, tn)
        if not np.isfinite(new_err) or new_err > errors[-1]:
            break
        gain = (errors[-1] - new_err) / errors[-1] if errors[-1] > 0 else 0.0
        R, t, pts, m = Rn, tn, new_pts, new_m
        errors.append(new_err)
        rounds += 1
        if gain < improvement:
            break
    return RefineResult(R, t, errors, rounds, {"status": "ok", "matches": len(m)})
