"""Fitting the latent tree to predicted joints.

Stage 1 picks the best of ~50 k-means root latents, each posed by a
closed-form weighted rotation about the predicted root. Stage 2 refines the
root latent and root rotation; stage 3 frees the leaf latents, the root
transform and the shoulder translations. Every stage minimizes the same
objective: weighted joint distances in camera space plus a lambda-weighted
image-space term. Gradients are batched forward differences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.cluster.vq import kmeans2

from .. import quat
from ..camera import CameraModel
from ..skeleton import Pose, Skeleton, bone_lengths, rest_bone_lengths, static_joint_weights
from .tree import LEAF_PARTS, LatentTree, decode_vectors

log = logging.getLogger(__name__)

SHOULDER_BOUND_MM = 50.0
SMOOTH_EPS = 1.0          # mm / px, keeps the norms differentiable at 0
FD_STEP = {"latent": 1e-5, "rot": 1e-6, "trans": 1e-4}


class FitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class JointWeights:
    w1: np.ndarray
    w2: np.ndarray
    predicted: np.ndarray

    @property
    def effective(self) -> np.ndarray:
        return np.where(self.predicted, self.w1 * self.w2, 0.0)


def compute_weights(skeleton: Skeleton, predicted_joints, model_bone_lengths=None,
                    predicted=None, w1=None) -> JointWeights:
    """Static weights times bone-length plausibility of each joint's parent bone.

    ``w2 = min(1, 1 / deviation)`` with ``deviation = |L - L_N| / L``; the
    root, and joints whose parent is unpredicted, keep ``w2 = 1``.
    """
    j = np.asarray(predicted_joints, float)
    n = skeleton.n_joints
    pred = np.isfinite(j).all(axis=1) if predicted is None else np.asarray(predicted, bool)
    L = rest_bone_lengths(skeleton) if model_bone_lengths is None else np.asarray(model_bone_lengths)
    if np.any(L <= 0):
        raise FitError("model bone lengths must be positive")
    LN = bone_lengths(skeleton, np.where(np.isfinite(j), j, 0.0))
    dev = np.abs(L - LN) / L
    with np.errstate(divide="ignore"):
        w2b = np.minimum(1.0, np.where(dev > 0, 1.0 / dev, np.inf))
    known = pred[1:] & pred[skeleton.parents[1:]]
    w2 = np.ones(n)
    w2[1:] = np.where(known, w2b, 1.0)
    w1 = static_joint_weights(skeleton) if w1 is None else np.asarray(w1, float)
    return JointWeights(w1, w2, pred)


def rotvec_exp(v) -> np.ndarray:
    return quat.rotvec_to_matrix(v)


def weighted_rotation(model, target, w) -> np.ndarray:
    """Proper rotation(s) R minimizing sum w |target - R model|^2; batched over leading axis."""
    H = np.einsum("...ji,...jk->...ik", model * w[:, None], target)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    return np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)


@dataclass(frozen=True, eq=False)
class Objective:
    """The fitting loss for one frame, evaluated on batches of joint sets."""
    target3d: np.ndarray
    target2d: np.ndarray
    gamma: np.ndarray
    camera: CameraModel
    lam: float = 1e-3
    eps: float = SMOOTH_EPS

    def __call__(self, joints) -> np.ndarray:
        g = self.gamma
        d3 = np.sqrt(np.sum((joints - self.target3d) ** 2, axis=-1) + self.eps ** 2) - self.eps
        loss = np.sum(g * d3, axis=-1)
        if self.lam > 0:
            z = np.maximum(joints[..., 2], 1.0)
            uv = np.stack([self.camera.fx * joints[..., 0] / z + self.camera.cx,
                           self.camera.fy * joints[..., 1] / z + self.camera.cy], axis=-1)
            d2 = np.sqrt(np.sum((uv - self.target2d) ** 2, axis=-1) + self.eps ** 2) - self.eps
            loss = loss + self.lam * np.sum(g * d2, axis=-1)
        return loss


@dataclass
class FitResult:
    pose: Pose
    joints: np.ndarray
    coords: dict
    root_latent: np.ndarray
    stage_losses: list
    loss: float
    diagnostics: dict = field(default_factory=dict)


def root_candidates(tree: LatentTree, k: int = 50, restarts: int = 20, seed: int = 0):
    """k-means centroids of the root-node training latents (cached on the tree)."""
    cache = tree.__dict__.setdefault("_centroids", {})
    key = (k, restarts, seed)
    if key in cache:
        return cache[key]
    X = tree.nodes["root"].X
    if len(X) <= k:
        cache[key] = X.copy()
        return cache[key]
    rng = np.random.default_rng(seed)
    best, best_d = None, np.inf
    for _ in range(restarts):
        c, lab = kmeans2(X, k, minit="++", seed=rng)
        dist = np.sum((X - c[lab]) ** 2)
        if dist < best_d:
            best, best_d = c, dist
    cache[key] = best
    return best


def _minimize(fun_batch, x0, steps, bounds=None, maxiter=200):
    """L-BFGS-B on a batched scalar function with forward-difference gradients."""
    n = len(x0)
    eye = np.diag(steps)

    def fg(x):
        pts = np.vstack([x, x + eye])
        vals = fun_batch(pts)
        return vals[0], (vals[1:] - vals[0]) / steps

    res = optimize.minimize(fg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": maxiter, "ftol": 1e-10, "gtol": 1e-8})
    return res


def fit(tree: LatentTree, target3d, target2d, camera: CameraModel, weights: JointWeights,
        lam: float = 1e-3, skeleton: Skeleton = None, k: int = 50, seed: int = 0,
        maxiter: int = 200) -> FitResult:
    """Fit the tree to one frame of predicted camera-space joints.

    :param target3d: (J, 3) predicted joints in camera space (mm)
    :param target2d: (J, 2) predicted joints in full-image pixels
    """
    skel = skeleton or tree.skeleton
    gamma = weights.effective
    if not np.any(gamma > 0):
        raise FitError("no predicted joint carries positive weight")
    t3 = np.where(np.isfinite(target3d) & (gamma[:, None] > 0), target3d, 0.0)
    t2 = np.where(np.isfinite(target2d) & (gamma[:, None] > 0), target2d, 0.0)
    obj = Objective(t3, t2, gamma, camera, lam)
    tidx = sorted(tree.layout.trans_cols)
    tcols = np.array([tree.layout.trans_cols[j] for j in tidx])[:, None] + np.arange(3)
    diag = {"warnings": []}

    # -- stage 1: candidate root latents, closed-form rotation about the predicted root
    cands = root_candidates(tree, k, seed=seed)
    vecs = tree.root_vectors(cands)
    model = decode_vectors(tree, vecs, skel)                 # root at origin, identity rotation
    if gamma[0] > 0:
        T1 = np.broadcast_to(t3[0], (len(cands), 3)).copy()
        Rs = weighted_rotation(model, np.broadcast_to(t3 - t3[0], model.shape), gamma)
    else:
        w = gamma / gamma.sum()
        mc = np.einsum("j,cjk->ck", w, model)
        tc = w @ t3
        Rs = weighted_rotation(model - mc[:, None], np.broadcast_to(t3 - tc, model.shape), gamma)
        T1 = tc - np.einsum("cij,cj->ci", Rs, mc)
    joints1 = np.einsum("cij,cnj->cni", Rs, model) + T1[:, None]
    losses = obj(joints1)
    best = int(np.argmin(losses))
    x1, R1, T1 = cands[best].copy(), Rs[best], T1[best]
    stage = [float(losses[best])]

    # -- stage 2: root latent + root rotation, translation held
    q9 = len(x1)

    def f2(p):
        vec = tree.root_vectors(p[:, :q9])
        R = R1 @ rotvec_exp(p[:, q9:])
        return obj(decode_vectors(tree, vec, skel, R, np.broadcast_to(T1, (len(p), 3))))

    p0 = np.concatenate([x1, np.zeros(3)])
    steps = np.concatenate([np.full(q9, FD_STEP["latent"]), np.full(3, FD_STEP["rot"])])
    res = _minimize(f2, p0, steps, maxiter=maxiter)
    p2 = res.x if np.isfinite(res.fun) and res.fun <= stage[0] else p0
    if not np.isfinite(res.fun):
        diag["warnings"].append("stage 2 diverged")
    stage.append(float(f2(p2[None])[0]))
    x2, R2 = p2[:q9], R1 @ rotvec_exp(p2[q9:])
    diag["stage2_iters"] = int(res.nit)

    # -- stage 3: leaf latents, root transform and shoulder translations
    coords0 = tree.children_of_root(x2)
    names = [n for n, _ in LEAF_PARTS]
    sizes = [tree.nodes[n].q for n in names]
    c0 = np.concatenate([coords0[n] for n in names])
    s0 = np.clip(tree.root_vectors(x2)[tcols], -SHOULDER_BOUND_MM, SHOULDER_BOUND_MM)
    nc = len(c0)

    def unpack(p):
        coords, col = {}, 0
        for n, q in zip(names, sizes):
            coords[n] = p[:, col:col + q]
            col += q
        R = R2 @ rotvec_exp(p[:, nc:nc + 3])
        T = T1 + np.einsum("ij,bj->bi", R2, p[:, nc + 3:nc + 6])
        sh = p[:, nc + 6:].reshape(len(p), -1, 3)
        return coords, R, T, sh

    def f3(p):
        coords, R, T, sh = unpack(p)
        return obj(decode_vectors(tree, tree.leaf_vectors(coords), skel, R, T, sh))

    p0 = np.concatenate([c0, np.zeros(6), s0.ravel()])
    steps = np.concatenate([np.full(nc, FD_STEP["latent"]), np.full(3, FD_STEP["rot"]),
                            np.full(3 + s0.size, FD_STEP["trans"])])
    bounds = [(None, None)] * (nc + 6) + [(-SHOULDER_BOUND_MM, SHOULDER_BOUND_MM)] * s0.size
    start3 = float(f3(p0[None])[0])
    res = _minimize(f3, p0, steps, bounds, maxiter=maxiter)
    p3 = res.x if np.isfinite(res.fun) and res.fun <= start3 else p0
    if not np.isfinite(res.fun):
        diag["warnings"].append("stage 3 diverged")
    final3 = float(f3(p3[None])[0])
    diag["stage3_iters"] = int(res.nit)
    diag["stage3_start"] = start3

    if final3 <= stage[-1]:
        coords, R, T, sh = unpack(p3[None])
        coords = {n: c[0] for n, c in coords.items()}
        vec = tree.leaf_vectors(coords)
        vec[tcols] = sh[0]
        R, T = R[0], T[0]
        stage.append(final3)
    else:
        # keep the stage-2 solution so the loss never goes up
        diag["warnings"].append("stage 3 did not improve on stage 2")
        coords = tree.children_of_root(x2)
        vec, R, T = tree.root_vectors(x2), R2, T1
        stage.append(stage[-1])
    pose = tree.layout.to_pose(vec, skel, quat.from_matrix(R), T)
    joints = decode_vectors(tree, vec, skel, R, T)
    return FitResult(pose, joints, coords, x2, stage, stage[-1], diag)
