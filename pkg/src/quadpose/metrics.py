"""Joint-error metrics and per-body-part reports.

3D errors in reports are expressed in head-bone units: both skeletons are
scaled so the ground-truth head bone (head -> muzzle) is 2 units long.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, project
from .skeleton import Skeleton

GROUPS = ("All", "Head", "Body", "Tail")
METRICS = ("mpjpe", "pa_mpjpe", "pck2d", "pck3d", "pa_pck3d")
HEAD_BONE = ("head", "muzzle")


class MetricError(ValueError):
    pass


def _check(pred, gt):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"joint arrays differ in shape: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, align_root: bool = True, root_index: int = 0) -> float:
    pred, gt = _check(pred, gt)
    d = pred - gt
    if align_root:
        d = d - d[root_index]
    return float(np.linalg.norm(d, axis=-1).mean())


def pa_align(pred, gt):
    """Least-squares similarity alignment of ``pred`` onto ``gt`` (no reflection).

    :return: aligned joints and ``(scale, R, t)`` with ``aligned = scale * pred @ R.T + t``
    """
    pred, gt = _check(pred, gt)
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mp, gt - mg
    if np.linalg.matrix_rank(p, tol=1e-9 * max(1.0, np.abs(p).max())) < 2 or \
            np.linalg.matrix_rank(g, tol=1e-9 * max(1.0, np.abs(g).max())) < 2:
        raise MetricError("degenerate joint configuration for Procrustes alignment")
    U, s, Vt = np.linalg.svd(g.T @ p)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    scale = float(np.trace(np.diag(s) @ D) / np.sum(p ** 2))
    t = mg - scale * R @ mp
    return scale * pred @ R.T + t, (scale, R, t)


def pa_mpjpe(pred, gt) -> float:
    aligned, _ = pa_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, float), axis=-1).mean())


def pck2d(pred, gt, area: float, alpha: float = 0.05) -> float:
    """Fraction of joints closer than ``alpha * sqrt(area)`` pixels."""
    if area <= 0:
        raise MetricError("mask area must be positive")
    pred, gt = _check(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1) < alpha * np.sqrt(area)))


def head_scale(gt, skeleton: Skeleton) -> float:
    """Factor that makes the ground-truth head bone 2 units long."""
    a, b = (skeleton.index(n) for n in HEAD_BONE)
    length = np.linalg.norm(np.asarray(gt)[a] - np.asarray(gt)[b])
    if length <= 0:
        raise MetricError("head bone has zero length")
    return 2.0 / length


def pck3d(pred, gt, skeleton: Skeleton, threshold: float = 1.0) -> float:
    pred, gt = _check(pred, gt)
    s = head_scale(gt, skeleton)
    return float(np.mean(s * np.linalg.norm(pred - gt, axis=-1) <= threshold))


def frame_metrics(pred3d, gt3d, skeleton: Skeleton, pred2d=None, gt2d=None, area=None,
                  alpha: float = 0.05) -> dict:
    """All metrics for one frame, per group; 3D values in head-bone units."""
    pred3d, gt3d = _check(pred3d, gt3d)
    s = head_scale(gt3d, skeleton)
    p, g = pred3d * s, gt3d * s
    aligned, _ = pa_align(p, g)
    d_root = np.linalg.norm((p - g) - (p[0] - g[0]), axis=-1)
    d_pa = np.linalg.norm(aligned - g, axis=-1)
    d_raw = np.linalg.norm(p - g, axis=-1)
    d2 = None
    if pred2d is not None and gt2d is not None and area:
        d2 = np.linalg.norm(np.asarray(pred2d) - np.asarray(gt2d), axis=-1) < alpha * np.sqrt(area)
    out = {}
    for name, idx in group_indices(skeleton).items():
        out[name] = {"mpjpe": float(d_root[idx].mean()), "pa_mpjpe": float(d_pa[idx].mean()),
                     "pck3d": float(np.mean(d_raw[idx] <= 1.0)),
                     "pa_pck3d": float(np.mean(d_pa[idx] <= 1.0)),
                     "pck2d": float(d2[idx].mean()) if d2 is not None else float("nan")}
    return out, s


def group_indices(skeleton: Skeleton) -> dict:
    return {"All": list(range(skeleton.n_joints)), "Head": skeleton.group_indices("head"),
            "Body": skeleton.group_indices("body"), "Tail": skeleton.group_indices("tail")}


@dataclass
class EvalReport:
    groups: dict                         # group -> metric -> mean over frames
    frames: list                         # per-frame group dicts
    scale: list                          # head-bone normalization factor per frame
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"groups": self.groups, "frames": self.frames, "head_scale": self.scale,
                "joint_counts": self.counts}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        head = f"{'group':<6}" + "".join(f"{m:>10}" for m in METRICS)
        rows = [head]
        for g in GROUPS:
            rows.append(f"{g:<6}" + "".join(f"{self.groups[g][m]:>10.4f}" for m in METRICS))
        return "\n".join(rows)


def group_report(pred3d, gt3d, skeleton: Skeleton, camera: CameraModel = None,
                 pred2d=None, gt2d=None, areas=None, alpha: float = 0.05) -> EvalReport:
    """Metrics per group over a sequence of frames.

    2D joints default to projections of the 3D joints when a camera is given.
    """
    pred3d, gt3d = np.asarray(pred3d, float), np.asarray(gt3d, float)
    if pred3d.ndim == 2:
        pred3d, gt3d = pred3d[None], gt3d[None]
    n = len(pred3d)
    if camera is not None:
        if pred2d is None:
            pred2d = project(camera, pred3d)[0]
        if gt2d is None:
            gt2d = project(camera, gt3d)[0]
    areas = [None] * n if areas is None else list(np.broadcast_to(areas, (n,)))
    frames, scales = [], []
    for f in range(n):
        fm, s = frame_metrics(pred3d[f], gt3d[f], skeleton,
                              None if pred2d is None else pred2d[f],
                              None if gt2d is None else gt2d[f], areas[f], alpha)
        frames.append(fm)
        scales.append(s)
    groups = {g: {m: float(np.mean([fr[g][m] for fr in frames])) for m in METRICS}
              for g in GROUPS}
    counts = {g: len(i) for g, i in group_indices(skeleton).items()}
    counts["Ear"] = len(skeleton.group_indices("ear"))
    return EvalReport(groups, frames, scales, counts)
