"""End-to-end driver: predict joints, fit shape and pose, report.

The trained network is replaced by a predictor callable. Two ship here:
an oracle that perturbs ground-truth annotations, and a heatmap decoder for
stacks written by any external model.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.spatial import cKDTree

from . import quat
from .align import DEFAULT_POLICY, POLICIES, refine_root
from .camera import CameraModel, depth_to_pointcloud, project
from .heatmap import (INPUT_SIZE, CropTransform, NormalizedJoints, decode_heatmaps,
                      denormalize_joints)
from .io import write_ppm
from .metrics import EvalReport, group_report
from .prior.fit import FitError, compute_weights, fit
from .prior.tree import LatentTree
from .shape import ShapeModel, estimate_scale, predict_shape
from .skeleton import Skeleton, SkinnedMesh, bone_lengths, rest_bone_lengths, skin_mesh

log = logging.getLogger(__name__)

CONFIDENCE_FOR_LENGTHS = 0.5


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Prediction:
    j2d_full: np.ndarray      # (J, 2) px
    j3d_cam: np.ndarray       # (J, 3) mm
    confidence: np.ndarray    # (J,) in [0, 1]
    predicted: np.ndarray     # (J,) bool
    j3d256: np.ndarray = None

    def to_dict(self) -> dict:
        return {"j2d_full": np.nan_to_num(self.j2d_full, nan=-1.0).tolist(),
                "j3d_cam": np.nan_to_num(self.j3d_cam, nan=0.0).tolist(),
                "confidence": self.confidence.tolist(), "predicted": self.predicted.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        pred = np.array(d["predicted"], bool)
        j2 = np.array(d["j2d_full"], float)
        j3 = np.array(d["j3d_cam"], float)
        j2[~pred] = np.nan
        j3[~pred] = np.nan
        return cls(j2, j3, np.array(d["confidence"], float), pred)


class JointPredictor(Protocol):
    """Anything that maps a rendered sample to joint predictions."""

    def __call__(self, sample) -> Prediction: ...


def oracle_predict(normalized: NormalizedJoints, crop: CropTransform, camera: CameraModel,
                   sigma_px: float = 0.0, sigma_depth: float = 0.0, seed=None,
                   occlusion=None) -> Prediction:
    """Ground-truth joints with Gaussian noise in network space.

    Noise is added to x, y (256-pixel units) and the depth code. Joints whose
    true network-space position falls inside ``occlusion`` (a square record
    in 256 space) are reported at the square's centre, at the root's depth,
    with confidence 0.
    """
    rng = np.random.default_rng(seed)
    j = normalized.j3d256.copy()
    j[:, :2] += rng.normal(0.0, sigma_px, (len(j), 2)) if sigma_px > 0 else 0.0
    j[:, 2] += rng.normal(0.0, sigma_depth, len(j)) if sigma_depth > 0 else 0.0
    j = np.clip(j, 0.0, 255.0)
    conf = np.ones(len(j))
    if occlusion is not None:
        hidden = occlusion.contains(normalized.j3d256[:, :2])
        r = normalized.root_index
        j[hidden, :2] = occlusion.centre
        j[hidden & (np.arange(len(j)) != r), 2] = 255 / 2
        conf[hidden] = 0.0
    full, cam3d = denormalize_joints(j, camera, crop, normalized.root_index)
    return Prediction(full, cam3d, conf, conf > 0, j)


@dataclass
class OraclePredictor:
    sigma_px: float = 0.0
    sigma_depth: float = 0.0
    seed: int = 0
    occlusion_px: int = 0

    def __call__(self, sample) -> Prediction:
        ss = np.random.SeedSequence([self.seed, sample.frame, sample.camera_index])
        noise_seed, occ_seed = ss.spawn(2)
        occ = None
        if self.occlusion_px:
            from .synthgen import occlude
            _, occ = occlude(np.zeros((INPUT_SIZE, INPUT_SIZE)), self.occlusion_px,
                             np.random.default_rng(occ_seed))
        return oracle_predict(sample.normalized, sample.crop, sample.camera, self.sigma_px,
                              self.sigma_depth, np.random.default_rng(noise_seed), occ)


@dataclass
class HeatmapPredictor:
    """Decodes the heatmap stack attached to each sample."""

    def __call__(self, sample) -> Prediction:
        d = decode_heatmaps(sample.heatmaps, sample.skeleton, sample.crop, sample.camera)
        return Prediction(d.j2d_full, d.j3d_cam, np.clip(d.confidence, 0.0, 1.0), d.predicted,
                          d.j3d256)


@dataclass
class PipelineConfig:
    skeleton_path: str = None
    shape_model_path: str = None
    prior_path: str = None
    predictor: str = "oracle"
    sigma_px: float = 0.0
    sigma_depth: float = 0.0
    occlusion_px: int = 0
    lambda2d: float = 1e-3
    match_policy: str = DEFAULT_POLICY
    known_shape: bool = True
    seed: int = 0
    camera_index: int = 0
    max_frames: int = 0
    maxiter: int = 200
    rough_frames: int = 3
    overlay_dir: str = None

    def validate(self) -> None:
        if self.lambda2d < 0:
            raise ValueError("lambda2d must be non-negative")
        if self.match_policy not in POLICIES:
            raise ValueError(f"match policy must be one of {POLICIES}")
        if self.predictor not in ("oracle", "heatmap"):
            raise ValueError("predictor must be 'oracle' or 'heatmap'")
        paths = [("prior_path", self.prior_path)]
        if not self.known_shape:
            paths.append(("shape_model_path", self.shape_model_path))
        for name, p in paths + [("skeleton_path", self.skeleton_path)]:
            if p is not None and not Path(p).exists():
                raise ValueError(f"{name} {p} does not exist")
        if self.prior_path is None:
            raise ValueError("prior_path is required")
        if not self.known_shape and self.shape_model_path is None:
            raise ValueError("shape_model_path is required when the shape is unknown")

    def make_predictor(self) -> JointPredictor:
        if self.predictor == "heatmap":
            return HeatmapPredictor()
        return OraclePredictor(self.sigma_px, self.sigma_depth, self.seed, self.occlusion_px)

    @classmethod
    def from_json(cls, path, **overrides) -> "PipelineConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    frames: list
    poses: list                 # fitted poses in camera space
    joints: np.ndarray          # (F, J, 3) fitted, camera space
    predictions: list
    report: EvalReport
    raw_report: EvalReport
    skeleton: Skeleton
    mesh: SkinnedMesh = None
    shape: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    stage_losses: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"frames": self.frames, "report": self.report.to_dict(),
                "raw_report": self.raw_report.to_dict(), "shape": self.shape,
                "failures": self.failures, "stage_losses": self.stage_losses}


def raw_joints(pred: Prediction) -> np.ndarray:
    """Predicted joints with unpredicted rows filled by the root (or zero) for scoring."""
    j = pred.j3d_cam.copy()
    fill = j[0] if np.isfinite(j[0]).all() else np.zeros(3)
    j[~np.isfinite(j).all(axis=1)] = fill
    return j


def sequence_bone_lengths(skeleton: Skeleton, predictions) -> np.ndarray:
    """Per-bone median over frames where both endpoints are confidently predicted (NaN if never)."""
    L = np.stack([bone_lengths(skeleton, p.j3d_cam) for p in predictions])
    conf = np.stack([p.confidence for p in predictions])
    ok = (conf[:, 1:] > CONFIDENCE_FOR_LENGTHS) & (conf[:, skeleton.parents[1:]] > CONFIDENCE_FOR_LENGTHS)
    ok &= np.isfinite(L)
    out = np.full(L.shape[1], np.nan)
    for b in range(L.shape[1]):
        if ok[:, b].any():
            out[b] = np.median(L[ok[:, b], b])
    return out


def _cloud(sample):
    pts, _ = depth_to_pointcloud(sample.depth, sample.mask)
    return pts


def _fit_frame(tree, skel, pred, camera, lam, maxiter, seed):
    w = compute_weights(skel, pred.j3d_cam, rest_bone_lengths(skel), pred.predicted)
    return fit(tree, pred.j3d_cam, pred.j2d_full, camera, w, lam, skeleton=skel, seed=seed,
               maxiter=maxiter)


def estimate_shape(samples, predictions, tree: LatentTree, model: ShapeModel,
                   config: PipelineConfig) -> dict:
    """Scale from the cloud, shape from bone lengths, rough fit, alignment, rescale, reshape."""
    template = model.template
    mean_pred = predict_shape(model, model.mean[slice(*model.slices["bones"])])
    # scale initialisation: robust height of the world-space cloud vs the mean mesh
    scales = []
    for s in samples:
        cloud = s.camera.camera_to_world(_cloud(s))
        if len(cloud) >= 100:
            scales.append(estimate_scale(cloud, mean_pred.mesh))
    s0 = float(np.median(scales)) if scales else 1.0
    measured = sequence_bone_lengths(template, predictions)
    target = np.where(np.isfinite(measured), measured, s0 * mean_pred.bone_lengths)
    first = predict_shape(model, target)
    # rough fit + alignment on a few frames, then rescale
    idx = np.unique(np.linspace(0, len(samples) - 1, min(config.rough_frames, len(samples))).astype(int))
    ratios = []
    for i in idx:
        s, p = samples[i], predictions[i]
        try:
            r = _fit_frame(tree, first.skeleton, p, s.camera, config.lambda2d, 50, config.seed)
        except FitError:
            continue
        verts = skin_mesh(first.mesh, first.skeleton, r.pose)
        cloud = _cloud(s)
        if len(cloud) < 100:
            continue
        ref = refine_root(verts, first.mesh.triangles, cloud, policy=config.match_policy)
        aligned = ref.apply(verts)
        # compare height extents of the cloud and of the mesh vertices it lands on
        _, near = cKDTree(aligned).query(cloud)
        up = s.camera.R @ np.array([0.0, 1.0, 0.0])
        ext_c = np.diff(np.percentile(cloud @ up, [10, 90]))[0]
        ext_m = np.diff(np.percentile(aligned[near] @ up, [10, 90]))[0]
        if ext_m > 0:
            ratios.append(ext_c / ext_m)
    s1 = float(np.median(ratios)) if ratios else 1.0
    final = predict_shape(model, first.bone_lengths * s1)
    log.info("event=shape scale_init=%.4f scale_refine=%.4f", s0, s1)
    return {"prediction": final, "scale_init": s0, "scale_refine": s1,
            "measured_lengths": measured, "first": first}


def run_pipeline(config: PipelineConfig, samples, tree: LatentTree, skeleton: Skeleton = None,
                 mesh: SkinnedMesh = None, shape_model: ShapeModel = None,
                 predictor: JointPredictor = None) -> PipelineResult:
    """Fit one camera's sequence of samples.

    With ``config.known_shape`` the given ``skeleton``/``mesh`` are used and
    no shape model is consulted.
    """
    samples = list(samples)
    if not samples:
        raise PipelineError("empty sequence")
    if config.max_frames:
        samples = samples[:config.max_frames]
    predictor = predictor or config.make_predictor()
    predictions = [predictor(s) for s in samples]
    shape_info = {}
    if config.known_shape:
        skel = skeleton or samples[0].skeleton
    else:
        if shape_model is None:
            raise PipelineError("unknown-shape run needs a shape model")
        est = estimate_shape(samples, predictions, tree, shape_model, config)
        skel, mesh = est["prediction"].skeleton, est["prediction"].mesh
        shape_info = {"scale_init": est["scale_init"], "scale_refine": est["scale_refine"],
                      "coefficients": est["prediction"].coefficients.tolist(),
                      "bone_lengths": est["prediction"].bone_lengths.tolist()}
    poses, joints, failures, losses, frames = [], [], [], [], []
    for s, p in zip(samples, predictions):
        seed = int(np.random.SeedSequence([config.seed, s.frame]).generate_state(1)[0])
        try:
            r = _fit_frame(tree, skel, p, s.camera, config.lambda2d, config.maxiter, seed)
        except (FitError, np.linalg.LinAlgError) as e:
            log.warning("event=fit_failed frame=%d reason=%r", s.frame, str(e))
            failures.append({"frame": s.frame, "reason": str(e)})
            poses.append(None)
            joints.append(raw_joints(p))
        else:
            poses.append(r.pose)
            joints.append(r.joints)
            losses.append(r.stage_losses)
        frames.append(s.frame)
        log.info("event=frame frame=%d loss=%s", s.frame,
                 "nan" if poses[-1] is None else f"{losses[-1][-1]:.3f}")
    joints = np.stack(joints)
    gt = np.stack([s.j3d_cam for s in samples])
    areas = [float(s.mask.sum()) for s in samples]
    cam = samples[0].camera
    report = group_report(joints, gt, skel, cam, None, np.stack([s.j2d_full for s in samples]),
                          areas)
    raw = np.stack([raw_joints(p) for p in predictions])
    raw2d = np.stack([np.where(np.isfinite(p.j2d_full), p.j2d_full, 0.0) for p in predictions])
    raw_report = group_report(raw, gt, skel, cam, raw2d, np.stack([s.j2d_full for s in samples]),
                              areas)
    result = PipelineResult(frames, poses, joints, predictions, report, raw_report, skel, mesh,
                            shape_info, failures, losses)
    if config.overlay_dir:
        write_overlays(config.overlay_dir, samples, joints, skel)
    return result


# ---------------------------------------------------------------------------
# Overlays

SIDE_COLOURS = {"L": (230, 60, 40), "R": (40, 110, 230), "C": (60, 200, 60)}


def joint_side(name: str) -> str:
    if name[:2] in ("FL", "BL") or name.startswith("L_"):
        return "L"
    if name[:2] in ("FR", "BR") or name.startswith("R_"):
        return "R"
    return "C"


def draw_skeleton(rgb, uv, skeleton: Skeleton) -> np.ndarray:
    """Draw bones as sampled line segments; left limbs red, right blue, midline green."""
    h, w = rgb.shape[:2]
    for c in range(1, skeleton.n_joints):
        p = skeleton.parents[c]
        a, b = uv[p], uv[c]
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            continue
        n = int(np.ceil(np.abs(b - a).max())) + 1
        t = np.linspace(0.0, 1.0, max(n, 2))[:, None]
        pts = np.rint(a + t * (b - a)).astype(int)
        ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        rgb[pts[ok, 1], pts[ok, 0]] = SIDE_COLOURS[joint_side(skeleton.names[c])]
    return rgb


def write_overlays(out_dir, samples, joints, skeleton: Skeleton) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, j in zip(samples, joints):
        r = s.depth.raster
        valid = r > 0
        grey = np.zeros_like(r)
        if valid.any():
            lo, hi = r[valid].min(), r[valid].max()
            grey[valid] = 255 - 200 * (r[valid] - lo) / max(hi - lo, 1e-9)
        rgb = np.repeat(grey[..., None], 3, axis=2).astype(np.uint8)
        uv, _ = project(s.camera, j)
        path = out / f"overlay_{s.frame:06d}.ppm"
        write_ppm(path, draw_skeleton(rgb, uv, skeleton))
        paths.append(path)
    return paths


def poses_to_world(poses, camera: CameraModel) -> list:
    """Re-express camera-space fitted poses in the world frame."""
    Rc = camera.R
    out = []
    for p in poses:
        if p is None:
            out.append(None)
            continue
        R = Rc.T @ quat.to_matrix(p.root_rotation)
        out.append(p.replace(root_rotation=quat.from_matrix(R),
                             root_translation=camera.camera_to_world(p.root_translation)))
    return out
