"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 failure while running.
Logs go to stderr as ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

log = logging.getLogger("quadpose.cli")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InvalidInput(Exception):
    pass


@contextmanager
def validating(what: str):
    """Turn any error raised while loading inputs into :class:`InvalidInput`."""
    try:
        yield
    except InvalidInput:
        raise
    except Exception as e:      # noqa: BLE001 - anything that fails here is bad input
        raise InvalidInput(f"{what}: {e}") from e


def _sequence(dataset, camera_index: int):
    samples = sorted((s for s in dataset.samples if s.camera_index == camera_index
                      and not s.mirrored and not s.fixed_root), key=lambda s: s.frame)
    if not samples:
        raise InvalidInput(f"no samples for camera {camera_index}")
    return samples


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1))


def _load_predictions(path):
    from .pipeline import Prediction
    d = json.loads(Path(path).read_text())
    return d, {int(e["frame"]): Prediction.from_dict(e["prediction"]) for e in d["frames"]}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    from .gait import GaitStyle, gait_sequence
    from .surrogate import DogShape, make_dog
    from .synthgen import NoiseConfig, RenderJob, build_dataset, camera_rig, write_dataset
    with validating("synth arguments"):
        if args.frames < 1 or args.cameras < 1:
            raise ValueError("--frames and --cameras must be positive")
        rng = np.random.default_rng(args.dog_seed)
        dog = make_dog(DogShape.random(rng) if args.dog_seed is not None else DogShape(), rng)
        style = GaitStyle.random(np.random.default_rng(args.seed), args.gait) if args.vary_style \
            else GaitStyle(kind=args.gait)
        poses = gait_sequence(dog.skeleton, args.frames, style, cycles=args.cycles, seed=args.seed,
                              jitter=args.jitter)
        cams = camera_rig(args.cameras, [0.0, 300.0, 0.0], radius=args.radius, seed=args.seed)
    job = RenderJob(dog.skeleton, dog.mesh, poses, cams, NoiseConfig(args.noise_mm, args.quant_mm),
                    mirror=not args.no_mirror, fixed_root=args.fixed_root, seed=args.seed)
    samples, skipped = build_dataset(job)
    write_dataset(args.out, job, samples, skipped, heatmaps=not args.no_heatmaps)
    log.info("event=synth out=%s samples=%d skipped=%d", args.out, len(samples), len(skipped))


def cmd_train_prior(args) -> None:
    from .prior.tree import dedup_poses, train_tree
    from .skeleton import load_poses_jsonl, load_skeleton, mirror_pose
    with validating("training poses"):
        skel = load_skeleton(args.skeleton) if args.skeleton else load_skeleton()
        poses = load_poses_jsonl(args.poses)
        if len(poses) < 2:
            raise ValueError("need at least two poses")
    if args.dedup > 0:
        poses, kept = dedup_poses(poses, skel, args.dedup, mirror=not args.no_mirror)
        log.info("event=dedup threshold=%g kept=%d", args.dedup, len(kept))
    if not args.no_mirror:
        poses = poses + [mirror_pose(skel, p) for p in poses]
    tree = train_tree(poses, skel, maxiter=args.maxiter)
    tree.save(args.out)
    log.info("event=train_prior out=%s frames=%d dims=%s", args.out, len(poses),
             json.dumps(tree.dims, separators=(",", ":")))


def cmd_fit_shape(args) -> None:
    from .io import save_mesh
    from .pipeline import sequence_bone_lengths
    from .shape import ShapeModel, build_shape_model, predict_shape
    from .skeleton import save_skeleton
    from .surrogate import surrogate_corpus
    if args.build:
        with validating("shape corpus"):
            if args.build < 2:
                raise ValueError("--build needs at least 2 dogs")
        corpus = surrogate_corpus(args.build, seed=args.seed)
        model = build_shape_model((d.mesh, d.skeleton, d.neutral_rotations) for d in corpus)
        model.save(args.model)
        log.info("event=shape_model out=%s dogs=%d rank=%d", args.model, args.build, model.rank)
    if args.predictions is None:
        return
    with validating("shape inputs"):
        model = ShapeModel.load(args.model)
        _, preds = _load_predictions(args.predictions)
        if args.out_dir is None:
            raise ValueError("--out-dir is required with --predictions")
    lengths = sequence_bone_lengths(model.template, [preds[f] for f in sorted(preds)])
    mean = model.mean[slice(*model.slices["bones"])]
    pred = predict_shape(model, np.where(np.isfinite(lengths), lengths, mean), args.components)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_skeleton(pred.skeleton, out / "skeleton.json")
    save_mesh(pred.mesh, out / "mesh.obj", pred.skeleton)
    _write_json(out / "shape.json", {"coefficients": pred.coefficients.tolist(),
                                     "bone_lengths": pred.bone_lengths.tolist()})
    log.info("event=fit_shape out=%s", out)


def cmd_predict(args) -> None:
    from .heatmap import NormalizedJoints, encode_heatmaps, write_heatmaps
    from .pipeline import PipelineConfig
    from .synthgen import load_dataset
    with validating("predict inputs"):
        cfg = PipelineConfig(predictor=args.predictor, sigma_px=args.sigma_px,
                             sigma_depth=args.sigma_depth, occlusion_px=args.occlusion_px,
                             seed=args.seed)
        if min(args.sigma_px, args.sigma_depth) < 0:
            raise ValueError("noise sigmas must be non-negative")
        samples = _sequence(load_dataset(args.dataset), args.camera)
    predictor = cfg.make_predictor()
    frames = []
    for s in samples:
        p = predictor(s)
        frames.append({"frame": s.frame, "key": s.key, "prediction": p.to_dict()})
        if args.heatmap_out and p.j3d256 is not None:
            stack = encode_heatmaps(NormalizedJoints(p.j3d256), s.skeleton)
            Path(args.heatmap_out).mkdir(parents=True, exist_ok=True)
            write_heatmaps(stack, Path(args.heatmap_out) / f"{s.key}.qphm")
    _write_json(args.out, {"camera_index": args.camera, "predictor": cfg.predictor,
                           "frames": frames})
    log.info("event=predict out=%s frames=%d", args.out, len(frames))


def cmd_refine(args) -> None:
    from . import quat
    from .align import POLICIES, refine_root
    from .camera import depth_to_pointcloud
    from .pipeline import _fit_frame, poses_to_world
    from .prior.fit import FitError
    from .prior.tree import LatentTree
    from .skeleton import load_skeleton, save_poses_jsonl, skin_mesh
    from .synthgen import load_dataset
    with validating("refine inputs"):
        if args.lambda2d < 0:
            raise ValueError("--lambda2d must be non-negative")
        if args.match_policy not in POLICIES:
            raise ValueError(f"--match-policy must be one of {POLICIES}")
        tree = LatentTree.load(args.prior)
        meta, preds = _load_predictions(args.predictions)
        ds = load_dataset(args.dataset)
        samples = {s.frame: s for s in _sequence(ds, meta["camera_index"])}
        skel = load_skeleton(args.skeleton) if args.skeleton else ds.skeleton
    poses, joints, failures = [], [], []
    for f in sorted(preds):
        s = samples.get(f)
        if s is None:
            failures.append({"frame": f, "reason": "frame not in dataset"})
            continue
        try:
            r = _fit_frame(tree, skel, preds[f], s.camera, args.lambda2d, args.maxiter, args.seed)
        except FitError as e:
            log.warning("event=fit_failed frame=%d reason=%r", f, str(e))
            failures.append({"frame": f, "reason": str(e)})
            continue
        pose, j = r.pose, r.joints
        if args.align:
            cloud, _ = depth_to_pointcloud(s.depth, s.mask)
            ref = refine_root(skin_mesh(ds.mesh, skel, pose), ds.mesh.triangles, cloud,
                              policy=args.match_policy)
            R = ref.rotation @ quat.to_matrix(pose.root_rotation)
            pose = pose.replace(root_rotation=quat.from_matrix(R),
                                root_translation=ref.apply(pose.root_translation))
            j = ref.apply(j)
        poses.append(poses_to_world([pose], s.camera)[0])
        joints.append({"frame": f, "j3d_cam": j.tolist(), "stage_losses": r.stage_losses})
        log.info("event=refine frame=%d loss=%.4f", f, r.loss)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_poses_jsonl(poses, out / "poses.jsonl")
    _write_json(out / "joints.json", {"camera_index": meta["camera_index"], "frames": joints,
                                      "failures": failures})
    if not joints:
        raise RuntimeError("every frame failed to fit")


def cmd_eval(args) -> None:
    from .metrics import group_report
    from .synthgen import load_dataset
    with validating("eval inputs"):
        d = json.loads(Path(args.joints).read_text())
        ds = load_dataset(args.dataset)
        samples = {s.frame: s for s in _sequence(ds, d["camera_index"])}
        rows = []
        for e in d["frames"]:
            j = e["j3d_cam"] if "j3d_cam" in e else e["prediction"]["j3d_cam"]
            rows.append((samples[int(e["frame"])], np.array(j, float)))
        if not rows:
            raise ValueError("no frames to evaluate")
    gt = np.stack([s.j3d_cam for s, _ in rows])
    pred = np.stack([j for _, j in rows])
    report = group_report(pred, gt, ds.skeleton, rows[0][0].camera,
                          gt2d=np.stack([s.j2d_full for s, _ in rows]),
                          areas=[float(s.mask.sum()) for s, _ in rows])
    if args.out:
        Path(args.out).write_text(report.to_json(indent=1))
    print(report.table())


def cmd_pipeline(args) -> None:
    from .pipeline import PipelineConfig, poses_to_world, run_pipeline
    from .prior.tree import LatentTree
    from .shape import ShapeModel
    from .skeleton import load_skeleton, save_poses_jsonl
    from .synthgen import load_dataset
    with validating("pipeline configuration"):
        overrides = {"prior_path": args.prior, "shape_model_path": args.shape_model,
                     "lambda2d": args.lambda2d, "match_policy": args.match_policy,
                     "predictor": args.predictor, "sigma_px": args.sigma_px,
                     "sigma_depth": args.sigma_depth, "occlusion_px": args.occlusion_px,
                     "seed": args.seed, "camera_index": args.camera,
                     "max_frames": args.max_frames, "skeleton_path": args.skeleton}
        if args.unknown_shape:
            overrides["known_shape"] = False
        cfg = PipelineConfig.from_json(args.config, **overrides)
        out = Path(args.out_dir)
        cfg.overlay_dir = cfg.overlay_dir or str(out / "overlays")
        cfg.validate()
        ds = load_dataset(args.dataset)
        samples = _sequence(ds, cfg.camera_index)
        tree = LatentTree.load(cfg.prior_path)
        model = None if cfg.known_shape else ShapeModel.load(cfg.shape_model_path)
        skel = load_skeleton(cfg.skeleton_path) if cfg.skeleton_path else ds.skeleton
    result = run_pipeline(cfg, samples, tree, skel, ds.mesh, model)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "summary.json", result.summary())
    (out / "report.json").write_text(result.report.to_json(indent=1))
    (out / "report.txt").write_text("refined\n" + result.report.table() + "\n\nraw\n"
                                    + result.raw_report.table() + "\n")
    save_poses_jsonl([p for p in poses_to_world(result.poses, samples[0].camera) if p is not None],
                     out / "poses.jsonl")
    print(result.report.table())
    if len(result.failures) == len(samples):
        raise RuntimeError("every frame failed to fit")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadpose", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a surrogate dog sequence to a dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--cycles", type=float, default=2.0)
    p.add_argument("--gait", choices=("walk", "trot"), default="walk")
    p.add_argument("--vary-style", action="store_true", help="randomize the gait style")
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--radius", type=float, default=2500.0, help="camera ring radius (mm)")
    p.add_argument("--noise-mm", type=float, default=0.0)
    p.add_argument("--quant-mm", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dog-seed", type=int, default=None, help="random dog shape (default: mean dog)")
    p.add_argument("--no-mirror", action="store_true")
    p.add_argument("--fixed-root", action="store_true")
    p.add_argument("--no-heatmaps", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-prior", help="train the hierarchical pose prior on poses")
    p.add_argument("--poses", required=True, help="poses.jsonl")
    p.add_argument("--skeleton")
    p.add_argument("--out", required=True)
    p.add_argument("--dedup", type=float, default=0.1, help="dissimilarity threshold, 0 disables")
    p.add_argument("--no-mirror", action="store_true")
    p.add_argument("--maxiter", type=int, default=500)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("fit-shape", help="build a shape model and/or predict a dog's shape")
    p.add_argument("--model", required=True, help="shape model archive (read, or written by --build)")
    p.add_argument("--build", type=int, default=0, help="build from N surrogate dogs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predictions", help="predictions JSON to take bone lengths from")
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_fit_shape)

    p = sub.add_parser("predict", help="run a joint predictor over one camera of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--predictor", choices=("oracle", "heatmap"), default="oracle")
    p.add_argument("--sigma-px", type=float, default=0.0)
    p.add_argument("--sigma-depth", type=float, default=0.0)
    p.add_argument("--occlusion-px", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap-out", help="also write heatmap stacks of the predictions here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", help="fit the pose prior to predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--skeleton", help="known skeleton (default: the dataset's)")
    p.add_argument("--lambda2d", type=float, default=1e-3)
    p.add_argument("--align", action="store_true",
                   help="refine the root by aligning the skinned mesh to the depth points")
    p.add_argument("--match-policy", default="mutual-once", help="correspondence policy for --align")
    p.add_argument("--maxiter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score joints against dataset ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--joints", required=True, help="joints.json from refine, or a predictions JSON")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="predict, fit shape and pose, and report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON config; flags override its keys")
    p.add_argument("--prior")
    p.add_argument("--shape-model")
    p.add_argument("--skeleton")
    p.add_argument("--unknown-shape", action="store_true")
    p.add_argument("--predictor", choices=("oracle", "heatmap"))
    p.add_argument("--sigma-px", type=float)
    p.add_argument("--sigma-depth", type=float)
    p.add_argument("--occlusion-px", type=int)
    p.add_argument("--lambda2d", type=float)
    p.add_argument("--match-policy")
    p.add_argument("--camera", type=int)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        args.func(args)
    except InvalidInput as e:
        log.error("event=invalid_input command=%s reason=%r", args.command, str(e))
        return EXIT_INVALID
    except Exception as e:      # noqa: BLE001
        log.error("event=failed command=%s reason=%r", args.command, str(e))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
