"""Command-line interface: every pipeline as a subcommand over file inputs.

Results are deterministic functions of (inputs, flags, seed) and are
emitted as JSON to --out (atomically) or standard output. Exit codes:
0 success, 2 validation error, 3 computation error, 64 unknown subcommand.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from . import losses, metrics, motion, planning, tensorio
from .errors import ComputationError, DrivekitError, ValidationError
from .geometry import FrameSequence, normalize_geometry

USAGE = """usage: drivekit <subcommand> [options]

subcommands:
  eval-depth       AbsRel/RMSE after scale-shift alignment (--pred, --gt)
  eval-traj        ATE and relative rotation/translation errors (--pred, --gt)
  eval-seg         PA / mIoU / mDice / FW-IoU over label maps (--pred, --gt)
  static-baseline  score the last observed GT frame against future frames (--gt)
  gen-motion-masks pseudo ground-truth motion masks (--manifest, --dest)
  loss-check       finite-difference verification of loss gradients (--seed)
  cluster-anchors  seeded k-means trajectory anchors (--manifest, --k, --seed)
  decode-plan      argmax-mode plan decoding (--manifest)
  score-pdms       driver-model scenario scoring (--manifest, --config)
  normalize        rescale a sequence to unit mean point norm (--manifest, --dest)

common flags: --out FILE, --config FILE, --seed N, --json (compact output)
"""


def _num_workers() -> int:
    default = min(4, os.cpu_count() or 1)
    env = os.environ.get("LFG_NUM_WORKERS")
    if env is not None:
        try:
            return max(1, min(default, int(env)))
        except ValueError as e:
            raise ValidationError("bad_config", f"LFG_NUM_WORKERS must be an integer, got '{env}'") from e
    return default


def _parser(name: str, **flags) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=f"drivekit {name}")
    for flag, kwargs in flags.items():
        p.add_argument(f"--{flag}", **kwargs)
    p.add_argument("--out", default=None, help="write result JSON here instead of stdout")
    p.add_argument("--json", action="store_true", help="compact single-line JSON output")
    return p


def _load_manifests(path: str) -> list[tensorio.SequenceManifest]:
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".json")
        )
        if not files:
            raise ValidationError("bad_manifest", f"directory {path} contains no manifest JSON files")
        return [tensorio.load_manifest(f) for f in files]
    return [tensorio.load_manifest(path)]


def _paired_manifests(pred_path: str, gt_path: str):
    pred = {m.sequence_id: m for m in _load_manifests(pred_path)}
    gt = {m.sequence_id: m for m in _load_manifests(gt_path)}
    if set(pred) != set(gt):
        raise ValidationError(
            "manifest_mismatch",
            f"prediction and ground-truth sequence ids differ: {sorted(set(pred) ^ set(gt))}",
        )
    return [(pred[sid], gt[sid]) for sid in sorted(pred)]


def _require_modality(manifest: tensorio.SequenceManifest, modality: str) -> None:
    if not manifest.has(modality):
        raise ValidationError(
            "missing_modality", f"sequence '{manifest.sequence_id}' lacks the '{modality}' modality"
        )


def _map_sequences(fn, items: list) -> list:
    workers = _num_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _aggregate(per_sequence: list[dict], keys: tuple) -> dict:
    agg: dict = {"num_sequences": len(per_sequence), "spread": "std over sequences"}
    for key in keys:
        vals = np.array([entry[key] for entry in per_sequence])
        agg[f"{key}_mean"] = float(vals.mean())
        agg[f"{key}_std"] = float(vals.std())
    return agg


def _cmd_eval_depth(argv: list[str]):
    p = _parser("eval-depth", pred={"required": True}, gt={"required": True})
    args = p.parse_args(argv)

    def one(pair):
        pm, gm = pair
        _require_modality(pm, "depth")
        _require_modality(gm, "depth")
        absrels, rmses = [], []
        for i in range(min(pm.num_frames, gm.num_frames)):
            pred = tensorio.read_depth_map(pm.frame_path("depth", i))
            gt = tensorio.read_depth_map(gm.frame_path("depth", i))
            _, _, aligned = metrics.align_depth_scale_shift(pred, gt)
            absrel, rmse = metrics.depth_metrics(aligned, gt)
            absrels.append(absrel)
            rmses.append(rmse)
        return {
            "sequence_id": pm.sequence_id,
            "num_frames": len(absrels),
            "absrel": float(np.mean(absrels)),
            "rmse_m": float(np.mean(rmses)),
        }

    per_seq = _map_sequences(one, _paired_manifests(args.pred, args.gt))
    result = {"per_sequence": per_seq, "aggregate": _aggregate(per_seq, ("absrel", "rmse_m"))}
    return result, 0, args


def _cmd_eval_traj(argv: list[str]):
    p = _parser("eval-traj", pred={"required": True}, gt={"required": True})
    p.add_argument("--rigid", action="store_true", help="rigid (no-scale) alignment")
    args = p.parse_args(argv)

    def one(pair):
        pm, gm = pair
        _require_modality(pm, "pose")
        _require_modality(gm, "pose")
        n = min(pm.num_frames, gm.num_frames)
        pred = [tensorio.read_pose(pm.frame_path("pose", i)) for i in range(n)]
        gt = [tensorio.read_pose(gm.frame_path("pose", i)) for i in range(n)]
        scores = metrics.trajectory_scores(pred, gt, with_scale=not args.rigid)
        return {"sequence_id": pm.sequence_id, "num_frames": n, **scores.to_json_dict()}

    per_seq = _map_sequences(one, _paired_manifests(args.pred, args.gt))
    result = {
        "per_sequence": per_seq,
        "aggregate": _aggregate(per_seq, ("ate_m", "rot_deg", "trans_m")),
    }
    return result, 0, args


def _cmd_eval_seg(argv: list[str]):
    p = _parser("eval-seg", pred={"required": True}, gt={"required": True})
    args = p.parse_args(argv)

    def one(pair):
        pm, gm = pair
        _require_modality(pm, "label")
        _require_modality(gm, "label")
        pooled = np.zeros((metrics.NUM_CLASSES, metrics.NUM_CLASSES), dtype=np.int64)
        n = min(pm.num_frames, gm.num_frames)
        for i in range(n):
            pred = tensorio.read_label_map(pm.frame_path("label", i))
            gt = tensorio.read_label_map(gm.frame_path("label", i))
            pooled += metrics.confusion_matrix(pred, gt)
        scores = metrics.scores_from_confusion(pooled)
        return {"sequence_id": pm.sequence_id, "num_frames": n, **scores.to_json_dict()}

    per_seq = _map_sequences(one, _paired_manifests(args.pred, args.gt))
    result = {
        "per_sequence": per_seq,
        "aggregate": _aggregate(per_seq, ("pa", "miou", "mdice", "fwiou")),
    }
    return result, 0, args


def _cmd_static_baseline(argv: list[str]):
    p = _parser("static-baseline", gt={"required": True})
    args = p.parse_args(argv)

    def one(manifest):
        _require_modality(manifest, "label")
        maps = [tensorio.read_label_map(manifest.frame_path("label", i)) for i in range(manifest.num_frames)]
        scores = metrics.static_baseline(maps, manifest.num_observed)
        return {
            "sequence_id": manifest.sequence_id,
            "split_index": manifest.num_observed,
            **scores.to_json_dict(),
        }

    manifests = sorted(_load_manifests(args.gt), key=lambda m: m.sequence_id)
    per_seq = _map_sequences(one, manifests)
    result = {
        "per_sequence": per_seq,
        "aggregate": _aggregate(per_seq, ("pa", "miou", "mdice", "fwiou")),
    }
    return result, 0, args


def _load_tracks(path: str, num_frames: int) -> list[motion.InstanceTrack]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ValidationError("missing_file", f"cannot read tracks {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError("bad_manifest", f"{path}: invalid JSON ({e})") from e
    root = os.path.dirname(os.path.abspath(path))
    tracks = []
    for entry in doc.get("tracks", []):
        masks = np.stack([tensorio.read_mask(os.path.join(root, rel)) for rel in entry["mask_paths"]])
        track = motion.InstanceTrack(
            instance_id=int(entry["instance_id"]),
            keypoints=np.asarray(entry["keypoints"], dtype=np.float64),
            visibility=np.asarray(entry["visibility"], dtype=bool),
            masks=masks,
        )
        if track.num_frames != num_frames:
            raise ValidationError(
                "length_mismatch",
                f"instance {track.instance_id} covers {track.num_frames} frames, expected {num_frames}",
            )
        tracks.append(track)
    return tracks


def _cmd_gen_motion_masks(argv: list[str]):
    p = _parser(
        "gen-motion-masks",
        manifest={"required": True},
        config={"default": None},
        dest={"required": True, "help": "directory for the motion mask tensors"},
    )
    args = p.parse_args(argv)
    manifest = tensorio.load_manifest(args.manifest)
    _require_modality(manifest, "point_map")
    if manifest.tracks is None:
        raise ValidationError("bad_manifest", f"sequence '{manifest.sequence_id}' lists no tracks file")
    cfg_values = cfgmod.load_config(args.config)
    cfg = cfgmod.motion_config_from_config(cfg_values)

    point_maps = [
        tensorio.read_point_map(manifest.frame_path("point_map", i)) for i in range(manifest.num_frames)
    ]
    poses = None
    if bool(cfg_values.get("stabilize_with_poses", False)):
        _require_modality(manifest, "pose")
        poses = [tensorio.read_pose(manifest.frame_path("pose", i)) for i in range(manifest.num_frames)]
    tracks = _load_tracks(os.path.join(manifest.root, manifest.tracks), manifest.num_frames)

    motions = motion.analyze_tracks(tracks, point_maps, cfg, poses)
    ordered = sorted(tracks, key=lambda tr: tr.instance_id)
    labels = [m.dynamic for m in motions]
    shape = (point_maps[0].height, point_maps[0].width)
    masks = motion.rasterize_motion_masks(ordered, labels, manifest.num_frames, shape)

    os.makedirs(args.dest, exist_ok=True)
    mask_paths = []
    for i, mask in enumerate(masks):
        rel = f"motion_{i:04d}.bin"
        tensorio.write_mask(mask.values.astype(np.uint8), os.path.join(args.dest, rel))
        mask_paths.append(rel)
    result = {
        "sequence_id": manifest.sequence_id,
        "mask_paths": mask_paths,
        **motion.motion_summary(motions, cfg),
    }
    return result, 0, args


def _cmd_loss_check(argv: list[str]):
    p = _parser("loss-check", seed={"type": int, "default": 0})
    args = p.parse_args(argv)
    report = losses.gradient_check_report(args.seed)
    return report, 0 if report["pass"] else 3, args


def _cmd_cluster_anchors(argv: list[str]):
    p = _parser(
        "cluster-anchors",
        manifest={"required": True, "help": "JSON file with a 'futures' array of Nx8x2 waypoints"},
        k={"type": int, "default": 20},
        seed={"type": int, "default": 0},
    )
    args = p.parse_args(argv)
    with open(args.manifest, "r", encoding="utf-8") as f:
        doc = json.load(f)
    futures = np.asarray(doc.get("futures", []), dtype=np.float64)
    if futures.ndim != 3 or futures.shape[1:] != (planning.NUM_WAYPOINTS, 2):
        raise ValidationError(
            "shape_mismatch", f"futures must be (N, {planning.NUM_WAYPOINTS}, 2), got {futures.shape}"
        )
    fit = planning.kmeans_fit(futures.reshape(futures.shape[0], -1), args.k, args.seed)
    anchors = planning.AnchorSet(fit.centroids.reshape(args.k, planning.NUM_WAYPOINTS, 2), seed=args.seed)
    result = {
        "k": args.k,
        "seed": args.seed,
        "anchors": anchors.anchors,
        "objective_history": fit.objective_history,
    }
    return result, 0, args


def _cmd_decode_plan(argv: list[str]):
    p = _parser(
        "decode-plan",
        manifest={"required": True, "help": "JSON file with 'anchors', 'confidence', 'offsets'"},
    )
    args = p.parse_args(argv)
    with open(args.manifest, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "anchors_file" in doc:
        with open(os.path.join(os.path.dirname(os.path.abspath(args.manifest)), doc["anchors_file"])) as f:
            doc["anchors"] = json.load(f)["anchors"]
    anchors = planning.AnchorSet(np.asarray(doc["anchors"], dtype=np.float64))
    pred = planning.ModePrediction(
        confidence=np.asarray(doc["confidence"], dtype=np.float64),
        offsets=np.asarray(doc["offsets"], dtype=np.float64),
    )
    plan, mode = planning.decode_plan(anchors, pred)
    return {"mode": mode, "waypoints": plan.waypoints}, 0, args


def _scene_from_dict(doc: dict) -> planning.SceneSpec:
    agents = [
        planning.Agent(
            center=np.asarray(a["center"], dtype=np.float64),
            heading=float(a.get("heading", 0.0)),
            length=float(a["length"]),
            width=float(a["width"]),
            velocity=np.asarray(a.get("velocity", (0.0, 0.0)), dtype=np.float64),
            category=a.get("category", "vehicle"),
        )
        for a in doc.get("agents", [])
    ]
    return planning.SceneSpec(
        drivable_area=np.asarray(doc["drivable_area"], dtype=np.float64),
        agents=agents,
        ego_length=float(doc["ego_length"]),
        ego_width=float(doc["ego_width"]),
        centerline=np.asarray(doc["centerline"], dtype=np.float64),
    )


def _cmd_score_pdms(argv: list[str]):
    p = _parser(
        "score-pdms",
        manifest={"required": True, "help": "JSON file with a 'scenarios' array"},
        config={"default": None},
    )
    args = p.parse_args(argv)
    with open(args.manifest, "r", encoding="utf-8") as f:
        doc = json.load(f)
    scenarios = doc.get("scenarios", [])
    if not scenarios:
        raise ValidationError("bad_manifest", f"{args.manifest}: no scenarios listed")
    cfg_values = cfgmod.load_config(args.config)

    entries = []
    for i, sc in enumerate(scenarios):
        scene = _scene_from_dict(sc["scene"])
        plan = planning.PlanTrajectory(np.asarray(sc["plan"], dtype=np.float64))
        overrides = {}
        if "safe_progress_upper_bound" in sc:
            overrides["safe_progress_upper_bound"] = float(sc["safe_progress_upper_bound"])
        cfg = cfgmod.rollout_config_from_config(cfg_values, **overrides)
        breakdown = planning.rollout_checks(plan, scene, cfg)
        entries.append({"name": str(sc.get("name", i)), **breakdown.to_json_dict()})
    result = {
        "scenarios": entries,
        "mean_pdms": float(np.mean([e["pdms"] for e in entries])),
    }
    return result, 0, args


def _cmd_normalize(argv: list[str]):
    p = _parser(
        "normalize",
        manifest={"required": True},
        dest={"required": True, "help": "directory for the rescaled tensors"},
    )
    args = p.parse_args(argv)
    manifest = tensorio.load_manifest(args.manifest)
    _require_modality(manifest, "point_map")
    point_maps = [
        tensorio.read_point_map(manifest.frame_path("point_map", i)) for i in range(manifest.num_frames)
    ]
    poses = None
    if manifest.has("pose"):
        poses = [tensorio.read_pose(manifest.frame_path("pose", i)) for i in range(manifest.num_frames)]
    seq = FrameSequence(
        num_observed=manifest.num_observed,
        num_future=manifest.num_future,
        point_maps=point_maps,
        poses=poses,
    )
    normalized, scale = normalize_geometry(seq)

    os.makedirs(args.dest, exist_ok=True)
    for i in range(manifest.num_frames):
        out_path = os.path.join(args.dest, manifest.paths["point_map"][i])
        os.makedirs(os.path.dirname(out_path), exist_ok=True)
        tensorio.write_point_map(normalized.point_maps[i], out_path)
        if poses is not None:
            pose_path = os.path.join(args.dest, manifest.paths["pose"][i])
            os.makedirs(os.path.dirname(pose_path), exist_ok=True)
            tensorio.write_pose(normalized.poses[i], pose_path)
    result = {"sequence_id": manifest.sequence_id, "scale": scale, "dest": args.dest}
    return result, 0, args


HANDLERS = {
    "eval-depth": _cmd_eval_depth,
    "eval-traj": _cmd_eval_traj,
    "eval-seg": _cmd_eval_seg,
    "static-baseline": _cmd_static_baseline,
    "gen-motion-masks": _cmd_gen_motion_masks,
    "loss-check": _cmd_loss_check,
    "cluster-anchors": _cmd_cluster_anchors,
    "decode-plan": _cmd_decode_plan,
    "score-pdms": _cmd_score_pdms,
    "normalize": _cmd_normalize,
}


def _emit_error(err: DrivekitError) -> None:
    sys.stderr.write(tensorio.dumps_json({"error": {"code": err.code, "message": err.message}}, indent=None))


def cli_dispatch(argv: list[str]) -> int:
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE)
        return 0
    handler = HANDLERS.get(argv[0])
    if handler is None:
        sys.stderr.write(f"error: unknown subcommand '{argv[0]}'\n\n{USAGE}")
        return 64
    try:
        result, code, args = handler(argv[1:])
    except ValidationError as e:
        _emit_error(e)
        return 2
    except ComputationError as e:
        _emit_error(e)
        return 3
    except (OSError, json.JSONDecodeError, KeyError) as e:
        _emit_error(ValidationError("bad_input", f"{type(e).__name__}: {e}"))
        return 2
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    indent = None if args.json else 2
    text = tensorio.dumps_json(result, indent=indent)
    if args.out:
        tensorio.write_text(text, args.out)
    else:
        sys.stdout.write(text)
    return code


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))
