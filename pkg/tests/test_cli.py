import json
import os

import numpy as np
import pytest

from drivekit.cli import cli_dispatch
from drivekit.geometry import PointMap, Pose
from drivekit.metrics import DepthMap, LabelMap
from drivekit.tensorio import (
    write_depth_map,
    write_label_map,
    write_mask,
    write_point_map,
    write_pose,
)
from helpers import rand_pose, rot_z


def _write_manifest(directory, sid, n, m, modalities):
    doc = {"sequence_id": sid, "num_observed": n, "num_future": m, "frame_rate_hz": 5}
    doc.update(modalities)
    path = directory / f"{sid}.json"
    path.write_text(json.dumps(doc))
    return str(path)


def _seg_sequence(directory, sid, maps):
    rels = []
    for i, lm in enumerate(maps):
        rel = f"{sid}_label_{i}.bin"
        write_label_map(lm, str(directory / rel))
        rels.append(rel)
    return _write_manifest(directory, sid, max(1, len(maps) - 1), min(1, len(maps) - 1), {"label": rels})


def _run(capsys, argv):
    code = cli_dispatch(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestDispatch:
    def test_unknown_subcommand_exits_64(self, capsys):
        code, _, err = _run(capsys, ["frobnicate"])
        assert code == 64
        assert "usage" in err

    def test_no_args_prints_usage(self, capsys):
        code, out, _ = _run(capsys, [])
        assert code == 0
        assert "subcommands" in out

    def test_missing_flag_exits_2(self, capsys):
        code, _, _ = _run(capsys, ["eval-seg"])
        assert code == 2


class TestEvalSeg:
    def test_identical_maps_score_one(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        maps = [LabelMap(rng.integers(0, 7, size=(6, 6))) for _ in range(3)]
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        pred = _seg_sequence(pred_dir, "s0", maps)
        gt = _seg_sequence(gt_dir, "s0", maps)
        code, out, _ = _run(capsys, ["eval-seg", "--pred", pred, "--gt", gt])
        assert code == 0
        doc = json.loads(out)
        entry = doc["per_sequence"][0]
        assert entry["pa"] == entry["miou"] == entry["mdice"] == entry["fwiou"] == 1.0

    def test_directory_mode_and_mismatch(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        maps = [LabelMap(rng.integers(0, 7, size=(4, 4))) for _ in range(2)]
        _seg_sequence(pred_dir, "a", maps)
        _seg_sequence(gt_dir, "b", maps)
        code, _, err = _run(capsys, ["eval-seg", "--pred", str(pred_dir), "--gt", str(gt_dir)])
        assert code == 2
        assert json.loads(err)["error"]["code"] == "manifest_mismatch"


class TestStaticBaseline:
    def test_static_scene(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        frame = LabelMap(rng.integers(0, 7, size=(5, 5)))
        gt = _seg_sequence(tmp_path, "s0", [frame] * 4)
        code, out, _ = _run(capsys, ["static-baseline", "--gt", gt])
        assert code == 0
        entry = json.loads(out)["per_sequence"][0]
        assert entry["pa"] == 1.0
        assert entry["split_index"] == 3


class TestEvalDepth:
    def test_affine_prediction_aligns_perfectly(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        pred_dir = tmp_path / "p"
        gt_dir = tmp_path / "g"
        pred_dir.mkdir()
        gt_dir.mkdir()
        pred_rels, gt_rels = [], []
        for i in range(2):
            gt_depth = rng.uniform(2, 20, size=(6, 6))
            write_depth_map(DepthMap(gt_depth, np.ones((6, 6), dtype=bool)), str(gt_dir / f"d{i}.bin"))
            write_depth_map(
                DepthMap(0.5 * gt_depth + 1.0, np.ones((6, 6), dtype=bool)), str(pred_dir / f"d{i}.bin")
            )
            pred_rels.append(f"d{i}.bin")
            gt_rels.append(f"d{i}.bin")
        pred = _write_manifest(pred_dir, "s0", 1, 1, {"depth": pred_rels})
        gt = _write_manifest(gt_dir, "s0", 1, 1, {"depth": gt_rels})
        code, out, _ = _run(capsys, ["eval-depth", "--pred", pred, "--gt", gt])
        assert code == 0
        doc = json.loads(out)
        # float32 storage rounds depths at ~1e-7 relative
        assert doc["per_sequence"][0]["absrel"] < 1e-6
        assert doc["per_sequence"][0]["rmse_m"] < 1e-5
        assert doc["aggregate"]["num_sequences"] == 1

    def test_constant_pred_is_computation_error(self, tmp_path, capsys):
        pred_dir = tmp_path / "p"
        gt_dir = tmp_path / "g"
        pred_dir.mkdir()
        gt_dir.mkdir()
        write_depth_map(DepthMap(np.full((4, 4), 3.0), np.ones((4, 4), dtype=bool)), str(pred_dir / "d0.bin"))
        write_depth_map(
            DepthMap(np.arange(1, 17, dtype=np.float64).reshape(4, 4), np.ones((4, 4), dtype=bool)),
            str(gt_dir / "d0.bin"),
        )
        pred = _write_manifest(pred_dir, "s0", 1, 0, {"depth": ["d0.bin"]})
        gt = _write_manifest(gt_dir, "s0", 1, 0, {"depth": ["d0.bin"]})
        code, _, err = _run(capsys, ["eval-depth", "--pred", pred, "--gt", gt])
        assert code == 3
        assert json.loads(err)["error"]["code"] == "singular_system"


class TestEvalTraj:
    def test_identical_trajectories(self, tmp_path, capsys):
        rng = np.random.default_rng(4)
        pred_dir = tmp_path / "p"
        gt_dir = tmp_path / "g"
        pred_dir.mkdir()
        gt_dir.mkdir()
        rels = []
        for i in range(4):
            pose = rand_pose(rng)
            write_pose(pose, str(pred_dir / f"p{i}.bin"))
            write_pose(pose, str(gt_dir / f"p{i}.bin"))
            rels.append(f"p{i}.bin")
        pred = _write_manifest(pred_dir, "s0", 3, 1, {"pose": rels})
        gt = _write_manifest(gt_dir, "s0", 3, 1, {"pose": rels})
        code, out, _ = _run(capsys, ["eval-traj", "--pred", pred, "--gt", gt])
        assert code == 0
        entry = json.loads(out)["per_sequence"][0]
        # float32 pose files leave ~1e-7 orthonormality error; arccos-trace
        # turns that into sqrt(2e-7) ~ 0.03 degrees of apparent rotation
        assert entry["ate_m"] < 1e-6
        assert entry["rot_deg"] < 0.05
        assert entry["trans_m"] < 1e-5


class TestNormalize:
    def test_scale_reported_and_applied(self, tmp_path, capsys):
        src = tmp_path / "src"
        src.mkdir()
        pts = np.zeros((2, 2, 3))
        pts[..., 0] = 4.0
        write_point_map(PointMap(pts, np.ones((2, 2), dtype=bool)), str(src / "pm0.bin"))
        write_pose(Pose(rot_z(0.2), np.array([2.0, 0.0, 0.0])), str(src / "pose0.bin"))
        manifest = _write_manifest(src, "s0", 1, 0, {"point_map": ["pm0.bin"], "pose": ["pose0.bin"]})
        dest = tmp_path / "out"
        code, out, _ = _run(capsys, ["normalize", "--manifest", manifest, "--dest", str(dest)])
        assert code == 0
        doc = json.loads(out)
        assert doc["scale"] == pytest.approx(4.0)
        from drivekit.tensorio import read_point_map, read_pose

        pm = read_point_map(str(dest / "pm0.bin"))
        assert np.allclose(np.linalg.norm(pm.points, axis=2), 1.0)
        pose = read_pose(str(dest / "pose0.bin"))
        assert pose.translation[0] == pytest.approx(0.5, abs=1e-7)

    def test_no_valid_points_exit_3(self, tmp_path, capsys):
        src = tmp_path / "src"
        src.mkdir()
        pts = np.full((2, 2, 3), np.nan)
        arr = pts.astype(np.float32)
        from drivekit.tensorio import write_tensor

        write_tensor(arr, str(src / "pm0.bin"))
        manifest = _write_manifest(src, "s0", 1, 0, {"point_map": ["pm0.bin"]})
        code, _, err = _run(capsys, ["normalize", "--manifest", manifest, "--dest", str(tmp_path / "o")])
        assert code == 3
        assert json.loads(err)["error"]["code"] == "no_valid_points"


class TestMotionMasks:
    def _scene(self, tmp_path):
        src = tmp_path / "scene"
        src.mkdir()
        frames = 3
        h, w = 5, 6
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        pm_rels = []
        for i in range(frames):
            pts = np.stack([xs, ys, np.ones_like(xs)], axis=2)
            write_point_map(PointMap(pts, np.ones((h, w), dtype=bool)), str(src / f"pm{i}.bin"))
            pm_rels.append(f"pm{i}.bin")
        mask_rels = []
        for i in range(frames):
            mask = np.zeros((h, w), dtype=np.uint8)
            mask[2, 2] = 1
            rel = f"mask{i}.bin"
            write_mask(mask, str(src / rel))
            mask_rels.append(rel)
        tracks = {
            "tracks": [
                {
                    "instance_id": 1,
                    "keypoints": [[[1.0 + 0.5 * t, 1.0]] for t in range(frames)],
                    "visibility": [[True]] * frames,
                    "mask_paths": mask_rels,
                }
            ]
        }
        (src / "tracks.json").write_text(json.dumps(tracks))
        doc = {
            "sequence_id": "s0",
            "num_observed": 2,
            "num_future": 1,
            "frame_rate_hz": 5,
            "point_map": pm_rels,
            "tracks": "tracks.json",
        }
        manifest = src / "s0.json"
        manifest.write_text(json.dumps(doc))
        return str(manifest)

    def test_generates_masks_and_summary(self, tmp_path, capsys):
        manifest = self._scene(tmp_path)
        dest = tmp_path / "masks"
        code, out, _ = _run(capsys, ["gen-motion-masks", "--manifest", manifest, "--dest", str(dest)])
        assert code == 0
        doc = json.loads(out)
        assert doc["instances"][0]["dynamic"] is True
        assert doc["instances"][0]["exceed_count"] == 2
        from drivekit.tensorio import read_mask

        m0 = read_mask(str(dest / doc["mask_paths"][0]))
        assert m0[2, 2]
        assert m0.sum() == 1

    def test_config_raises_threshold_to_static(self, tmp_path, capsys):
        manifest = self._scene(tmp_path)
        cfg = tmp_path / "motion.cfg"
        cfg.write_text("tau_motion = 0.9\n")
        dest = tmp_path / "masks2"
        code, out, _ = _run(
            capsys,
            ["gen-motion-masks", "--manifest", manifest, "--dest", str(dest), "--config", str(cfg)],
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["tau_motion"] == 0.9
        assert doc["instances"][0]["dynamic"] is False


class TestPlanningCommands:
    def test_cluster_then_decode(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        futures = rng.normal(size=(40, 8, 2)).tolist()
        fpath = tmp_path / "futures.json"
        fpath.write_text(json.dumps({"futures": futures}))
        anchors_out = tmp_path / "anchors.json"
        code, _, _ = _run(
            capsys,
            ["cluster-anchors", "--manifest", str(fpath), "--k", "4", "--seed", "7", "--out", str(anchors_out)],
        )
        assert code == 0
        doc = json.loads(anchors_out.read_text())
        assert len(doc["anchors"]) == 4
        hist = doc["objective_history"]
        assert all(hist[i + 1] <= hist[i] + 1e-9 for i in range(len(hist) - 1))

        conf = [0.0, 5.0, 1.0, 0.2]
        job = {
            "anchors_file": "anchors.json",
            "confidence": conf,
            "offsets": np.zeros((4, 8, 2)).tolist(),
        }
        jpath = tmp_path / "decode.json"
        jpath.write_text(json.dumps(job))
        code, out, _ = _run(capsys, ["decode-plan", "--manifest", str(jpath)])
        assert code == 0
        decoded = json.loads(out)
        assert decoded["mode"] == 1
        assert np.allclose(decoded["waypoints"], doc["anchors"][1])

    def test_score_pdms_collision_and_clean(self, tmp_path, capsys):
        plan = [[2.5 * (i + 1), 0.0] for i in range(8)]
        scene = {
            "drivable_area": [[-10.0, -4.0], [60.0, -4.0], [60.0, 4.0], [-10.0, 4.0]],
            "centerline": [[-10.0, 0.0], [60.0, 0.0]],
            "ego_length": 4.0,
            "ego_width": 2.0,
            "agents": [],
        }
        blocked = dict(scene)
        blocked["agents"] = [
            {"center": [10.0, 0.0], "heading": 0.0, "length": 4.0, "width": 2.0, "category": "vehicle"}
        ]
        doc = {
            "scenarios": [
                {"name": "clean", "scene": scene, "plan": plan, "safe_progress_upper_bound": 17.5},
                {"name": "crash", "scene": blocked, "plan": plan, "safe_progress_upper_bound": 17.5},
            ]
        }
        mpath = tmp_path / "scenarios.json"
        mpath.write_text(json.dumps(doc))
        code, out, _ = _run(capsys, ["score-pdms", "--manifest", str(mpath)])
        assert code == 0
        result = json.loads(out)
        by_name = {e["name"]: e for e in result["scenarios"]}
        assert by_name["clean"]["pdms"] == pytest.approx(1.0)
        assert by_name["crash"]["pdms"] == 0.0
        assert result["mean_pdms"] == pytest.approx(0.5)

    def test_score_pdms_config_file_supplies_bound(self, tmp_path, capsys):
        plan = [[2.5 * (i + 1), 0.0] for i in range(8)]
        scene = {
            "drivable_area": [[-10.0, -4.0], [60.0, -4.0], [60.0, 4.0], [-10.0, 4.0]],
            "centerline": [[-10.0, 0.0], [60.0, 0.0]],
            "ego_length": 4.0,
            "ego_width": 2.0,
            "agents": [],
        }
        doc = {"scenarios": [{"name": "s", "scene": scene, "plan": plan}]}
        mpath = tmp_path / "scenarios.json"
        mpath.write_text(json.dumps(doc))
        cfg = tmp_path / "pdms.cfg"
        cfg.write_text("safe_progress_upper_bound = 35.0\n")
        code, out, _ = _run(capsys, ["score-pdms", "--manifest", str(mpath), "--config", str(cfg)])
        assert code == 0
        entry = json.loads(out)["scenarios"][0]
        assert entry["ep"] == pytest.approx(17.5 / 35.0)


class TestLossCheck:
    def test_deterministic_bytes(self, tmp_path, capsys):
        out1 = tmp_path / "r1.json"
        out2 = tmp_path / "r2.json"
        assert cli_dispatch(["loss-check", "--seed", "7", "--out", str(out1)]) == 0
        assert cli_dispatch(["loss-check", "--seed", "7", "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        report = json.loads(out1.read_text())
        assert report["pass"] is True
        capsys.readouterr()


class TestOutputModes:
    def test_out_file_and_compact_json(self, tmp_path, capsys):
        rng = np.random.default_rng(6)
        maps = [LabelMap(rng.integers(0, 7, size=(4, 4))) for _ in range(2)]
        gt = _seg_sequence(tmp_path, "s0", maps)
        out = tmp_path / "res.json"
        code, stdout, _ = _run(capsys, ["static-baseline", "--gt", gt, "--out", str(out), "--json"])
        assert code == 0
        assert stdout == ""
        text = out.read_text()
        assert "\n" not in text.strip()
        json.loads(text)

    def test_repeat_runs_byte_identical(self, tmp_path, capsys):
        rng = np.random.default_rng(7)
        maps = [LabelMap(rng.integers(0, 7, size=(4, 4))) for _ in range(3)]
        gt = _seg_sequence(tmp_path, "s0", maps)
        o1, o2 = tmp_path / "a.json", tmp_path / "b.json"
        assert cli_dispatch(["static-baseline", "--gt", gt, "--out", str(o1)]) == 0
        assert cli_dispatch(["static-baseline", "--gt", gt, "--out", str(o2)]) == 0
        assert o1.read_bytes() == o2.read_bytes()
        capsys.readouterr()

    def test_worker_count_does_not_change_output(self, tmp_path, capsys, monkeypatch):
        rng = np.random.default_rng(8)
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        for sid in ("a", "b", "c"):
            maps = [LabelMap(rng.integers(0, 7, size=(4, 4))) for _ in range(3)]
            _seg_sequence(pred_dir, sid, maps)
            _seg_sequence(gt_dir, sid, maps)
        outputs = []
        for workers in ("1", "3"):
            monkeypatch.setenv("LFG_NUM_WORKERS", workers)
            out = tmp_path / f"w{workers}.json"
            code = cli_dispatch(
                ["eval-seg", "--pred", str(pred_dir), "--gt", str(gt_dir), "--out", str(out)]
            )
            assert code == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        capsys.readouterr()

    def test_bad_worker_env_rejected(self, tmp_path, capsys, monkeypatch):
        rng = np.random.default_rng(9)
        maps = [LabelMap(rng.integers(0, 7, size=(4, 4))) for _ in range(2)]
        gt = _seg_sequence(tmp_path, "s0", maps)
        monkeypatch.setenv("LFG_NUM_WORKERS", "many")
        code, _, err = _run(capsys, ["eval-seg", "--pred", gt, "--gt", gt])
        assert code == 2
        assert json.loads(err)["error"]["code"] == "bad_config"
