import json

import numpy as np
import pytest

from helpers import (
    make_hpatches_dataset,
    make_tum_dataset,
    random_weights,
    save_gray_png,
    textured_image,
)
from qsp import cli, dataio, vo
from qsp.superpoint import DetectionResult


@pytest.fixture(scope="module")
def archive(tmp_path_factory):
    root = tmp_path_factory.mktemp("weights")
    dataio.store_weights(root, random_weights(np.random.default_rng(77)))
    return str(root)


@pytest.fixture()
def image_file(tmp_path, rng):
    path = tmp_path / "frame.png"
    save_gray_png(path, textured_image(rng))
    return str(path)


def read_json(path):
    return json.loads(open(path).read())


class TestExtract:
    def test_fp_extract(self, archive, image_file, tmp_path):
        out = tmp_path / "det.bin"
        code = cli.main(
            ["extract", image_file, "--weights", archive, "--out", str(out)]
        )
        assert code == 0
        assert out.exists()
        report = read_json(out.with_suffix(".json"))
        assert report["bits"] == "fp"
        assert report["keypoints"] > 0
        assert "parameters" in report["manifest"]
        det = DetectionResult.from_binary(out.read_bytes())
        assert len(det) == report["keypoints"]

    def test_int3_records_bits(self, archive, image_file, tmp_path):
        out = tmp_path / "det3.bin"
        code = cli.main(
            ["extract", image_file, "--weights", archive, "--bits", "int3", "--out", str(out)]
        )
        assert code == 0
        assert read_json(out.with_suffix(".json"))["bits"] == "int3"

    def test_missing_weights_is_io_error(self, image_file, tmp_path):
        code = cli.main(
            ["extract", image_file, "--weights", str(tmp_path / "nope"), "--out", "x"]
        )
        assert code == 2

    def test_non_divisible_image_is_usage_error(self, archive, tmp_path, rng):
        path = tmp_path / "odd.png"
        save_gray_png(path, rng.random((50, 70)))
        code = cli.main(["extract", str(path), "--weights", archive, "--out", "x"])
        assert code == 1

    def test_bits_config_file(self, archive, image_file, tmp_path):
        from qsp.quant import BitWidthConfig

        cfg_path = tmp_path / "bits.txt"
        cfg_path.write_text(BitWidthConfig.int8().to_text())
        out = tmp_path / "det8.bin"
        code = cli.main(
            ["extract", image_file, "--weights", archive, "--bits", str(cfg_path),
             "--out", str(out)]
        )
        assert code == 0


class TestCompile:
    def test_int8_compiles_clean(self, archive, tmp_path):
        out = tmp_path / "graph.json"
        dump = tmp_path / "passes"
        code = cli.main(
            ["compile", "--weights", archive, "--bits", "int8", "--out", str(out),
             "--dump-passes", str(dump), "--trials", "3"]
        )
        assert code == 0
        report = read_json(out.with_suffix(".report.json"))
        assert report["deviation"] == 0.0
        assert report["node_census"]["Conv"] == 12
        assert (dump / "pass_reports.json").exists()
        assert len(list(dump.glob("pass_*.json"))) >= 2

    def test_fp_refused(self, archive, tmp_path):
        code = cli.main(["compile", "--weights", archive, "--bits", "fp", "--out", "g"])
        assert code == 1

    def test_corrupted_threshold_detected(self, archive, tmp_path):
        out = tmp_path / "graph.json"
        code = cli.main(
            ["compile", "--weights", archive, "--bits", "int4", "--out", str(out),
             "--trials", "3", "--debug-corrupt-threshold"]
        )
        assert code == 3
        assert read_json(out.with_suffix(".report.json"))["deviation"] > 0.0


class TestEvalHpatches:
    def test_synthetic_dataset_scores(self, archive, tmp_path, rng):
        root = make_hpatches_dataset(tmp_path / "hp", rng, n_seq=2)
        out = tmp_path / "scores.json"
        code = cli.main(
            ["eval-hpatches", str(root), "--weights", archive, "--out", str(out),
             "--resize", "48", "64"]
        )
        assert code == 0
        report = read_json(out)
        agg = report["aggregate"]
        assert agg["pairs"] == 10
        # near-identity synthetic warps of the same texture re-detect well
        assert agg["repeatability"] > 0.5
        assert agg["localization_error"] < 3.0
        assert len(report["per_sequence"]) == 2
        assert out.with_suffix(".csv").exists()

    def test_empty_dataset_is_io_error(self, archive, tmp_path):
        (tmp_path / "empty").mkdir()
        code = cli.main(
            ["eval-hpatches", str(tmp_path / "empty"), "--weights", archive, "--out", "s"]
        )
        assert code == 2

    def test_deterministic_reports(self, archive, tmp_path, rng):
        root = make_hpatches_dataset(tmp_path / "hp", rng, n_seq=1)
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert (
                cli.main(
                    ["eval-hpatches", str(root), "--weights", archive, "--out", str(out),
                     "--resize", "48", "64", "--seed", "3"]
                )
                == 0
            )
            doc = read_json(out)
            doc["manifest"].pop("timings")
            outs.append(json.dumps(doc, sort_keys=True))
        assert outs[0] == outs[1]


class TestRunVo:
    def test_static_sequence(self, archive, tmp_path, rng):
        root = make_tum_dataset(tmp_path / "seq", rng, n_frames=3)
        out = tmp_path / "traj.txt"
        code = cli.main(
            ["run-vo", str(root), "--weights", archive, "--out", str(out)]
        )
        assert code == 0
        traj = vo.Trajectory.from_tum_text(out.read_text())
        assert len(traj) == 3
        first = traj.poses()[0]
        for pose in traj.poses()[1:]:
            assert np.abs(pose.matrix() - first.matrix()).max() < 1e-6
        report = read_json(out.with_suffix(".report.json"))
        assert report["seed_pose"] == "groundtruth"
        assert report["fallback_frames"] == []
        assert len(report["per_frame"]) == 3

    def test_missing_calibration_is_io_error(self, archive, tmp_path, rng):
        root = make_tum_dataset(tmp_path / "seq", rng, calib=False)
        code = cli.main(["run-vo", str(root), "--weights", archive, "--out", "t"])
        assert code == 2


class TestEvalTrajectory:
    def _write_traj(self, path, traj):
        path.write_text(traj.to_tum_text())

    def test_est_equals_gt(self, tmp_path, rng):
        from helpers import random_trajectory

        traj = random_trajectory(rng, 5, dt=0.5, t0=100.0)
        est, gt = tmp_path / "est.txt", tmp_path / "gt.txt"
        self._write_traj(est, traj)
        self._write_traj(gt, traj)
        out = tmp_path / "score.json"
        code = cli.main(["eval-trajectory", str(est), str(gt), "--out", str(out)])
        assert code == 0
        score = read_json(out)["score"]
        assert score["ape_trans_m"] == 0.0
        assert score["ape_rot_deg"] == 0.0
        assert score["rpe_rot_deg"] == 0.0
        assert score["rpe_trans_m_per_s"] == 0.0
        assert out.with_suffix(".angles.csv").exists()

    def test_disjoint_timestamps_exit_2(self, tmp_path, rng):
        from helpers import random_trajectory

        t1 = random_trajectory(rng, 3, t0=0.0)
        t2 = random_trajectory(rng, 3, t0=500.0)
        est, gt = tmp_path / "est.txt", tmp_path / "gt.txt"
        self._write_traj(est, t1)
        self._write_traj(gt, t2)
        assert cli.main(["eval-trajectory", str(est), str(gt), "--out", "s"]) == 2

    def test_unparseable_exit_2(self, tmp_path):
        est = tmp_path / "est.txt"
        est.write_text("not a trajectory\n")
        gt = tmp_path / "gt.txt"
        gt.write_text("1.0 0 0 0 0 0 0 1\n")
        assert cli.main(["eval-trajectory", str(est), str(gt), "--out", "s"]) == 2


def test_usage_error_exit_1():
    assert cli.main(["no-such-command"]) == 1
    assert cli.main([]) == 1
