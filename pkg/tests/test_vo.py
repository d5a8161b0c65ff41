import numpy as np
import pytest

from helpers import random_pose, random_weights
from qsp import superpoint, vo
from qsp.errors import InsufficientMatches, InvalidArgument, NoDepth
from qsp.se3 import PoseSE3, exp_se3, quat_to_rot, rodrigues, rot_to_quat, rotation_angle_deg
from qsp.superpoint import DetectionResult

K = vo.CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
K_DIST = vo.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, (0.1, 0.0, 0.0, 0.0, 0.0))


def unit_rows(rng, n, d=8):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def detection(rng, descs):
    n = descs.shape[0]
    kp = np.column_stack([rng.uniform(4, 60, n), rng.uniform(4, 44, n),
                          np.sort(rng.random(n))[::-1]])
    return DetectionResult(kp, descs)


class TestSe3:
    def test_group_laws(self, rng):
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            lhs = (a @ b).inverse()
            rhs = b.inverse() @ a.inverse()
            assert np.abs(lhs.rotation - rhs.rotation).max() < 1e-12
            assert np.abs(lhs.translation - rhs.translation).max() < 1e-12

    def test_identity_inverse(self):
        e = PoseSE3.identity()
        assert np.array_equal((e @ e.inverse()).matrix(), np.eye(4))

    def test_quaternion_round_trip(self, rng):
        for _ in range(50):
            r = random_pose(rng).rotation
            r2 = quat_to_rot(rot_to_quat(r))
            assert np.abs(r - r2).max() < 1e-12

    def test_exp_small_angle(self):
        p = exp_se3([0, 0, 0, 1.0, -2.0, 3.0])
        assert np.allclose(p.rotation, np.eye(3))
        assert np.allclose(p.translation, [1.0, -2.0, 3.0])

    def test_angle_extraction_axis_angle(self):
        for deg in (0.0, 1.0, 17.5, 90.0, 135.0, 179.0):
            r = rodrigues(np.radians(deg) * np.array([0.0, 0.0, 1.0]))
            assert rotation_angle_deg(r) == pytest.approx(deg, abs=1e-9)


class TestUndistort:
    def test_zero_coefficients_identity(self, rng):
        img = rng.random((1, 12, 16))
        assert np.array_equal(vo.undistort(img, K), img)

    def test_principal_point_fixed(self):
        sx, sy = vo.distorted_source_px(K_DIST, K.cx, K.cy)
        assert (sx, sy) == (K.cx, K.cy)

    def test_forward_model_scalar_oracle(self):
        # independent scalar evaluation: x = 0.2, r2 = 0.04,
        # radial = 1 + 0.1 * 0.04, source = fx * x * radial + cx
        sx, sy = vo.distorted_source_px(K_DIST, K.cx + 100.0, K.cy)
        assert sx == pytest.approx(500.0 * 0.2 * 1.004 + 320.0, abs=1e-12)
        assert sy == pytest.approx(240.0, abs=1e-12)

    def test_out_of_range_zero_fill(self):
        k = vo.CameraIntrinsics(50.0, 50.0, 8.0, 8.0, (10.0, 0.0, 0.0, 0.0, 0.0))
        img = np.ones((1, 16, 16))
        out = vo.undistort(img, k)
        assert out.min() == 0.0  # corner sources land outside the image


class TestMatch:
    def test_identical_sets_identity(self, rng):
        d = unit_rows(rng, 6)
        ms = vo.match(detection(rng, d), detection(rng, d), 0.5)
        assert len(ms) == 6
        assert np.array_equal(ms.pairs[:, 0], ms.pairs[:, 1])
        assert np.allclose(ms.similarities, 1.0)

    def test_orthogonal_below_threshold(self, rng):
        a = np.array([[1.0, 0.0, 0.0, 0.0]])
        b = np.array([[0.0, 1.0, 0.0, 0.0]])
        assert len(vo.match(detection(rng, a), detection(rng, b), 0.5)) == 0

    def test_mutuality(self, rng):
        e1 = np.array([1.0, 0.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0, 0.0])
        a1 = np.cos(0.2) * e1 + np.sin(0.2) * e2
        a = np.vstack([e1, a1])
        b = a1[None, :]
        ms = vo.match(detection(rng, a), detection(rng, b), 0.0)
        assert len(ms) == 1 and tuple(ms.pairs[0]) == (1, 0)

    def test_symmetry(self, rng):
        da, db = unit_rows(rng, 12), unit_rows(rng, 9)
        a, b = detection(rng, da), detection(rng, db)
        fwd = {tuple(p) for p in vo.match(a, b, 0.0).pairs}
        rev = {(j, i) for i, j in vo.match(b, a, 0.0).pairs}
        assert fwd == rev


class TestBackproject:
    def test_centre_ray(self):
        p = vo.backproject(K.cx, K.cy, 5000, K)
        assert np.array_equal(p, [0.0, 0.0, 1.0])

    def test_offset_formula(self):
        p = vo.backproject(K.cx + K.fx, K.cy, 10000, K)
        assert np.array_equal(p, [2.0, 0.0, 2.0])

    def test_zero_depth(self):
        with pytest.raises(NoDepth):
            vo.backproject(10.0, 10.0, 0, K)


class TestSolvePnp:
    def _scene(self, rng, n=50):
        return np.column_stack(
            [rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, n), rng.uniform(1.0, 5.0, n)]
        )

    def test_identity_when_projections_match(self, rng):
        pts3 = self._scene(rng)
        pose = vo.solve_pnp(pts3, vo.project(pts3, K), K)
        assert np.abs(pose.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(pose.translation).max() < 1e-9

    def test_known_pose_recovery(self, rng):
        t_true = PoseSE3(rodrigues([0.0, np.radians(10.0), 0.0]), [0.1, 0.0, 0.05])
        pts3 = self._scene(rng)
        pose = vo.solve_pnp(pts3, vo.project(t_true.apply(pts3), K), K)
        assert rotation_angle_deg(pose.rotation.T @ t_true.rotation) < 0.01
        assert np.linalg.norm(pose.translation - t_true.translation) < 1e-3

    def test_insufficient_matches(self, rng):
        pts3 = self._scene(rng, 5)
        with pytest.raises(InsufficientMatches):
            vo.solve_pnp(pts3, vo.project(pts3, K), K)

    def test_monotone_improvement(self, rng):
        t_true = random_pose(rng, 20.0, 0.5)
        pts3 = self._scene(rng)
        pts2 = vo.project(t_true.apply(pts3), K) + rng.normal(0, 2.0, (50, 2))
        pose = vo.solve_pnp(pts3, pts2, K)
        r_id = vo.reprojection_residual(PoseSE3.identity(), pts3, pts2, K)
        r_out = vo.reprojection_residual(pose, pts3, pts2, K)
        assert np.sum(r_out**2) <= np.sum(r_id**2)

    def test_huber_still_converges(self, rng):
        t_true = random_pose(rng, 10.0, 0.3)
        pts3 = self._scene(rng)
        pose = vo.solve_pnp(pts3, vo.project(t_true.apply(pts3), K), K, huber_delta=2.0)
        assert rotation_angle_deg(pose.rotation.T @ t_true.rotation) < 0.05


class TestTrajectoryIo:
    def test_tum_round_trip(self, rng):
        entries = [(1000.0 + i, random_pose(rng), i) for i in range(4)]
        traj = vo.Trajectory(entries)
        back = vo.Trajectory.from_tum_text(traj.to_tum_text())
        assert len(back) == 4
        for (t0, p0, _), (t1, p1, _) in zip(traj.entries, back.entries):
            assert t0 == t1
            assert np.abs(p0.rotation - p1.rotation).max() < 1e-7
            assert np.abs(p0.translation - p1.translation).max() < 1e-8

    def test_strictly_increasing_enforced(self, rng):
        p = PoseSE3.identity()
        with pytest.raises(InvalidArgument):
            vo.Trajectory([(1.0, p, 0), (1.0, p, 1)])

    def test_comments_and_arity(self):
        text = "# comment\n1.0 0 0 0 0 0 0 1\n"
        assert len(vo.Trajectory.from_tum_text(text)) == 1
        with pytest.raises(InvalidArgument):
            vo.Trajectory.from_tum_text("1.0 0 0 0\n")


@pytest.fixture(scope="module")
def graph():
    return superpoint.build_graph(random_weights(np.random.default_rng(5)), "float")


class TestRunSequence:
    def _textured(self, rng, h=48, w=64):
        img = np.zeros((h, w))
        img[:, 16 : w - 16] = rng.random((h, w - 32))
        return img

    def test_static_sequence_constant(self, rng, graph):
        img = self._textured(rng)[None]
        depth = np.full((48, 64), 5000, dtype=np.int64)
        frames = [vo.FrameData(float(i), img, depth, i) for i in range(3)]
        traj, reports = vo.run_sequence(frames, K, graph)
        for _, pose, _ in traj.entries:
            assert np.abs(pose.rotation - np.eye(3)).max() < 1e-12
            assert np.abs(pose.translation).max() < 1e-12
        assert not any(r.fallback for r in reports)
        # each frame's pose is emitted exactly once, in order (no revisiting)
        assert [e[2] for e in traj.entries] == [f.frame_id for f in frames]

    def test_known_shift_recovered_and_chained(self, rng, graph):
        base = self._textured(rng)
        k = vo.CameraIntrinsics(100.0, 100.0, 32.0, 24.0)
        depth = np.full((48, 64), 5000, dtype=np.int64)  # z = 1 m plane
        # one full /8 cell of shift keeps coarse features bitwise aligned,
        # so the surviving matches are exact correspondences
        frames = [
            vo.FrameData(0.0, base[None], depth, 0),
            vo.FrameData(0.1, np.roll(base, 8, axis=1)[None], depth, 1),
        ]
        traj, reports = vo.run_sequence(frames, k, graph, min_similarity=0.99)
        assert reports[1].used >= 6 and not reports[1].fallback
        w1 = traj.entries[1][1]
        # +8 px image shift of a z=1 plane is camera motion t = (8z/fx, 0, 0);
        # the world pose is its inverse
        assert np.allclose(w1.translation, [-0.08, 0.0, 0.0], atol=1e-6)
        assert rotation_angle_deg(w1.rotation) < 1e-6

    def test_zero_depth_falls_back(self, rng, graph):
        img = self._textured(rng)[None]
        good = np.full((48, 64), 5000, dtype=np.int64)
        bad = np.zeros((48, 64), dtype=np.int64)
        frames = [
            vo.FrameData(0.0, img, good, 0),
            vo.FrameData(0.1, img, bad, 1),
            vo.FrameData(0.2, img, bad, 2),
        ]
        traj, reports = vo.run_sequence(frames, K, graph)
        assert reports[2].fallback
        assert len(traj) == 3

    def test_empty_sequence_rejected(self, graph):
        with pytest.raises(InvalidArgument):
            vo.run_sequence([], K, graph)

    def test_seed_pose_used(self, rng, graph):
        img = self._textured(rng)[None]
        depth = np.full((48, 64), 5000, dtype=np.int64)
        seed = random_pose(rng)
        frames = [vo.FrameData(0.0, img, depth, 0), vo.FrameData(0.1, img, depth, 1)]
        traj, _ = vo.run_sequence(frames, K, graph, seed_pose=seed)
        assert np.array_equal(traj.entries[0][1].matrix(), seed.matrix())
        # static frames: second pose equals the seed
        assert np.abs(traj.entries[1][1].matrix() - seed.matrix()).max() < 1e-12
