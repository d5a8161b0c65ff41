"""Frame-to-frame RGB-D visual odometry.

Pipeline per consecutive pair: undistort the greyscale frame, detect
keypoints, match descriptors by mutual nearest neighbour, backproject the
previous frame's matches through its depth image, then solve PnP over all
matches (no RANSAC, no bundle adjustment).  World poses chain as
W_curr = W_prev * T^-1 with T the prev->curr camera motion.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import nncore, superpoint
from .errors import InsufficientMatches, InvalidArgument, NoDepth
from .se3 import PoseSE3, exp_se3, rot_to_quat, quat_to_rot

log = logging.getLogger(__name__)

TUM_DEPTH_FACTOR = 5000.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    distortion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)  # k1, k2, p1, p2, k3

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if len(self.distortion) != 5:
            raise InvalidArgument("distortion must be (k1, k2, p1, p2, k3)")

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.distortion)


@dataclass
class Trajectory:
    """Timestamped world poses; timestamps strictly increase."""

    entries: list  # of (timestamp: float, pose: PoseSE3, frame_id)

    def __post_init__(self):
        stamps = [e[0] for e in self.entries]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise InvalidArgument("trajectory timestamps must strictly increase")

    def __len__(self):
        return len(self.entries)

    def timestamps(self):
        return np.array([e[0] for e in self.entries])

    def poses(self):
        return [e[1] for e in self.entries]

    def to_tum_text(self) -> str:
        """One line per pose: `timestamp tx ty tz qx qy qz qw` (Hamilton, w last)."""
        lines = []
        for t, pose, _ in self.entries:
            q = rot_to_quat(pose.rotation)
            tx, ty, tz = pose.translation
            lines.append(
                f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_tum_text(text: str) -> "Trajectory":
        entries = []
        for i, raw in enumerate(text.splitlines()):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise InvalidArgument(f"line {i + 1}: expected 8 fields, got {len(parts)}")
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            pose = PoseSE3(quat_to_rot([qx, qy, qz, qw]), [tx, ty, tz])
            entries.append((t, pose, len(entries)))
        return Trajectory(entries)


@dataclass(frozen=True)
class MatchSet:
    """Mutual one-to-one correspondences with dot-product similarities."""

    pairs: np.ndarray  # (N, 2) int64: index_prev, index_curr
    similarities: np.ndarray  # (N,)

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        s = np.asarray(self.similarities, dtype=np.float64).reshape(-1)
        if p.shape[0] != s.shape[0]:
            raise InvalidArgument("pairs/similarities length mismatch")
        for side in (0, 1):
            if np.unique(p[:, side]).size != p.shape[0]:
                raise InvalidArgument("a keypoint appears in two matches")
        object.__setattr__(self, "pairs", p)
        object.__setattr__(self, "similarities", s)

    def __len__(self):
        return self.pairs.shape[0]


# -- undistortion ------------------------------------------------------------


def distort_normalized(k: CameraIntrinsics, x, y):
    """Forward radial-tangential model on normalised coordinates."""
    k1, k2, p1, p2, k3 = k.distortion
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def distorted_source_px(k: CameraIntrinsics, u, v):
    """Distorted-image pixel that an undistorted pixel (u, v) samples from."""
    x = (np.asarray(u, dtype=np.float64) - k.cx) / k.fx
    y = (np.asarray(v, dtype=np.float64) - k.cy) / k.fy
    xd, yd = distort_normalized(k, x, y)
    return k.fx * xd + k.cx, k.fy * yd + k.cy


def undistort(image, k: CameraIntrinsics):
    """Resample onto the undistorted grid; out-of-range sources read as 0.

    With all-zero coefficients the input is returned unchanged.
    """
    image = nncore.check_tensor(image, "image")
    if not k.has_distortion:
        return image.copy()
    c, h, w = image.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx, sy = distorted_source_px(k, uu, vv)
    valid = (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(sxc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(syc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sxc - x0
    fy = syc - y0
    out = (
        image[:, y0, x0] * (1 - fx) * (1 - fy)
        + image[:, y0, x1] * fx * (1 - fy)
        + image[:, y1, x0] * (1 - fx) * fy
        + image[:, y1, x1] * fx * fy
    )
    out *= valid
    return out


# -- matching and geometry -----------------------------------------------


def match(a: superpoint.DetectionResult, b: superpoint.DetectionResult,
          min_similarity: float = 0.7) -> MatchSet:
    """Mutual nearest neighbour under dot-product similarity."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    sim = a.descriptors @ b.descriptors.T
    nn_ab = sim.argmax(axis=1)
    nn_ba = sim.argmax(axis=0)
    idx_a = np.arange(len(a))
    mutual = nn_ba[nn_ab] == idx_a
    sims = sim[idx_a, nn_ab]
    keep = mutual & (sims >= min_similarity)
    pairs = np.column_stack([idx_a[keep], nn_ab[keep]])
    return MatchSet(pairs, sims[keep])


def backproject(u, v, depth_raw, k: CameraIntrinsics,
                depth_factor: float = TUM_DEPTH_FACTOR) -> np.ndarray:
    """Pixel + raw depth -> camera-frame 3D point in metres."""
    if depth_raw <= 0:
        raise NoDepth(f"no depth at ({u}, {v})")
    z = float(depth_raw) / depth_factor
    return np.array([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])


def project(points3d, k: CameraIntrinsics):
    pts = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    return np.column_stack(
        [k.fx * pts[:, 0] / pts[:, 2] + k.cx, k.fy * pts[:, 1] / pts[:, 2] + k.cy]
    )


def reprojection_residual(pose: PoseSE3, points3d, points2d, k: CameraIntrinsics):
    cam = pose.apply(points3d)
    if np.any(cam[:, 2] <= 1e-9):
        return None
    return (project(cam, k) - points2d).ravel()


def solve_pnp(points3d, points2d, k: CameraIntrinsics, huber_delta: float = None,
              max_iters: int = 100, step_tol: float = 1e-10) -> PoseSE3:
    """Levenberg-Marquardt over a 6-parameter exponential-map update,
    initialised at identity, using every correspondence (no RANSAC)."""
    x3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    x2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if x3.shape[0] != x2.shape[0]:
        raise InvalidArgument("3D/2D correspondence counts differ")
    if x3.shape[0] < 6:
        raise InsufficientMatches(f"PnP needs >= 6 correspondences, got {x3.shape[0]}")
    if np.any(x3[:, 2] <= 0):
        raise InvalidArgument("3D points must have positive depth")

    def weights(res):
        if huber_delta is None:
            return np.ones(res.shape[0] // 2)
        norms = np.linalg.norm(res.reshape(-1, 2), axis=1)
        return np.minimum(1.0, huber_delta / np.maximum(norms, 1e-12))

    def cost(res):
        if res is None:
            return np.inf
        w = np.repeat(weights(res), 2)
        return float(np.sum(w * res * res))

    pose = PoseSE3.identity()
    res = reprojection_residual(pose, x3, x2, k)
    current = cost(res)
    lam = 1e-4
    for _ in range(max_iters):
        cam = pose.apply(x3)
        xs, ys, zs = cam[:, 0], cam[:, 1], cam[:, 2]
        inv_z = 1.0 / zs
        # d(projection)/d(camera point)
        jp = np.zeros((cam.shape[0], 2, 3))
        jp[:, 0, 0] = k.fx * inv_z
        jp[:, 0, 2] = -k.fx * xs * inv_z * inv_z
        jp[:, 1, 1] = k.fy * inv_z
        jp[:, 1, 2] = -k.fy * ys * inv_z * inv_z
        # left-multiplicative update: dP/d(omega) = -[P]x, dP/d(rho) = I
        jw = np.zeros((cam.shape[0], 3, 6))
        jw[:, 0, 1] = cam[:, 2]
        jw[:, 0, 2] = -cam[:, 1]
        jw[:, 1, 0] = -cam[:, 2]
        jw[:, 1, 2] = cam[:, 0]
        jw[:, 2, 0] = cam[:, 1]
        jw[:, 2, 1] = -cam[:, 0]
        jw[:, :, 3:] = np.eye(3)
        jac = np.einsum("nij,njk->nik", jp, jw).reshape(-1, 6)
        w = np.repeat(weights(res), 2)
        jtj = jac.T @ (jac * w[:, None])
        g = jac.T @ (w * res)
        stepped = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(jtj + lam * np.eye(6), -g, rcond=None)[0]
            cand = exp_se3(delta) @ pose
            cand_res = reprojection_residual(cand, x3, x2, k)
            cand_cost = cost(cand_res)
            if cand_cost < current:
                pose, res, current = cand, cand_res, cand_cost
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not stepped or float(np.linalg.norm(delta)) < step_tol:
            break
    else:
        log.warning("PnP hit the iteration cap; final residual %.3e", current)
    return pose


# -- sequence driver ---------------------------------------------------------


@dataclass
class FrameData:
    timestamp: float
    gray: np.ndarray  # (1, H, W) in [0, 1]
    depth: np.ndarray  # (H, W) raw integer depth
    frame_id: object = None


@dataclass
class FrameReport:
    frame_id: object
    timestamp: float
    matches: int
    used: int
    fallback: bool


def _depth_at_keypoint(depth, k, x, y):
    """Depth is stored in the distorted image; look it up at the source pixel."""
    if k.has_distortion:
        sx, sy = distorted_source_px(k, x, y)
        sx, sy = float(sx), float(sy)
    else:
        sx, sy = x, y
    h, w = depth.shape
    xi, yi = int(round(sx)), int(round(sy))
    if not (0 <= xi < w and 0 <= yi < h):
        return 0
    return int(depth[yi, xi])


def run_sequence(frames, k: CameraIntrinsics, graph, det_cfg=None,
                 min_similarity: float = 0.7, seed_pose: PoseSE3 = None,
                 depth_factor: float = TUM_DEPTH_FACTOR, huber_delta: float = None,
                 softmax_mode=nncore.SoftmaxMode.FLOAT_E):
    """Chain frame-to-frame PnP into a world trajectory.

    Frames with fewer than 6 depth-valid matches reuse the previous relative
    motion (constant velocity) and are flagged in the report.  The first pose
    is `seed_pose` (identity when not given).
    """
    frames = list(frames)
    if not frames:
        raise InvalidArgument("empty frame sequence")
    det_cfg = det_cfg or superpoint.DetectorConfig()
    world = seed_pose if seed_pose is not None else PoseSE3.identity()
    entries = [(frames[0].timestamp, world, frames[0].frame_id)]
    reports = [FrameReport(frames[0].frame_id, frames[0].timestamp, 0, 0, False)]

    prev = frames[0]
    prev_det = superpoint.detect(undistort(prev.gray, k), graph, det_cfg, softmax_mode)
    last_rel = PoseSE3.identity()

    for frame in frames[1:]:
        det = superpoint.detect(undistort(frame.gray, k), graph, det_cfg, softmax_mode)
        ms = match(prev_det, det, min_similarity)
        pts3, pts2 = [], []
        for (ip, ic), _ in zip(ms.pairs, ms.similarities):
            xp, yp, _s = prev_det.keypoints[ip]
            raw = _depth_at_keypoint(prev.depth, k, xp, yp)
            if raw <= 0:
                continue
            pts3.append(backproject(xp, yp, raw, k, depth_factor))
            pts2.append(det.keypoints[ic, :2])
        fallback = False
        if len(pts3) >= 6:
            try:
                rel = solve_pnp(np.array(pts3), np.array(pts2), k, huber_delta)
                last_rel = rel
            except InsufficientMatches:
                rel, fallback = last_rel, True
        else:
            rel, fallback = last_rel, True
        world = world @ rel.inverse()
        entries.append((frame.timestamp, world, frame.frame_id))
        reports.append(
            FrameReport(frame.frame_id, frame.timestamp, len(ms), len(pts3), fallback)
        )
        prev, prev_det = frame, det

    return Trajectory(entries), reports
