"""Detector benchmarks (repeatability, localisation error, homography
estimation) and trajectory error metrics (APE/RPE RMSE, unaligned).

Rotation errors are degrees, translation errors metres (RPE translation is
normalised by the pair's time span, m/s).  No trajectory alignment is ever
applied; estimated and ground-truth poses are compared as stored.
"""

from dataclasses import dataclass

import numpy as np

from . import vo
from .errors import EstimationFailed, InvalidArgument, UndefinedMetric
from .se3 import euler_zyx_deg, rotation_angle_deg


def normalize_homography(h) -> np.ndarray:
    """Scale so h33 = 1; reject non-invertible matrices."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise InvalidArgument("homography is not invertible")
    if h[2, 2] == 0.0:
        raise InvalidArgument("homography has h33 = 0, cannot normalise")
    return h / h[2, 2]


def warp_points(h, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pts.shape[0], 1))
    p = np.hstack([pts, ones]) @ np.asarray(h, dtype=np.float64).T
    return p[:, :2] / p[:, 2:3]


@dataclass(frozen=True)
class DetectorScore:
    repeatability: float
    localization_error: float
    homography_accuracy: float
    pairs: int

    def to_dict(self) -> dict:
        return {
            "repeatability": self.repeatability,
            "localization_error": self.localization_error,
            "homography_accuracy": self.homography_accuracy,
            "pairs": self.pairs,
        }


@dataclass(frozen=True)
class TrajectoryScore:
    rpe_rot: float  # degrees
    rpe_trans: float  # m/s
    ape_rot: float  # degrees
    ape_trans: float  # m

    def to_dict(self) -> dict:
        return {
            "rpe_rot_deg": self.rpe_rot,
            "rpe_trans_m_per_s": self.rpe_trans,
            "ape_rot_deg": self.ape_rot,
            "ape_trans_m": self.ape_trans,
        }


# -- detector metrics ---------------------------------------------------------


def _top_k(kpts, top_k):
    kpts = np.asarray(kpts, dtype=np.float64).reshape(-1, 3)
    if top_k and kpts.shape[0] > top_k:
        order = np.argsort(-kpts[:, 2], kind="stable")
        kpts = kpts[order[:top_k]]
    return kpts


def _inside(pts, shape):
    h, w = shape
    return (
        (pts[:, 0] >= 0.0)
        & (pts[:, 0] <= w - 1.0)
        & (pts[:, 1] >= 0.0)
        & (pts[:, 1] <= h - 1.0)
    )


def _min_dists(query, targets):
    if query.shape[0] == 0:
        return np.zeros(0)
    if targets.shape[0] == 0:
        return np.full(query.shape[0], np.inf)
    d = np.linalg.norm(query[:, None, :] - targets[None, :, :], axis=2)
    return d.min(axis=1)


def _symmetric_correspondences(kpts_a, kpts_b, h_ab, shape_b, eps, top_k, shape_a):
    h_ab = normalize_homography(h_ab)
    h_ba = np.linalg.inv(h_ab)
    shape_a = shape_a or shape_b
    a = _top_k(kpts_a, top_k)
    b = _top_k(kpts_b, top_k)
    a_in_b = warp_points(h_ab, a[:, :2]) if a.size else np.zeros((0, 2))
    b_in_a = warp_points(h_ba, b[:, :2]) if b.size else np.zeros((0, 2))
    a_keep = _inside(a_in_b, shape_b) if a.size else np.zeros(0, dtype=bool)
    b_keep = _inside(b_in_a, shape_a) if b.size else np.zeros(0, dtype=bool)
    a_warped = a_in_b[a_keep]
    b_warped = b_in_a[b_keep]
    b_pts = b[b_keep, :2]
    a_pts = a[a_keep, :2]
    d_ab = _min_dists(a_warped, b_pts)
    d_ba = _min_dists(b_warped, a_pts)
    return d_ab, d_ba


def repeatability(kpts_a, kpts_b, h_ab, shape_b, eps: float = 3.0, top_k: int = 300,
                  shape_a=None) -> float:
    """Symmetric re-detection rate under a known homography.

    Points are trimmed to the top_k strongest per image and to those whose
    warp lands inside the other image; the score counts, in both directions,
    points with a partner within eps pixels, over all surviving points.
    """
    d_ab, d_ba = _symmetric_correspondences(
        kpts_a, kpts_b, h_ab, shape_b, eps, top_k, shape_a
    )
    total = d_ab.size + d_ba.size
    if total == 0:
        raise UndefinedMetric("no keypoints survive warping")
    return float(((d_ab <= eps).sum() + (d_ba <= eps).sum()) / total)


def localization_error(kpts_a, kpts_b, h_ab, shape_b, eps: float = 3.0,
                       top_k: int = 300, shape_a=None) -> float:
    """Mean distance over the correct (<= eps) correspondences only."""
    d_ab, d_ba = _symmetric_correspondences(
        kpts_a, kpts_b, h_ab, shape_b, eps, top_k, shape_a
    )
    correct = np.concatenate([d_ab[d_ab <= eps], d_ba[d_ba <= eps]])
    if correct.size == 0:
        raise UndefinedMetric("no correct correspondences within eps")
    return float(correct.mean())


# -- homography estimation -----------------------------------------------


def _normalising_transform(pts):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_homography_dlt(src, dst) -> np.ndarray:
    """Normalised 4+-point DLT (Hartley normalisation on both sides)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] < 4:
        raise EstimationFailed("DLT needs at least 4 correspondences")
    ta = _normalising_transform(src)
    tb = _normalising_transform(dst)
    sn = warp_points(ta, src)
    dn = warp_points(tb, dst)
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, s, vt = np.linalg.svd(np.asarray(rows))
    if s[-2] < 1e-12:
        raise EstimationFailed("degenerate correspondence configuration")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ hn @ ta
    return normalize_homography(h)


def ransac_homography(src, dst, inlier_thresh: float = 3.0, iterations: int = 1000,
                      seed: int = 0) -> np.ndarray:
    """Fixed-seed 4-point RANSAC with a least-squares refit on the inliers."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = src.shape[0]
    if n < 4:
        raise EstimationFailed(f"homography needs >= 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(iterations):
        pick = rng.choice(n, size=4, replace=False)
        try:
            h = estimate_homography_dlt(src[pick], dst[pick])
        except (EstimationFailed, InvalidArgument):
            continue
        err = np.linalg.norm(warp_points(h, src) - dst, axis=1)
        mask = err <= inlier_thresh
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 4:
        raise EstimationFailed("RANSAC found no valid model")
    # refit, then re-estimate the inlier set once with the refit model
    h = estimate_homography_dlt(src[best_mask], dst[best_mask])
    err = np.linalg.norm(warp_points(h, src) - dst, axis=1)
    mask = err <= inlier_thresh
    if int(mask.sum()) >= 4:
        h = estimate_homography_dlt(src[mask], dst[mask])
    return h


def corner_error(h_est, h_gt, shape) -> float:
    """Mean displacement of the four image corners between the homographies."""
    hgt, wdt = shape
    corners = np.array(
        [[0.0, 0.0], [wdt - 1.0, 0.0], [wdt - 1.0, hgt - 1.0], [0.0, hgt - 1.0]]
    )
    return float(
        np.linalg.norm(warp_points(h_est, corners) - warp_points(h_gt, corners), axis=1).mean()
    )


def homography_score(det_a, det_b, h_gt, shape, e: float = 3.0, seed: int = 0,
                     min_similarity: float = 0.0, inlier_thresh: float = 3.0,
                     iterations: int = 1000):
    """Estimate a homography from descriptor matches and score it against the
    ground truth: correct iff the mean corner error is within e pixels."""
    ms = vo.match(det_a, det_b, min_similarity)
    if len(ms) < 4:
        raise EstimationFailed(f"only {len(ms)} matches, need 4")
    src = det_a.keypoints[ms.pairs[:, 0], :2]
    dst = det_b.keypoints[ms.pairs[:, 1], :2]
    h_est = ransac_homography(src, dst, inlier_thresh, iterations, seed)
    err = corner_error(h_est, normalize_homography(h_gt), shape)
    return err <= e, err


# -- trajectory metrics --------------------------------------------------


def associate(est: vo.Trajectory, gt: vo.Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairing; each pose used at most once."""
    if len(est) == 0 or len(gt) == 0:
        raise UndefinedMetric("cannot associate an empty trajectory")
    est_t = est.timestamps()
    gt_t = gt.timestamps()
    candidates = []
    for i, te in enumerate(est_t):
        for j, tg in enumerate(gt_t):
            d = abs(te - tg)
            if d <= max_dt:
                candidates.append((d, i, j))
    candidates.sort()
    used_e, used_g = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    if not pairs:
        raise UndefinedMetric("no timestamp pairs within max_dt")
    pairs.sort()
    return pairs


def _rmse(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(v * v)))


def ape(est: vo.Trajectory, gt: vo.Trajectory, max_dt: float = 0.02):
    """Absolute pose error without alignment: per pair E = Q^-1 * P.

    Returns (rotation RMSE in degrees, translation RMSE in metres).
    """
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 2:
        raise UndefinedMetric("APE needs at least two associated pairs")
    rot, trans = [], []
    for i, j in pairs:
        e = gt.poses()[j].inverse() @ est.poses()[i]
        rot.append(rotation_angle_deg(e.rotation))
        trans.append(float(np.linalg.norm(e.translation)))
    return _rmse(rot), _rmse(trans)


def rpe(est: vo.Trajectory, gt: vo.Trajectory, delta: float = 1.0,
        max_dt: float = 0.02):
    """Relative pose error over ~delta-second steps.

    For each associated pair i, partner j is the first pair at least delta
    seconds later; E = (Q_i^-1 Q_j)^-1 (P_i^-1 P_j).  Translation error is
    divided by the actual time span (m/s); rotation stays in degrees.
    """
    pairs = associate(est, gt, max_dt)
    est_poses, gt_poses = est.poses(), gt.poses()
    est_t = est.timestamps()
    rot, trans = [], []
    for a in range(len(pairs)):
        i, gi = pairs[a]
        partner = None
        for b in range(a + 1, len(pairs)):
            if est_t[pairs[b][0]] - est_t[i] >= delta:
                partner = pairs[b]
                break
        if partner is None:
            continue
        j, gj = partner
        dt = float(est_t[j] - est_t[i])
        rel_gt = gt_poses[gi].inverse() @ gt_poses[gj]
        rel_est = est_poses[i].inverse() @ est_poses[j]
        e = rel_gt.inverse() @ rel_est
        rot.append(rotation_angle_deg(e.rotation))
        trans.append(float(np.linalg.norm(e.translation)) / dt)
    if not rot:
        raise UndefinedMetric(f"no pose pairs span delta = {delta} s")
    return _rmse(rot), _rmse(trans)


def trajectory_score(est, gt, delta: float = 1.0, max_dt: float = 0.02) -> TrajectoryScore:
    rpe_rot, rpe_trans = rpe(est, gt, delta, max_dt)
    ape_rot, ape_trans = ape(est, gt, max_dt)
    return TrajectoryScore(rpe_rot, rpe_trans, ape_rot, ape_trans)


def angle_traces(est: vo.Trajectory, gt: vo.Trajectory, max_dt: float = 0.02):
    """Per-pair roll/pitch/yaw (ZYX) for plotting, one row per association."""
    rows = []
    for i, j in associate(est, gt, max_dt):
        t = float(est.timestamps()[i])
        er, ep, ey = euler_zyx_deg(est.poses()[i].rotation)
        gr, gp, gy = euler_zyx_deg(gt.poses()[j].rotation)
        rows.append(
            {
                "timestamp": t,
                "est_roll": er, "est_pitch": ep, "est_yaw": ey,
                "gt_roll": gr, "gt_pitch": gp, "gt_yaw": gy,
            }
        )
    return rows
