"""Target-based extrinsic calibration with a checkerboard.

The board pose in the LiDAR frame is estimated by matching the cloud's
intensity pattern against the board template: each cloud point mapped into
the board frame scores the distance to its nearest inner corner when it
falls inside the board outline and its binarized intensity agrees with the
template there, and the worst-case corner distance otherwise. The mean
per-point score is minimized with Nelder-Mead over a 6-dof twist,
multi-started over the four in-plane quarter turns (the template pattern of
a board whose inner dimensions share parity is 180-degree symmetric, so the
matching orientation is finally picked against the image-side corner order
by reprojection). The extrinsic is then solved from matched 3D/2D corners
by Gauss-Newton with Levenberg damping on stall.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import evaluation, geometry
from .errors import (
    CannotBinarizeError,
    ConvergenceError,
    DegenerateGeometryError,
    InsufficientDataError,
)
from .geometry import Intrinsics, RigidTransform, exp, pose_error
from .pointcloud import PointCloud, crop_box, ransac_plane

DEFAULT_MIN_BOARD_POINTS = 500
DEFAULT_MAX_EVALS = 5000
DEFAULT_Z_TOL = 0.02
TEMPLATE_SAMPLE_STEP = 0.005


@dataclass(frozen=True)
class CheckerboardSpec:
    """Board geometry. Inner corner (r, c) sits at (c*s, r*s, 0) in the board
    frame; the outline extends one square beyond the corner hull and the cell
    diagonally outward from corner (0, 0) is dark."""

    inner_rows: int
    inner_cols: int
    square_size: float

    def __post_init__(self):
        if self.inner_rows < 2 or self.inner_cols < 2:
            raise ValueError("need at least 2x2 inner corners")
        if self.square_size <= 0:
            raise ValueError("square_size must be positive")

    @property
    def n_corners(self) -> int:
        return self.inner_rows * self.inner_cols

    def corners_board(self) -> np.ndarray:
        s = self.square_size
        return np.array([[c * s, r * s, 0.0]
                         for r in range(self.inner_rows)
                         for c in range(self.inner_cols)])

    def bounds(self):
        s = self.square_size
        return (-s, self.inner_cols * s, -s, self.inner_rows * s)

    def center_board(self) -> np.ndarray:
        s = self.square_size
        return np.array([(self.inner_cols - 1) * s / 2.0,
                         (self.inner_rows - 1) * s / 2.0, 0.0])

    def pattern_dark(self, xy) -> np.ndarray:
        """True where the template is dark at board-frame (x, y)."""
        xy = np.atleast_2d(xy)
        s = self.square_size
        cx = np.floor(xy[:, 0] / s).astype(int) + 1
        cy = np.floor(xy[:, 1] / s).astype(int) + 1
        return (cx + cy) % 2 == 0

    def template_points(self, step: float = TEMPLATE_SAMPLE_STEP):
        """Dense template samples with binary intensity labels (True = dark)."""
        x0, x1, y0, y1 = self.bounds()
        xs = np.arange(x0 + step / 2, x1, step)
        ys = np.arange(y0 + step / 2, y1, step)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        return pts, self.pattern_dark(pts[:, :2])

    def max_corner_distance(self) -> float:
        """Largest possible nearest-corner distance inside the outline
        (attained at the outline corners)."""
        return self.square_size * np.sqrt(2.0)


@dataclass
class BoardPose:
    T_LM: RigidTransform          # board frame -> LiDAR frame
    cost: float
    corners_lidar: np.ndarray     # (n_corners, 3)


# ---------------------------------------------------------------------------
# Intensity binarization
# ---------------------------------------------------------------------------

def otsu_threshold(values) -> float:
    """Otsu's threshold over a 256-bin histogram of 0..255 intensities.

    Raises CannotBinarizeError for a unimodal (zero between-class variance)
    histogram.
    """
    values = np.asarray(values, dtype=float).ravel()
    hist, edges = np.histogram(values, bins=256, range=(0.0, 255.0))
    p = hist.astype(float) / max(hist.sum(), 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    between[valid] = (mu_total * w0[valid] - mu[valid])**2 / (w0[valid] * w1[valid])
    if not np.any(valid) or between.max() <= 1e-12:
        raise CannotBinarizeError("intensity histogram is unimodal")
    k = int(np.argmax(between))
    return float(edges[k + 1])


# ---------------------------------------------------------------------------
# Board segmentation and pose estimation
# ---------------------------------------------------------------------------

def segment_board(cloud: PointCloud, roi_lo, roi_hi,
                  min_board_points: int = DEFAULT_MIN_BOARD_POINTS,
                  plane_threshold: float = 0.02, seed: int = 0) -> PointCloud:
    """Points inside the ROI box, reduced to the largest RANSAC plane."""
    inside = crop_box(cloud, roi_lo, roi_hi)
    if len(inside) < min_board_points:
        raise InsufficientDataError(
            f"{len(inside)} points in ROI, need {min_board_points}")
    plane = ransac_plane(inside, threshold=plane_threshold, seed=seed)
    board = inside.select(plane.inliers)
    if len(board) < min_board_points:
        raise InsufficientDataError(
            f"{len(board)} plane points in ROI, need {min_board_points}")
    return board


def board_pose_cost(board_cloud: PointCloud, spec: CheckerboardSpec,
                    T_LM: RigidTransform, threshold: Optional[float] = None,
                    z_tol: float = DEFAULT_Z_TOL) -> float:
    """Mean per-point template-matching score of a candidate board pose."""
    dark = _binarized(board_cloud, threshold)
    return _cost_arrays(board_cloud.xyz, dark, spec, T_LM, z_tol)


def _binarized(board_cloud: PointCloud, threshold: Optional[float]):
    thr = otsu_threshold(board_cloud.intensity) if threshold is None else threshold
    return board_cloud.intensity < thr


def _nearest_corner_distance(local, spec):
    """Distance to the nearest inner corner: clamped rounding onto the grid."""
    s = spec.square_size
    ix = np.clip(np.rint(local[:, 0] / s), 0, spec.inner_cols - 1)
    iy = np.clip(np.rint(local[:, 1] / s), 0, spec.inner_rows - 1)
    dx = local[:, 0] - ix * s
    dy = local[:, 1] - iy * s
    return np.sqrt(dx * dx + dy * dy + local[:, 2] ** 2)


def _cost_arrays(xyz, dark, spec, T_LM, z_tol):
    local = T_LM.inverse().apply(xyz)
    x0, x1, y0, y1 = spec.bounds()
    in_bounds = ((local[:, 0] >= x0) & (local[:, 0] <= x1)
                 & (local[:, 1] >= y0) & (local[:, 1] <= y1)
                 & (np.abs(local[:, 2]) <= z_tol))
    agree = spec.pattern_dark(local[:, :2]) == dark
    d = _nearest_corner_distance(local, spec)
    d_max = spec.max_corner_distance()
    # out-of-bounds points additionally pay their distance to the valid
    # region, so a derivative-free search always has a slope back to the
    # board instead of a flat worst-case plateau
    dx = np.maximum(np.maximum(x0 - local[:, 0], local[:, 0] - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - local[:, 1], local[:, 1] - y1), 0.0)
    dz = np.maximum(np.abs(local[:, 2]) - z_tol, 0.0)
    outside = np.sqrt(dx * dx + dy * dy + dz * dz)
    scores = np.where(in_bounds & agree, np.minimum(d, d_max), d_max + outside)
    return float(scores.mean())


def initial_board_pose(board_cloud: PointCloud,
                       spec: CheckerboardSpec) -> RigidTransform:
    """Plane plus in-plane PCA initial guess for the board pose."""
    xyz = board_cloud.xyz
    centroid = xyz.mean(axis=0)
    centered = xyz - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[2]
    if normal @ centroid < 0:
        normal = -normal  # board z points away from the sensor
    # longest board dimension along the largest point spread
    x_axis = vt[0] if spec.inner_cols >= spec.inner_rows else vt[1]
    y_axis = np.cross(normal, x_axis)
    R = np.stack([x_axis, y_axis, normal], axis=1)
    t = centroid - R @ spec.center_board()
    return RigidTransform.from_rotation_matrix(R, t)


def estimate_board_pose(board_cloud: PointCloud, spec: CheckerboardSpec,
                        T_init: RigidTransform,
                        max_evals: int = DEFAULT_MAX_EVALS,
                        z_tol: float = DEFAULT_Z_TOL) -> BoardPose:
    """Fit the board template to the segmented cloud.

    Derivative-free minimization (the in-bounds and intensity-agreement
    gates make the score discontinuous): Nelder-Mead over a right-composed
    6-dof twist, multi-started from the four in-plane quarter turns of
    T_init about the board center.
    """
    dark = _binarized(board_cloud, None)
    xyz = board_cloud.xyz
    center = spec.center_board()

    starts = []
    for k in range(4):
        angle = k * np.pi / 2.0
        spin = (RigidTransform(t=center)
                @ exp([0, 0, angle, 0, 0, 0])
                @ RigidTransform(t=-center))
        starts.append(T_init @ spin)

    def cost(xi, T_base):
        return _cost_arrays(xyz, dark, spec, T_base @ exp(xi), z_tol)

    candidates = []
    any_converged = False
    for T_start in starts:
        # restarted Nelder-Mead: the first round explores at the scale of the
        # expected initialization error, later rounds polish with a smaller
        # simplex; restarting also escapes premature simplex collapse
        T_cur = T_start
        budget = max_evals
        prev = np.inf
        converged = False
        res = None
        for scale in (0.03, 0.01, 0.003, 0.001, 3e-4):
            if budget <= 0:
                break
            simplex = np.zeros((7, 6))
            simplex[1:] = np.eye(6) * scale
            res = minimize(cost, np.zeros(6), method="Nelder-Mead",
                           args=(T_cur,),
                           options={"maxfev": min(budget, 1600), "xatol": 1e-6,
                                    "fatol": 1e-10, "adaptive": True,
                                    "initial_simplex": simplex})
            budget -= res.nfev
            T_cur = T_cur @ exp(res.x)
            converged = bool(res.success)
            if prev - res.fun < 1e-6:
                converged = True  # mean score improvement below a micron
                break
            prev = res.fun
        any_converged = any_converged or converged
        candidates.append((res.fun, T_cur))

    best_cost = min(c[0] for c in candidates)
    if not any_converged:
        raise ConvergenceError(
            f"board pose search did not converge within {max_evals} evaluations "
            f"per start", best_cost=best_cost)
    # the checker pattern of same-parity boards ties with its 180-degree
    # twin; among near-ties prefer the candidate closest to the init
    near = [c for c in candidates if c[0] <= best_cost * (1.0 + 1e-6) + 1e-12]
    cost_val, T_LM = min(near, key=lambda c: sum(pose_error(c[1], T_init)))
    return BoardPose(T_LM=T_LM, cost=cost_val,
                     corners_lidar=T_LM.apply(spec.corners_board()))


# ---------------------------------------------------------------------------
# Extrinsic from matched corners
# ---------------------------------------------------------------------------

def solve_extrinsic_from_corners(corners_3d, corners_2d, intr: Intrinsics,
                                 T_init: RigidTransform, max_iters: int = 100):
    """Gauss-Newton (Levenberg damping on stall) reprojection solve.

    corners_3d in the LiDAR frame matched index-wise to image corners_2d;
    at least 6 pairs. Returns (T_CL, ReprojectionStats).
    """
    P = np.asarray(corners_3d, dtype=float).reshape(-1, 3)
    Q = np.asarray(corners_2d, dtype=float).reshape(-1, 2)
    if len(P) != len(Q):
        raise ValueError("corner lists must be matched index-wise")
    if len(P) < 6:
        raise ValueError(f"need at least 6 correspondences, got {len(P)}")

    T = T_init
    lam = 0.0
    cost = _reproj_cost(P, Q, T, intr)
    for _ in range(max_iters):
        p_cam = P @ T.R.T + T.t
        px, valid, J_px = geometry.project_points_with_jacobian(p_cam, intr)
        if np.count_nonzero(valid) < 6:
            raise ValueError("fewer than 6 correspondences project in front of the camera")
        J_T = geometry.pose_jacobian(p_cam, J_px)
        r = (px - Q)[valid]
        J = J_T[valid].reshape(-1, 6)
        H = J.T @ J
        eigvals = np.linalg.eigvalsh(H)
        if eigvals[0] < 1e-12 * max(eigvals[-1], 1e-300):
            raise DegenerateGeometryError(
                "corner geometry is rank-deficient for a 6-dof solve",
                null_direction=np.linalg.eigh(H)[1][:, 0])
        g = J.T @ r.reshape(-1)
        step = np.linalg.solve(H + lam * np.eye(6), -g)
        T_new = exp(step) @ T
        new_cost = _reproj_cost(P, Q, T_new, intr)
        if new_cost <= cost:
            T = T_new
            improved = cost - new_cost
            cost = new_cost
            lam = lam / 3.0 if lam > 1e-12 else 0.0
            if np.linalg.norm(step) < 1e-14 or improved < 1e-30:
                break
        else:
            # stall: raise the damping and retry from the same iterate
            lam = max(lam * 10.0, 1e-6)
            if lam > 1e12:
                break
    stats = evaluation.reprojection_stats(P, Q, T, intr)
    return T, stats


def _reproj_cost(P, Q, T, intr):
    px, valid = geometry.project_points(T.apply(P), intr)
    if not np.any(valid):
        return np.inf
    return float(np.sum((px[valid] - Q[valid])**2))


def resolve_corner_orientation(corners_3d, corners_2d, intr: Intrinsics,
                               T_init: RigidTransform):
    """Pick between a board's two 180-degree corner orderings.

    The template pattern of same-parity boards is symmetric, so the LiDAR
    side cannot know which end the image detector called first; the order
    with the smaller reprojection error under T_init wins.
    """
    stats_fwd = evaluation.reprojection_stats(corners_3d, corners_2d, T_init, intr)
    stats_rev = evaluation.reprojection_stats(corners_3d[::-1], corners_2d, T_init, intr)
    if stats_rev.rms < stats_fwd.rms:
        return np.asarray(corners_3d)[::-1]
    return np.asarray(corners_3d)


@dataclass
class TargetCalibration:
    T_CL: RigidTransform
    stats: evaluation.ReprojectionStats
    board_poses: list = field(default_factory=list)
    per_pose_rms: list = field(default_factory=list)


def calibrate_target(board_clouds, corner_lists, intr: Intrinsics,
                     spec: CheckerboardSpec, T_init: RigidTransform,
                     max_evals: int = DEFAULT_MAX_EVALS) -> TargetCalibration:
    """Full target-based pipeline over one or more board placements.

    board_clouds: segmented planar board clouds (one per placement);
    corner_lists: matching image corner arrays in board order.
    """
    if len(board_clouds) != len(corner_lists) or not board_clouds:
        raise ValueError("need one corner list per board cloud")
    poses = []
    all_3d = []
    all_2d = []
    for cloud, corners_2d in zip(board_clouds, corner_lists):
        pose = estimate_board_pose(cloud, spec, initial_board_pose(cloud, spec),
                                   max_evals=max_evals)
        corners_3d = resolve_corner_orientation(pose.corners_lidar, corners_2d,
                                                intr, T_init)
        poses.append(pose)
        all_3d.append(corners_3d)
        all_2d.append(np.asarray(corners_2d, dtype=float))
    T, stats = solve_extrinsic_from_corners(np.concatenate(all_3d),
                                            np.concatenate(all_2d), intr, T_init)
    per_pose = [evaluation.reprojection_stats(c3, c2, T, intr).rms
                for c3, c2 in zip(all_3d, all_2d)]
    return TargetCalibration(T_CL=T, stats=stats, board_poses=poses,
                             per_pose_rms=per_pose)
