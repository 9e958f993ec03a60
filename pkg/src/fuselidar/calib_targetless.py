"""Targetless extrinsic calibration from matched LiDAR/image edges.

Each LiDAR edge point decomposes into a measured range d along a measured
bearing w; range noise acts along the bearing and bearing noise in its
tangent plane, so the point covariance is

    Sigma_L = sigma_d^2 w w^T + d^2 sigma_w^2 (t1 t1^T + t2 t2^T).

The reprojection residual of a correspondence is r = proj(T p) - q. Its
first-order noise is J_w W with W the stacked (range, bearing, pixel) noise,
and the extrinsic is the iteratively re-weighted least-squares minimizer of

    sum_i (r_i + J_Ti s)^T (J_wi Sigma_wi J_wi^T)^-1 (r_i + J_Ti s)

over the left-composed twist update s, T <- exp(s) T, until the step norm
drops below tolerance. The inverse of the accumulated normal matrix is the
twist covariance of the estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import (
    DegenerateGeometryError,
    DivergenceError,
    NoCorrespondencesError,
)
from .geometry import Intrinsics, RigidTransform, tangent_basis, tangent_bases

DEFAULT_MAX_PX_DIST = 20.0
DEFAULT_REMATCH_INTERVAL = 5
DEFAULT_DIRECTION_GATE_DEG = 45.0
DEFAULT_HUBER_DELTA = 2.0
MIN_PX_DIST_FLOOR = 3.0
DEGENERACY_EIG_RATIO = 1e-6


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise: range (m), bearing (rad, per tangent axis), pixel."""

    sigma_d: float = 0.02
    sigma_w: float = 1e-4
    sigma_pix: float = 1.0

    def __post_init__(self):
        if not (self.sigma_d > 0 and self.sigma_w > 0 and self.sigma_pix > 0):
            raise ValueError("all noise sigmas must be strictly positive")


def lidar_point_covariance(p, nm: NoiseModel) -> np.ndarray:
    """First-order 3x3 covariance of a LiDAR point under the noise model."""
    p = np.asarray(p, dtype=float)
    d = np.linalg.norm(p)
    if d <= 0:
        raise ValueError("point must have positive range")
    w = p / d
    t1, t2 = tangent_basis(w)
    return (nm.sigma_d**2 * np.outer(w, w)
            + (d * nm.sigma_w)**2 * (np.outer(t1, t1) + np.outer(t2, t2)))


@dataclass
class EdgeCorrespondence:
    """A LiDAR edge point matched to an image edge pixel."""

    p_lidar: np.ndarray
    q_image: np.ndarray
    lidar_cov: np.ndarray
    pixel_cov: np.ndarray

    def __post_init__(self):
        self.p_lidar = np.asarray(self.p_lidar, dtype=float).reshape(3)
        self.q_image = np.asarray(self.q_image, dtype=float).reshape(2)
        self.lidar_cov = np.asarray(self.lidar_cov, dtype=float).reshape(3, 3)
        self.pixel_cov = np.asarray(self.pixel_cov, dtype=float).reshape(2, 2)
        if self.d_hat <= 0:
            raise ValueError("LiDAR edge point must have positive range")

    @property
    def d_hat(self) -> float:
        return float(np.linalg.norm(self.p_lidar))

    @property
    def w_hat(self) -> np.ndarray:
        return self.p_lidar / self.d_hat


def make_correspondence(p_lidar, q_image, nm: NoiseModel) -> EdgeCorrespondence:
    return EdgeCorrespondence(
        p_lidar=p_lidar, q_image=q_image,
        lidar_cov=lidar_point_covariance(p_lidar, nm),
        pixel_cov=nm.sigma_pix**2 * np.eye(2))


def make_correspondences(points_lidar, pixels, nm: NoiseModel):
    return [make_correspondence(p, q, nm)
            for p, q in zip(np.asarray(points_lidar), np.asarray(pixels))]


@dataclass
class CalibSolution:
    T_CL: RigidTransform
    twist_covariance: np.ndarray
    iterations: int
    final_cost: float
    n_inliers: int
    n_behind_camera: int = 0
    converged: bool = True
    cost_history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Batch residual/Jacobian machinery
# ---------------------------------------------------------------------------

def _stack(correspondences):
    P = np.stack([c.p_lidar for c in correspondences])
    Q = np.stack([c.q_image for c in correspondences])
    LC = np.stack([c.lidar_cov for c in correspondences])
    PC = np.stack([c.pixel_cov for c in correspondences])
    return P, Q, LC, PC


def _projection_pieces(P, T: RigidTransform, intr: Intrinsics):
    """Camera points, pixels, validity, and d(pixel)/d(camera point) (N,2,3)."""
    p_cam = P @ T.R.T + T.t
    px, valid, J_px = geometry.project_points_with_jacobian(p_cam, intr)
    return p_cam, px, valid, J_px


def _batch_residuals(P, Q, T, intr):
    p_cam, px, valid, J_px = _projection_pieces(P, T, intr)
    return px - Q, valid, p_cam, J_px


def _batch_jacobians(P, T, intr):
    """J_T (N,2,6), J_w (N,2,5), plus (p_cam, valid, J_px)."""
    p_cam, _, valid, J_px = _projection_pieces(P, T, intr)
    J_T = geometry.pose_jacobian(p_cam, J_px)

    d = np.linalg.norm(P, axis=1)
    W = P / d[:, None]
    T1, T2 = tangent_bases(W)
    A = np.stack([W, d[:, None] * T1, d[:, None] * T2], axis=2)  # (N,3,3)
    J_pr = np.einsum("nij,jk->nik", J_px, T.R)
    n = len(P)
    J_w = np.zeros((n, 2, 5))
    J_w[:, :, :3] = np.einsum("nij,njk->nik", J_pr, A)
    J_w[:, 0, 3] = -1.0
    J_w[:, 1, 4] = -1.0
    return J_T, J_w, p_cam, valid, J_px


def residual(c: EdgeCorrespondence, T: RigidTransform,
             intr: Intrinsics) -> np.ndarray:
    """proj(T p) - q in pixels; raises BehindCameraError for z <= z_min."""
    px = geometry.project(T.apply(c.p_lidar), intr)
    return px - c.q_image


def residual_jacobians(c: EdgeCorrespondence, T: RigidTransform,
                       intr: Intrinsics):
    """(J_T 2x6, J_w 2x5) for one correspondence.

    J_T is the derivative against the left-composed twist (rx, ry, rz, tx,
    ty, tz); J_w against (range noise, two bearing tangent coords, two pixel
    coords). The pixel block is exactly -I.
    """
    J_T, J_w, _, valid, _ = _batch_jacobians(c.p_lidar[None, :], T, intr)
    if not valid[0]:
        from .errors import BehindCameraError
        raise BehindCameraError("correspondence is behind the camera")
    return J_T[0], J_w[0]


# ---------------------------------------------------------------------------
# Edge matching
# ---------------------------------------------------------------------------

def match_edges(lidar_edges, image_edges, T_init: RigidTransform,
                intr: Intrinsics, max_px_dist: float = DEFAULT_MAX_PX_DIST,
                nm: Optional[NoiseModel] = None,
                direction_gate_deg: float = DEFAULT_DIRECTION_GATE_DEG):
    """Pair LiDAR edge points with their nearest image edge pixels.

    LiDAR edge points projecting in-frame under T_init are matched to the
    closest image edge pixel; pairs farther than max_px_dist or whose
    projected 3D edge direction disagrees with the image edge tangent by
    more than direction_gate_deg are dropped.
    """
    nm = nm or NoiseModel()
    if len(lidar_edges) == 0 or len(image_edges) == 0:
        raise NoCorrespondencesError("no edges to match")
    positions = lidar_edges.positions
    p_cam = T_init.apply(positions)
    px, valid = geometry.project_points(p_cam, intr)
    in_frame = (valid & (px[:, 0] >= 0) & (px[:, 0] <= intr.width - 1)
                & (px[:, 1] >= 0) & (px[:, 1] <= intr.height - 1))
    if not np.any(in_frame):
        raise NoCorrespondencesError("no LiDAR edge point projects in-frame")

    tree = cKDTree(image_edges.positions())
    dist, nearest = tree.query(px[in_frame])
    ok = dist <= max_px_dist
    if not np.any(ok):
        raise NoCorrespondencesError(
            f"no pair within {max_px_dist} px (closest {dist.min():.1f} px)")

    idx_lidar = np.flatnonzero(in_frame)[ok]
    idx_image = nearest[ok]

    # direction gate: projected 3D edge direction vs image edge tangent
    eps = 0.01
    px_a, _ = geometry.project_points(T_init.apply(positions[idx_lidar]), intr)
    px_b, valid_b = geometry.project_points(
        T_init.apply(positions[idx_lidar] + eps * lidar_edges.directions[idx_lidar]), intr)
    proj_dir = px_b - px_a
    norms = np.linalg.norm(proj_dir, axis=1)
    good_norm = (norms > 1e-12) & valid_b
    proj_dir = np.where(good_norm[:, None], proj_dir / np.where(norms[:, None] == 0, 1, norms[:, None]), 0.0)
    tangents = image_edges.tangents()[idx_image]
    cosang = np.abs(np.einsum("ij,ij->i", proj_dir, tangents))
    keep = good_norm & (cosang >= np.cos(np.deg2rad(direction_gate_deg)))
    if not np.any(keep):
        raise NoCorrespondencesError("direction gate removed every pair")

    idx_lidar = idx_lidar[keep]
    idx_image = idx_image[keep]
    q = image_edges.positions()[idx_image]
    return [make_correspondence(positions[i], q[k], nm)
            for k, i in enumerate(idx_lidar)]


# ---------------------------------------------------------------------------
# Iterative ML estimation
# ---------------------------------------------------------------------------

def _inv2x2(M):
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    inv = np.empty_like(M)
    inv[:, 0, 0] = M[:, 1, 1]
    inv[:, 1, 1] = M[:, 0, 0]
    inv[:, 0, 1] = -M[:, 0, 1]
    inv[:, 1, 0] = -M[:, 1, 0]
    return inv / det[:, None, None]


def _normal_equations(P, Q, LC, PC, T, intr, huber_delta):
    r, valid, p_cam, J_px = _batch_residuals(P, Q, T, intr)
    J_T = geometry.pose_jacobian(p_cam, J_px)
    B = np.einsum("nij,jk->nik", J_px, T.R)
    M = np.einsum("nij,njk,nlk->nil", B, LC, B) + PC
    S = _inv2x2(M)
    if huber_delta is not None:
        e2 = np.einsum("ni,nij,nj->n", r, S, r)
        e = np.sqrt(np.maximum(e2, 0.0))
        w = np.where(e > huber_delta, huber_delta / np.where(e == 0, 1, e), 1.0)
        S = S * w[:, None, None]

    m = valid
    H = np.einsum("nji,njk,nkl->il", J_T[m], S[m], J_T[m])
    gvec = np.einsum("nji,njk,nk->i", J_T[m], S[m], r[m])
    cost = float(np.einsum("ni,nij,nj->", r[m], S[m], r[m]))
    return H, gvec, cost, int(np.count_nonzero(~valid)), int(np.count_nonzero(m))


def _check_degeneracy(H, ratio=DEGENERACY_EIG_RATIO):
    eigvals, eigvecs = np.linalg.eigh(H)
    if eigvals[-1] <= 0 or eigvals[0] < ratio * eigvals[-1]:
        direction = eigvecs[:, 0]
        labels = ["rx", "ry", "rz", "tx", "ty", "tz"]
        dominant = ", ".join(f"{labels[i]}={direction[i]:+.3f}"
                             for i in np.argsort(-np.abs(direction))[:3])
        raise DegenerateGeometryError(
            "edge geometry leaves a twist direction unobservable "
            f"(eigenvalue ratio {eigvals[0] / max(eigvals[-1], 1e-300):.2e}; "
            f"near-null direction: {dominant})",
            null_direction=direction)


def estimate_extrinsic(correspondences, T_init: RigidTransform,
                       nm: Optional[NoiseModel] = None,
                       intr: Optional[Intrinsics] = None,
                       max_iters: int = 50, tol: float = 1e-10,
                       huber_delta: Optional[float] = None,
                       rematch: Optional[Callable] = None,
                       rematch_interval: int = DEFAULT_REMATCH_INTERVAL,
                       max_px_dist: float = DEFAULT_MAX_PX_DIST) -> CalibSolution:
    """Iterative maximum-likelihood extrinsic estimation.

    correspondences: list of EdgeCorrespondence (>= 10).
    rematch: optional callable (T, px_dist) -> new correspondence list,
    invoked every rematch_interval iterations with the px gate halved each
    time (floor MIN_PX_DIST_FLOOR), ICP-style.

    Raises DegenerateGeometryError when the normal matrix is rank-deficient
    (all edges in one direction) and DivergenceError when the weighted cost
    increases on three consecutive iterations between re-matches.
    """
    if intr is None:
        raise ValueError("intrinsics are required")
    if len(correspondences) < 10:
        raise ValueError(f"need at least 10 correspondences, got {len(correspondences)}")
    if nm is not None:
        # re-weight under a caller-supplied noise model
        correspondences = [make_correspondence(c.p_lidar, c.q_image, nm)
                           for c in correspondences]

    P, Q, LC, PC = _stack(correspondences)
    T = T_init
    history = []
    n_behind_total = 0
    increases = 0
    prev_cost = None
    px_dist = max_px_dist
    iterations = 0
    converged = False

    for it in range(max_iters):
        iterations = it + 1
        if rematch is not None and it > 0 and it % rematch_interval == 0:
            px_dist = max(px_dist / 2.0, MIN_PX_DIST_FLOOR)
            fresh = rematch(T, px_dist)
            if len(fresh) >= 10:
                P, Q, LC, PC = _stack(fresh)
                correspondences = fresh
            prev_cost = None
            increases = 0

        H, g, cost, n_behind, n_valid = _normal_equations(P, Q, LC, PC, T, intr,
                                                          huber_delta)
        n_behind_total += n_behind
        if n_valid < 10:
            raise NoCorrespondencesError(
                f"only {n_valid} correspondences remain in front of the camera")
        _check_degeneracy(H)
        history.append(cost)
        if prev_cost is not None:
            increases = increases + 1 if cost > prev_cost else 0
            if increases >= 3:
                raise DivergenceError(
                    "weighted cost increased on three consecutive iterations",
                    best_cost=min(history), history=history)
        prev_cost = cost

        damping = 1e-9 * np.trace(H)
        step = np.linalg.solve(H + damping * np.eye(6), -g)
        T = geometry.exp(step) @ T
        if np.linalg.norm(step) < tol:
            converged = True
            break

    H, g, cost, _, n_valid = _normal_equations(P, Q, LC, PC, T, intr, huber_delta)
    _check_degeneracy(H)
    history.append(cost)
    return CalibSolution(
        T_CL=T,
        twist_covariance=np.linalg.inv(H),
        iterations=iterations,
        final_cost=cost,
        n_inliers=n_valid,
        n_behind_camera=n_behind_total,
        converged=converged,
        cost_history=history,
    )
