"""SE(3) transforms and the pin-hole camera model with lens distortion.

Conventions used everywhere in the package:

* Rotations are stored as unit quaternions (w, x, y, z) and renormalized on
  every construction and composition.
* A twist is a 6-vector (rx, ry, rz, tx, ty, tz): rotation part in radians
  first, translation in meters second.
* ``exp``/``log`` are the standard SE(3) exponential and logarithm; solver
  updates compose on the left, T <- exp(xi) * T.
* Pixel coordinates are (u, v) with u along image columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, ConvergenceError

Z_MIN = 1e-6  # camera-frame depth below which projection is refused


# ---------------------------------------------------------------------------
# Intrinsics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Pin-hole camera with Brown-Conrady radial-tangential distortion.

    dist holds (k1, k2, p1, p2, k3).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    width: int = 1280
    height: int = 720

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if len(self.dist) != 5:
            raise ValueError("dist must hold 5 coefficients (k1, k2, p1, p2, k3)")
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def distort_normalized(xn, yn, intr: Intrinsics):
    """Apply the distortion polynomial to normalized coordinates."""
    k1, k2, p1, p2, k3 = intr.dist
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return xd, yd


def project_points(points_cam: np.ndarray, intr: Intrinsics):
    """Project camera-frame points to pixels.

    Returns (pixels (N, 2), valid (N,)) where valid is False for points with
    z <= Z_MIN. Pixels may fall outside the image; callers clip.
    """
    p = np.atleast_2d(np.asarray(points_cam, dtype=float))
    z = p[:, 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    xn = p[:, 0] / zs
    yn = p[:, 1] / zs
    xd, yd = distort_normalized(xn, yn, intr)
    px = np.stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], axis=1)
    return px, valid


def project(point_cam, intr: Intrinsics) -> np.ndarray:
    """Project a single camera-frame point; raises BehindCameraError for z <= Z_MIN."""
    px, valid = project_points(np.asarray(point_cam, dtype=float)[None, :], intr)
    if not valid[0]:
        raise BehindCameraError(f"point depth {point_cam[2]:.3g} m is behind the camera")
    return px[0]


def project_points_with_jacobian(points_cam, intr: Intrinsics):
    """Project camera-frame points and return d(pixel)/d(point) as well.

    Returns (pixels (N, 2), valid (N,), J (N, 2, 3)). Jacobians of invalid
    (behind-camera) points are garbage and must be masked by the caller.
    """
    p = np.atleast_2d(np.asarray(points_cam, dtype=float))
    z = p[:, 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    xn = p[:, 0] / zs
    yn = p[:, 1] / zs
    k1, k2, p1, p2, k3 = intr.dist
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    px = np.stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], axis=1)

    g = 2.0 * k1 + 4.0 * k2 * r2 + 6.0 * k3 * r2 * r2
    dxd_dxn = radial + g * xn * xn + 2.0 * p1 * yn + 6.0 * p2 * xn
    dxd_dyn = g * xn * yn + 2.0 * p1 * xn + 2.0 * p2 * yn  # symmetric Jacobian
    dyd_dyn = radial + g * yn * yn + 6.0 * p1 * yn + 2.0 * p2 * xn

    n = len(p)
    J_norm = np.zeros((n, 2, 3))
    J_norm[:, 0, 0] = 1.0 / zs
    J_norm[:, 0, 2] = -xn / zs
    J_norm[:, 1, 1] = 1.0 / zs
    J_norm[:, 1, 2] = -yn / zs
    D = np.zeros((n, 2, 2))
    D[:, 0, 0] = intr.fx * dxd_dxn
    D[:, 0, 1] = intr.fx * dxd_dyn
    D[:, 1, 0] = intr.fy * dxd_dyn
    D[:, 1, 1] = intr.fy * dyd_dyn
    J = np.einsum("nij,njk->nik", D, J_norm)
    return px, valid, J


def pose_jacobian(points_cam, J_px):
    """d(pixel)/d(left twist) for camera-frame points: (N, 2, 6), twist order
    (rx, ry, rz, tx, ty, tz)."""
    p_cam = np.atleast_2d(points_cam)
    n = len(p_cam)
    sk = np.zeros((n, 3, 3))
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    sk[:, 0, 1] = -z
    sk[:, 0, 2] = y
    sk[:, 1, 0] = z
    sk[:, 1, 2] = -x
    sk[:, 2, 0] = -y
    sk[:, 2, 1] = x
    J_T = np.zeros((n, 2, 6))
    J_T[:, :, :3] = -np.einsum("nij,njk->nik", J_px, sk)
    J_T[:, :, 3:] = J_px
    return J_T


def undistort_normalized(px: np.ndarray, intr: Intrinsics, max_iters=20, tol=1e-8):
    """Invert the distortion map: pixels -> undistorted normalized coordinates.

    Fixed-point iteration; raises ConvergenceError if any pixel fails to settle
    within tol (normalized units) after max_iters.
    """
    px = np.atleast_2d(np.asarray(px, dtype=float))
    xd = (px[:, 0] - intr.cx) / intr.fx
    yd = (px[:, 1] - intr.cy) / intr.fy
    k1, k2, p1, p2, k3 = intr.dist
    x, y = xd.copy(), yd.copy()
    for _ in range(max_iters):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        step = np.max(np.abs(x_new - x) + np.abs(y_new - y)) if x.size else 0.0
        x, y = x_new, y_new
        if step < tol:
            break
    else:
        raise ConvergenceError(
            f"undistortion did not converge within {max_iters} iterations")
    return np.stack([x, y], axis=1)


def undistort(px, intr: Intrinsics):
    """Map distorted pixel(s) to the pixel the ideal (distortion-free) model would see."""
    single = np.asarray(px).ndim == 1
    xy = undistort_normalized(px, intr)
    out = np.stack([intr.fx * xy[:, 0] + intr.cx,
                    intr.fy * xy[:, 1] + intr.cy], axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------

def _quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign keeps storage unique (w >= 0)
    if q[0] < 0:
        q = -q
    return q


def _quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(R):
    # Shepperd's method: pick the largest pivot for numerical safety
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return _quat_normalize(q)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: p_out = R @ p_in + t."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(self.quat))
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return RigidTransform(_matrix_to_quat(M[:3, :3]), M[:3, 3])

    @staticmethod
    def from_rotation_matrix(R, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(_matrix_to_quat(R), np.asarray(t, dtype=float))

    @property
    def R(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        q = _quat_multiply(self.quat, other.quat)
        t = self.apply(other.t)
        return RigidTransform(q, t)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return self.compose(other)
        return NotImplemented

    def inverse(self) -> "RigidTransform":
        q_inv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        R_inv = _quat_to_matrix(_quat_normalize(q_inv))
        return RigidTransform(q_inv, -R_inv @ self.t)

    def apply(self, points):
        """Transform a (3,) point or (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        w = min(1.0, abs(self.quat[0]))
        return 2.0 * np.arccos(w)

    def __repr__(self):
        q = ", ".join(f"{v:.6f}" for v in self.quat)
        t = ", ".join(f"{v:.6f}" for v in self.t)
        return f"RigidTransform(quat=({q}), t=({t}))"


def transform(T: RigidTransform, point):
    """R @ p + t for a single point or point array."""
    return T.apply(point)


def project_lidar(point_lidar, T_CL: RigidTransform, intr: Intrinsics):
    """Project a LiDAR-frame point into the image through the extrinsic."""
    return project(T_CL.apply(np.asarray(point_lidar, dtype=float)), intr)


# ---------------------------------------------------------------------------
# Twist exponential / logarithm
# ---------------------------------------------------------------------------

def _so3_exp(w):
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def _so3_log(R):
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_angle)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi: axis from the dominant diagonal entry
        A = 0.5 * (R + np.eye(3))
        axis_idx = int(np.argmax(np.diag(A)))
        axis = A[:, axis_idx] / np.sqrt(max(A[axis_idx, axis_idx], 1e-300))
        axis = axis / np.linalg.norm(axis)
        # fix sign using the off-diagonal antisymmetric part
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, s) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _so3_left_jacobian(w):
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * W + B * (W @ W)


def _so3_left_jacobian_inv(w):
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    coeff = (1.0 - cot) / theta**2
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


def exp(xi) -> RigidTransform:
    """SE(3) exponential of a twist (rx, ry, rz, tx, ty, tz)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    R = _so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return RigidTransform.from_rotation_matrix(R, t)


def log(T: RigidTransform) -> np.ndarray:
    """SE(3) logarithm; inverse of exp for rotation angles < pi."""
    w = _so3_log(T.R)
    v = _so3_left_jacobian_inv(w) @ T.t
    return np.concatenate([w, v])


def pose_error(T_a: RigidTransform, T_b: RigidTransform):
    """(rotation angle rad, translation norm m) of T_a relative to T_b."""
    d = T_a @ T_b.inverse()
    return d.rotation_angle(), float(np.linalg.norm(T_a.t - T_b.t))


def tangent_basis(w):
    """Two orthonormal vectors spanning the plane perpendicular to w.

    Deterministic: the seed axis is picked from the smallest |component|.
    """
    w = np.asarray(w, dtype=float)
    w = w / np.linalg.norm(w)
    seed = np.zeros(3)
    seed[int(np.argmin(np.abs(w)))] = 1.0
    t1 = np.cross(w, seed)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(w, t1)
    return t1, t2


def tangent_bases(W: np.ndarray):
    """Vectorized tangent_basis for unit rows of W: returns (T1, T2), each (N, 3)."""
    W = np.asarray(W, dtype=float)
    seeds = np.zeros_like(W)
    idx = np.argmin(np.abs(W), axis=1)
    seeds[np.arange(len(W)), idx] = 1.0
    T1 = np.cross(W, seeds)
    T1 /= np.linalg.norm(T1, axis=1, keepdims=True)
    T2 = np.cross(W, T1)
    return T1, T2


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_intrinsics(path) -> Intrinsics:
    """Read a key-value intrinsics file (``fx = 905.2`` style, ``#`` comments)."""
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, val = line.partition("=")
            elif ":" in line:
                key, _, val = line.partition(":")
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise ValueError(f"cannot parse intrinsics line: {line!r}")
                key, val = parts
            values[key.strip()] = float(val.strip())
    required = ["fx", "fy", "cx", "cy", "width", "height"]
    missing = [k for k in required if k not in values]
    if missing:
        raise ValueError(f"intrinsics file missing keys: {', '.join(missing)}")
    dist = tuple(values.get(k, 0.0) for k in ("k1", "k2", "p1", "p2", "k3"))
    return Intrinsics(fx=values["fx"], fy=values["fy"], cx=values["cx"],
                      cy=values["cy"], dist=dist,
                      width=int(values["width"]), height=int(values["height"]))


def write_intrinsics(intr: Intrinsics, path):
    keys = [("fx", intr.fx), ("fy", intr.fy), ("cx", intr.cx), ("cy", intr.cy),
            ("k1", intr.dist[0]), ("k2", intr.dist[1]), ("p1", intr.dist[2]),
            ("p2", intr.dist[3]), ("k3", intr.dist[4]),
            ("width", intr.width), ("height", intr.height)]
    with open(path, "w", encoding="utf-8") as f:
        for key, val in keys:
            f.write(f"{key} = {val:.9g}\n")


def read_extrinsic(path) -> RigidTransform:
    """Read an extrinsic file.

    Accepts either 16 numbers (4x4 row-major matrix) or 7 numbers
    (qw qx qy qz tx ty tz). Comment lines start with ``#``.
    """
    tokens = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    vals = [float(t) for t in tokens]
    if len(vals) == 16:
        M = np.array(vals).reshape(4, 4)
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-6):
            raise ValueError("last row of the 4x4 extrinsic must be 0 0 0 1")
        return RigidTransform.from_matrix(M)
    if len(vals) == 7:
        return RigidTransform(np.array(vals[:4]), np.array(vals[4:]))
    raise ValueError(
        f"extrinsic file must hold 16 (matrix) or 7 (quaternion) numbers, got {len(vals)}")


def write_extrinsic(T: RigidTransform, path):
    """Write the 4x4 row-major matrix form with 9 significant digits."""
    M = T.matrix()
    with open(path, "w", encoding="utf-8") as f:
        for row in M:
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")
