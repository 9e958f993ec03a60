"""Synthetic scene generation: the ground-truth oracle for the whole toolkit.

A scene is a list of geometric primitives plus camera/LiDAR poses and scan
parameters. ``generate`` ray-casts a LiDAR point cloud (random directions in
the sensor's circular field of view, range and bearing noise injected along
each ray) and renders a color image through the same distorted pin-hole
model, together with exact per-pixel depth, per-point and per-pixel surface
labels, true checkerboard corner pixels, and analytic per-fruit centroid
expectations.

Everything is a deterministic function of (spec, seed in spec).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import geometry
from .geometry import Intrinsics, RigidTransform, tangent_bases, undistort_normalized
from .pointcloud import PointCloud

DEFAULT_POINTS_PER_SECOND = 100_000.0
DEFAULT_FOV_HALF_ANGLE_DEG = 35.2  # 70.4 degree circular cone
DEFAULT_SIGMA_D = 0.01


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass
class RectPlane:
    """Finite rectangle: center, unit normal, in-plane up direction, half sizes."""

    center: np.ndarray
    normal: np.ndarray
    up: np.ndarray
    half_u: float
    half_v: float
    albedo: float = 150.0
    color: tuple = (150, 150, 150)
    name: str = "rect"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.normal = _unit(self.normal)
        up = np.asarray(self.up, dtype=float)
        up = up - (up @ self.normal) * self.normal
        self.v_axis = _unit(up)
        self.u_axis = np.cross(self.v_axis, self.normal)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        t = ((self.center - origin) @ self.normal) / denom
        pts = origin + t[:, None] * dirs
        rel = pts - self.center
        hit = ((t > 1e-6)
               & (np.abs(rel @ self.u_axis) <= self.half_u)
               & (np.abs(rel @ self.v_axis) <= self.half_v))
        return np.where(hit, t, np.inf)

    def shade(self, pts):
        n = len(pts)
        return np.full(n, self.albedo), np.tile(np.asarray(self.color, float), (n, 1))

    def surface_distance(self, pts):
        return np.abs((pts - self.center) @ self.normal)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 180.0
    color: tuple = (200, 40, 40)
    is_fruit: bool = False
    name: str = "sphere"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-6, t0, t1)
        return np.where(ok & (t > 1e-6), t, np.inf)

    def shade(self, pts):
        n = len(pts)
        return np.full(n, self.albedo), np.tile(np.asarray(self.color, float), (n, 1))

    def surface_distance(self, pts):
        return np.abs(np.linalg.norm(pts - self.center, axis=1) - self.radius)


@dataclass
class Box:
    """Oriented box: pose maps box frame (axis-aligned, centered) to world."""

    pose: RigidTransform
    half_sizes: np.ndarray
    albedo: float = 120.0
    color: tuple = (170, 140, 90)
    name: str = "box"

    def __post_init__(self):
        self.half_sizes = np.asarray(self.half_sizes, dtype=float)

    def intersect(self, origin, dirs):
        inv = self.pose.inverse()
        o = inv.apply(origin)
        d = dirs @ inv.R.T
        t_lo = np.full(len(dirs), -np.inf)
        t_hi = np.full(len(dirs), np.inf)
        for axis in range(3):
            da = d[:, axis]
            safe = np.where(np.abs(da) < 1e-12, 1e-12, da)
            t1 = (-self.half_sizes[axis] - o[axis]) / safe
            t2 = (self.half_sizes[axis] - o[axis]) / safe
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            parallel_miss = (np.abs(da) < 1e-12) & (np.abs(o[axis]) > self.half_sizes[axis])
            near = np.where(parallel_miss, np.inf, near)
            t_lo = np.maximum(t_lo, near)
            t_hi = np.minimum(t_hi, far)
        hit = (t_hi >= t_lo) & (t_hi > 1e-6)
        t = np.where(t_lo > 1e-6, t_lo, t_hi)
        return np.where(hit & (t > 1e-6), t, np.inf)

    def shade(self, pts):
        n = len(pts)
        return np.full(n, self.albedo), np.tile(np.asarray(self.color, float), (n, 1))

    def surface_distance(self, pts):
        local = np.abs(self.pose.inverse().apply(pts))
        return np.abs(np.max(local - self.half_sizes, axis=1))

    def edge_segments(self):
        """The 12 box edges as (start, end) pairs in world coordinates."""
        h = self.half_sizes
        corners = np.array([[sx * h[0], sy * h[1], sz * h[2]]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        corners = self.pose.apply(corners)
        pairs = [(0, 1), (2, 3), (4, 5), (6, 7),
                 (0, 2), (1, 3), (4, 6), (5, 7),
                 (0, 4), (1, 5), (2, 6), (3, 7)]
        return [(corners[a], corners[b]) for a, b in pairs]


@dataclass
class Cylinder:
    """Finite open cylinder between p0 and p1 (a branch)."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float
    albedo: float = 90.0
    color: tuple = (110, 80, 50)
    name: str = "cylinder"

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float)
        self.p1 = np.asarray(self.p1, dtype=float)
        self.axis = _unit(self.p1 - self.p0)
        self.length = float(np.linalg.norm(self.p1 - self.p0))

    def intersect(self, origin, dirs):
        oc = origin - self.p0
        d_perp = dirs - np.outer(dirs @ self.axis, self.axis)
        o_perp = oc - (oc @ self.axis) * self.axis
        a = np.einsum("ij,ij->i", d_perp, d_perp)
        b = d_perp @ o_perp
        c = o_perp @ o_perp - self.radius**2
        safe_a = np.where(a < 1e-12, 1.0, a)
        disc = b * b - safe_a * c
        ok = (disc >= 0) & (a >= 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / safe_a
        t1 = (-b + sq) / safe_a
        t = np.where(t0 > 1e-6, t0, t1)
        axial = oc @ self.axis + t * (dirs @ self.axis)
        hit = ok & (t > 1e-6) & (axial >= 0) & (axial <= self.length)
        return np.where(hit, t, np.inf)

    def shade(self, pts):
        n = len(pts)
        return np.full(n, self.albedo), np.tile(np.asarray(self.color, float), (n, 1))

    def surface_distance(self, pts):
        rel = pts - self.p0
        ax = rel @ self.axis
        perp = rel - np.outer(ax, self.axis)
        return np.abs(np.linalg.norm(perp, axis=1) - self.radius)


@dataclass
class Checkerboard:
    """Planar checkerboard: board frame has corners at (c*square, r*square, 0)
    and the outline one square beyond the corner hull; the cell diagonally
    outward from corner (0, 0) is dark."""

    inner_rows: int
    inner_cols: int
    square: float
    pose: RigidTransform  # board frame -> world
    dark: float = 30.0
    light: float = 220.0
    name: str = "checkerboard"

    def _bounds(self):
        s = self.square
        return (-s, self.inner_cols * s, -s, self.inner_rows * s)

    def intersect(self, origin, dirs):
        normal = self.pose.R[:, 2]
        center = self.pose.t
        denom = dirs @ normal
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        t = ((center - origin) @ normal) / denom
        pts = origin + t[:, None] * dirs
        local = (pts - self.pose.t) @ self.pose.R
        x0, x1, y0, y1 = self._bounds()
        hit = ((t > 1e-6) & (local[:, 0] >= x0) & (local[:, 0] <= x1)
               & (local[:, 1] >= y0) & (local[:, 1] <= y1))
        return np.where(hit, t, np.inf)

    def pattern_intensity(self, local_xy):
        """Template intensity at board-frame (x, y)."""
        cell_x = np.floor(np.asarray(local_xy)[..., 0] / self.square).astype(int) + 1
        cell_y = np.floor(np.asarray(local_xy)[..., 1] / self.square).astype(int) + 1
        return np.where((cell_x + cell_y) % 2 == 0, self.dark, self.light)

    def shade(self, pts):
        local = (pts - self.pose.t) @ self.pose.R
        inten = self.pattern_intensity(local[:, :2])
        return inten, np.repeat(inten[:, None], 3, axis=1)

    def surface_distance(self, pts):
        normal = self.pose.R[:, 2]
        return np.abs((pts - self.pose.t) @ normal)

    def corners_board(self):
        g = np.array([[c * self.square, r * self.square, 0.0]
                      for r in range(self.inner_rows) for c in range(self.inner_cols)])
        return g

    def corners_world(self):
        return self.pose.apply(self.corners_board())


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    primitives: list
    intrinsics: Intrinsics
    T_WC: RigidTransform  # camera frame -> world
    T_WL: RigidTransform  # lidar frame -> world
    T_RC: RigidTransform = field(default_factory=RigidTransform.identity)
    points_per_second: float = DEFAULT_POINTS_PER_SECOND
    duration: float = 2.0
    fov_half_angle_deg: float = DEFAULT_FOV_HALF_ANGLE_DEG
    sigma_d: float = DEFAULT_SIGMA_D
    sigma_w: float = 0.0
    intensity_sigma: float = 0.0
    supersample: int = 2
    background_color: tuple = (136, 156, 178)
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not (0.0 < self.fov_half_angle_deg < 90.0):
            raise ValueError("fov_half_angle_deg must be in (0, 90)")

    @property
    def T_CL(self) -> RigidTransform:
        """Ground-truth extrinsic: lidar frame -> camera frame."""
        return self.T_WC.inverse() @ self.T_WL


@dataclass
class SceneTruth:
    """Everything the generator knows exactly."""

    T_CL: RigidTransform
    T_WC: RigidTransform
    T_WL: RigidTransform
    T_RC: RigidTransform
    intrinsics: Intrinsics
    depth: np.ndarray              # (H, W) camera-frame z in meters, 0 = miss
    labels: np.ndarray             # (H, W) primitive index + 1, 0 = background
    point_labels: np.ndarray       # (N,) primitive index per cloud point
    point_true_xyz: np.ndarray     # (N, 3) noiseless lidar-frame points
    fruit_indices: list            # primitive indices flagged is_fruit
    fruit_centers_world: np.ndarray
    fruit_centers_camera: np.ndarray
    fruit_centers_robot: np.ndarray
    fruit_radii: np.ndarray
    board_corners: dict            # prim index -> (corners_world, corner_pixels)
    edge_segments: list            # [(a_world, b_world), ...] analytic 3D edges
    spheres: dict                  # prim index -> (center_world, radius)

    def fruit_mask(self, fruit_index: int) -> np.ndarray:
        return self.labels == fruit_index + 1

    def expected_fruit_centroid(self, fruit_index: int, z_max: float = 2.0):
        """Analytic expected output of the localization pipeline for one fruit.

        For every pixel of the fruit's true mask, intersects the pixel-center
        ray with the sphere in closed form, applies the same one-pass z-score
        rule the localizer uses, and returns (expected centroid camera-frame,
        bias vector relative to the true center, support count). This is the
        visible-cap bias: the camera sees only the front of the sphere, so the
        pixel-averaged centroid sits ahead of the true center.
        """
        center, radius = self.spheres[fruit_index]
        center_cam = (self.T_WC.inverse()).apply(center)
        mask = self.fruit_mask(fruit_index)
        vs, us = np.nonzero(mask)
        if len(us) == 0:
            raise ValueError("fruit has no visible pixels")
        px = np.stack([us.astype(float), vs.astype(float)], axis=1)
        xy = undistort_normalized(px, self.intrinsics)
        dirs = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        b = dirs @ center_cam
        c = center_cam @ center_cam - radius**2
        disc = b * b - c
        keep = disc >= 0
        t = b[keep] - np.sqrt(disc[keep])
        pts = dirs[keep] * t[:, None]
        z = pts[:, 2]
        std = z.std()
        if std > 0:
            inl = np.abs(z - z.mean()) / std <= z_max
            pts = pts[inl]
        centroid = pts.mean(axis=0)
        return centroid, centroid - center_cam, len(pts)


class Scene:
    """Castable collection of primitives."""

    def __init__(self, primitives):
        self.primitives = list(primitives)

    def cast(self, origin, dirs):
        """Nearest-hit ray cast. Returns (t, prim_index) with inf/-1 for misses."""
        n = len(dirs)
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1, dtype=np.int32)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origin, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, i, best_i)
        return best_t, best_i

    def shade(self, pts, prim_idx):
        albedo = np.zeros(len(pts))
        color = np.zeros((len(pts), 3))
        for i, prim in enumerate(self.primitives):
            m = prim_idx == i
            if np.any(m):
                a, c = prim.shade(pts[m])
                albedo[m] = a
                color[m] = c
        return albedo, color


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _camera_rays(intr: Intrinsics, supersample: int):
    """Unit ray directions (camera frame) for every subsample of every pixel."""
    ss = max(1, int(supersample))
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ou, ov = np.meshgrid(offs, offs)
    base_u, base_v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    u = base_u[None, :, :] + ou.ravel()[:, None, None]
    v = base_v[None, :, :] + ov.ravel()[:, None, None]
    px = np.stack([u.ravel(), v.ravel()], axis=1)
    xy = undistort_normalized(px, intr)
    dirs = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, ss * ss


def generate(spec: SceneSpec):
    """Render (PointCloud in the lidar frame, color image, SceneTruth)."""
    scene = Scene(spec.primitives)
    rng = np.random.default_rng(spec.seed)
    intr = spec.intrinsics

    # --- LiDAR scan: uniform random directions inside the FoV cone (+z) ---
    n_rays = int(round(spec.points_per_second * spec.duration))
    cos_max = np.cos(np.deg2rad(spec.fov_half_angle_deg))
    cos_t = rng.uniform(cos_max, 1.0, size=n_rays)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n_rays)
    sin_t = np.sqrt(1.0 - cos_t**2)
    dirs_l = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    dirs_w = dirs_l @ spec.T_WL.R.T
    origin_l = spec.T_WL.t

    t_hit, prim_idx = scene.cast(origin_l, dirs_w)
    hit = np.isfinite(t_hit)
    t_hit, prim_idx, dirs_l_h = t_hit[hit], prim_idx[hit], dirs_l[hit]
    pts_world = origin_l + t_hit[:, None] * dirs_w[hit]
    albedo, _ = scene.shade(pts_world, prim_idx)

    n_h = len(t_hit)
    ranges = t_hit + (rng.normal(0.0, spec.sigma_d, size=n_h) if spec.sigma_d > 0
                      else np.zeros(n_h))
    if spec.sigma_w > 0:
        t1, t2 = tangent_bases(dirs_l_h)
        a = rng.normal(0.0, spec.sigma_w, size=(n_h, 2))
        dirs_noisy = dirs_l_h + a[:, 0:1] * t1 + a[:, 1:2] * t2
        dirs_noisy /= np.linalg.norm(dirs_noisy, axis=1, keepdims=True)
    else:
        dirs_noisy = dirs_l_h
    intensity = albedo + (rng.normal(0.0, spec.intensity_sigma, size=n_h)
                          if spec.intensity_sigma > 0 else 0.0)
    cloud = PointCloud(ranges[:, None] * dirs_noisy,
                       np.clip(intensity, 0.0, 255.0),
                       sensor="synthetic", duration=spec.duration)

    # --- camera image (supersampled) ---
    cam_dirs, n_sub = _camera_rays(intr, spec.supersample)
    cam_dirs_w = cam_dirs @ spec.T_WC.R.T
    t_img, idx_img = scene.cast(spec.T_WC.t, cam_dirs_w)
    img_hit = np.isfinite(t_img)
    colors = np.tile(np.asarray(spec.background_color, float), (len(cam_dirs), 1))
    if np.any(img_hit):
        pts_img = spec.T_WC.t + t_img[img_hit, None] * cam_dirs_w[img_hit]
        _, shade_color = scene.shade(pts_img, idx_img[img_hit])
        colors[img_hit] = shade_color
    image = colors.reshape(n_sub, intr.height, intr.width, 3).mean(axis=0)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    # --- exact depth and labels from pixel-center rays ---
    center_dirs, _ = _camera_rays(intr, 1)
    center_dirs_w = center_dirs @ spec.T_WC.R.T
    t_c, idx_c = scene.cast(spec.T_WC.t, center_dirs_w)
    hit_c = np.isfinite(t_c)
    depth = np.zeros(len(center_dirs))
    depth[hit_c] = t_c[hit_c] * center_dirs[hit_c, 2]  # camera-frame z
    depth = depth.reshape(intr.height, intr.width)
    labels = np.where(hit_c, idx_c + 1, 0).astype(np.int32)
    labels = labels.reshape(intr.height, intr.width)

    # --- ground-truth bookkeeping ---
    T_CW = spec.T_WC.inverse()
    fruit_indices = [i for i, p in enumerate(spec.primitives)
                     if isinstance(p, Sphere) and p.is_fruit]
    centers_w = (np.array([spec.primitives[i].center for i in fruit_indices])
                 if fruit_indices else np.zeros((0, 3)))
    centers_c = T_CW.apply(centers_w) if len(centers_w) else centers_w
    centers_r = spec.T_RC.apply(centers_c) if len(centers_c) else centers_c
    radii = np.array([spec.primitives[i].radius for i in fruit_indices])

    board_corners = {}
    for i, prim in enumerate(spec.primitives):
        if isinstance(prim, Checkerboard):
            cw = prim.corners_world()
            px, valid = geometry.project_points(T_CW.apply(cw), intr)
            board_corners[i] = (cw, px if np.all(valid) else px)

    edge_segments = []
    for prim in spec.primitives:
        if isinstance(prim, Box):
            edge_segments.extend(prim.edge_segments())

    spheres = {i: (spec.primitives[i].center.copy(), spec.primitives[i].radius)
               for i in fruit_indices}

    truth = SceneTruth(
        T_CL=spec.T_CL, T_WC=spec.T_WC, T_WL=spec.T_WL, T_RC=spec.T_RC,
        intrinsics=intr, depth=depth, labels=labels,
        point_labels=prim_idx.astype(np.int32),
        point_true_xyz=t_hit[:, None] * dirs_l_h,
        fruit_indices=fruit_indices,
        fruit_centers_world=centers_w, fruit_centers_camera=centers_c,
        fruit_centers_robot=centers_r, fruit_radii=radii,
        board_corners=board_corners, edge_segments=edge_segments,
        spheres=spheres)
    return cloud, image, truth


def stereo_noise_variant(truth: SceneTruth, base_sigma: float,
                         depth_coeff: float, seed: int = 0) -> np.ndarray:
    """Perturb the true depth image with per-pixel Gaussian noise whose
    standard deviation grows as sigma(z) = base_sigma + depth_coeff * z**2
    (stereo-like when depth_coeff > 0, constant LiDAR-like otherwise)."""
    rng = np.random.default_rng(seed)
    depth = truth.depth.copy()
    m = depth > 0
    sigma = base_sigma + depth_coeff * depth[m] ** 2
    depth[m] = np.maximum(depth[m] + sigma * rng.normal(size=m.sum()), 1e-3)
    return depth


# ---------------------------------------------------------------------------
# Scene config files
# ---------------------------------------------------------------------------

def _pose_from_config(cfg) -> RigidTransform:
    if cfg is None:
        return RigidTransform.identity()
    if "matrix" in cfg:
        return RigidTransform.from_matrix(np.asarray(cfg["matrix"], float).reshape(4, 4))
    t = np.asarray(cfg.get("t", [0.0, 0.0, 0.0]), dtype=float)
    if "quat" in cfg:
        return RigidTransform(np.asarray(cfg["quat"], float), t)
    rpy = np.deg2rad(np.asarray(cfg.get("rpy_deg", [0.0, 0.0, 0.0]), dtype=float))
    cr, sr = np.cos(rpy[0]), np.sin(rpy[0])
    cp, sp = np.cos(rpy[1]), np.sin(rpy[1])
    cy, sy = np.cos(rpy[2]), np.sin(rpy[2])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return RigidTransform.from_rotation_matrix(Rz @ Ry @ Rx, t)


def _primitive_from_config(cfg):
    kind = cfg["type"]
    if kind == "rect":
        return RectPlane(center=cfg["center"], normal=cfg["normal"],
                         up=cfg.get("up", [0.0, 1.0, 0.0]),
                         half_u=float(cfg["half_u"]), half_v=float(cfg["half_v"]),
                         albedo=float(cfg.get("albedo", 150.0)),
                         color=tuple(cfg.get("color", (150, 150, 150))),
                         name=cfg.get("name", "rect"))
    if kind == "sphere":
        return Sphere(center=cfg["center"], radius=float(cfg["radius"]),
                      albedo=float(cfg.get("albedo", 180.0)),
                      color=tuple(cfg.get("color", (200, 40, 40))),
                      is_fruit=bool(cfg.get("fruit", False)),
                      name=cfg.get("name", "sphere"))
    if kind == "box":
        return Box(pose=_pose_from_config(cfg.get("pose")),
                   half_sizes=cfg["half_sizes"],
                   albedo=float(cfg.get("albedo", 120.0)),
                   color=tuple(cfg.get("color", (170, 140, 90))),
                   name=cfg.get("name", "box"))
    if kind == "cylinder":
        return Cylinder(p0=cfg["p0"], p1=cfg["p1"], radius=float(cfg["radius"]),
                        albedo=float(cfg.get("albedo", 90.0)),
                        color=tuple(cfg.get("color", (110, 80, 50))),
                        name=cfg.get("name", "cylinder"))
    if kind == "checkerboard":
        return Checkerboard(inner_rows=int(cfg["inner_rows"]),
                            inner_cols=int(cfg["inner_cols"]),
                            square=float(cfg["square"]),
                            pose=_pose_from_config(cfg.get("pose")),
                            name=cfg.get("name", "checkerboard"))
    raise ValueError(f"unknown primitive type {kind!r}")


def load_scene(path) -> SceneSpec:
    """Load a SceneSpec from a YAML config file."""
    with open(path, "r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f)
    cam = cfg["camera"]
    ic = cam["intrinsics"]
    intr = Intrinsics(fx=float(ic["fx"]), fy=float(ic["fy"]), cx=float(ic["cx"]),
                      cy=float(ic["cy"]),
                      dist=tuple(float(ic.get(k, 0.0)) for k in ("k1", "k2", "p1", "p2", "k3")),
                      width=int(ic["width"]), height=int(ic["height"]))
    scan = cfg.get("scan", {})
    render = cfg.get("render", {})
    return SceneSpec(
        primitives=[_primitive_from_config(p) for p in cfg.get("primitives", [])],
        intrinsics=intr,
        T_WC=_pose_from_config(cam.get("pose")),
        T_WL=_pose_from_config(cfg.get("lidar", {}).get("pose")),
        T_RC=_pose_from_config(cfg.get("robot", {}).get("pose")),
        points_per_second=float(scan.get("points_per_second", DEFAULT_POINTS_PER_SECOND)),
        duration=float(scan.get("duration", 2.0)),
        fov_half_angle_deg=float(scan.get("fov_half_angle_deg", DEFAULT_FOV_HALF_ANGLE_DEG)),
        sigma_d=float(scan.get("sigma_d", DEFAULT_SIGMA_D)),
        sigma_w=float(scan.get("sigma_w", 0.0)),
        intensity_sigma=float(scan.get("intensity_sigma", 0.0)),
        supersample=int(render.get("supersample", 2)),
        seed=int(cfg.get("seed", 0)),
    )


def write_truth_files(truth: SceneTruth, out_dir):
    """Write the ground-truth sidecar files the CLI pipeline consumes."""
    import os

    from . import fusion
    from .geometry import write_extrinsic
    from .imageproc import write_corners

    os.makedirs(out_dir, exist_ok=True)
    write_extrinsic(truth.T_CL, os.path.join(out_dir, "extrinsic_true.txt"))
    fusion.write_depth_png(truth.depth, os.path.join(out_dir, "depth_true.png"))
    fusion.write_label_png(truth.labels, os.path.join(out_dir, "labels_true.png"))
    for i, (_, px) in sorted(truth.board_corners.items()):
        write_corners(px, os.path.join(out_dir, f"corners_true_{i}.txt"))
    fruits = []
    for k, fi in enumerate(truth.fruit_indices):
        centroid, bias, support = truth.expected_fruit_centroid(fi)
        fruits.append({
            "instance": int(fi + 1),
            "center_camera": [float(v) for v in truth.fruit_centers_camera[k]],
            "center_robot": [float(v) for v in truth.fruit_centers_robot[k]],
            "radius": float(truth.fruit_radii[k]),
            "expected_centroid_camera": [float(v) for v in centroid],
            "visible_cap_bias": [float(v) for v in bias],
            "expected_support": int(support),
        })
    with open(os.path.join(out_dir, "fruits_true.json"), "w", encoding="utf-8") as f:
        json.dump({"fruits": fruits}, f, indent=2, sort_keys=True)
