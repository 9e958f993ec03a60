"""Shared synthetic-scene builders for solver and acceptance tests."""

import numpy as np

from fuselidar.geometry import Intrinsics, RigidTransform, exp, project_points
from fuselidar.imageproc import EdgePixels
from fuselidar.pointcloud import EdgeSet
from fuselidar.synth import Box, RectPlane, SceneSpec, Sphere


def standard_rig():
    """Camera at world origin looking +z; LiDAR offset a few cm and tilted."""
    T_WC = RigidTransform.identity()
    T_WL = exp([0.01, -0.02, 0.015, 0.06, -0.03, 0.02])
    return T_WC, T_WL


def boxes_scene(intr, seed=0, n_boxes=3, duration=2.0, sigma_d=0.0,
                sigma_w=0.0, fruits=0):
    """Ground plane, back wall, and a few tilted boxes: edge-rich geometry."""
    rng = np.random.default_rng(seed)
    T_WC, T_WL = standard_rig()
    prims = [
        RectPlane(center=[0.0, 1.2, 3.0], normal=[0.0, -1.0, 0.05],
                  up=[0.0, 0.0, 1.0], half_u=4.0, half_v=3.0,
                  albedo=140.0, color=(120, 120, 120), name="ground"),
        RectPlane(center=[0.0, 0.0, 5.0], normal=[0.0, 0.0, -1.0],
                  up=[0.0, 1.0, 0.0], half_u=5.0, half_v=4.0,
                  albedo=90.0, color=(90, 100, 110), name="wall"),
    ]
    for k in range(n_boxes):
        yaw = rng.uniform(-0.6, 0.6)
        pitch = rng.uniform(-0.25, 0.25)
        center = np.array([rng.uniform(-0.9, 0.9),
                           rng.uniform(-0.5, 0.5),
                           rng.uniform(1.8, 3.2)])
        pose = exp([0.0, pitch, yaw, 0, 0, 0])
        pose = RigidTransform(pose.quat, center)
        half = rng.uniform(0.15, 0.35, size=3)
        prims.append(Box(pose=pose, half_sizes=half,
                         albedo=60.0 + 40.0 * k,
                         color=(200 - 30 * k, 160, 60 + 40 * k),
                         name=f"box{k}"))
    for k in range(fruits):
        center = np.array([rng.uniform(-0.7, 0.7),
                           rng.uniform(-0.45, 0.45),
                           rng.uniform(0.9, 1.6)])
        prims.append(Sphere(center=center, radius=rng.uniform(0.035, 0.045),
                            is_fruit=True, name=f"fruit{k}"))
    return SceneSpec(primitives=prims, intrinsics=intr, T_WC=T_WC, T_WL=T_WL,
                     duration=duration, sigma_d=sigma_d, sigma_w=sigma_w,
                     seed=seed)


def visible_segment_samples(truth, intr, spacing=0.01):
    """Sample the analytic box edges; keep samples visible from the camera.

    Returns (points_lidar (N,3), pixels (N,2), directions_lidar (N,3)).
    """
    T_CW = truth.T_WC.inverse()
    T_LW = truth.T_WL.inverse()
    pts_w, dirs_w = [], []
    for a, b in truth.edge_segments:
        length = np.linalg.norm(b - a)
        n = max(2, int(length / spacing))
        ts = (np.arange(n) + 0.5) / n
        seg = a[None, :] + ts[:, None] * (b - a)[None, :]
        pts_w.append(seg)
        d = (b - a) / length
        dirs_w.append(np.tile(d, (n, 1)))
    pts_w = np.concatenate(pts_w)
    dirs_w = np.concatenate(dirs_w)
    p_cam = T_CW.apply(pts_w)
    px, valid = project_points(p_cam, intr)
    in_frame = (valid & (px[:, 0] >= 1) & (px[:, 0] <= intr.width - 2)
                & (px[:, 1] >= 1) & (px[:, 1] <= intr.height - 2))
    return (T_LW.apply(pts_w[in_frame]), px[in_frame],
            dirs_w[in_frame] @ T_LW.R.T)


def oracle_edge_sets(truth, intr, lidar_spacing=0.02, image_spacing=0.004):
    """EdgeSet + EdgePixels generated from the analytic scene edges.

    The EdgePixels direction field stores the gradient angle, which is the
    projected edge tangent rotated by 90 degrees.
    """
    pts_l, _, dirs_l = visible_segment_samples(truth, intr, lidar_spacing)
    edge_set = EdgeSet(positions=pts_l, directions=dirs_l,
                       anchors=pts_l.copy(),
                       voxel_ids=np.zeros(len(pts_l), dtype=np.int64))

    ipts_l, ipx, idirs_l = visible_segment_samples(truth, intr, image_spacing)
    eps = 1e-3
    px_b, _ = project_points(truth.T_CL.apply(ipts_l + eps * idirs_l), intr)
    tangent = px_b - ipx
    norm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = tangent / np.where(norm == 0, 1.0, norm)
    grad_dir = np.arctan2(tangent[:, 0], -tangent[:, 1])
    pixels = EdgePixels(ipx[:, 0], ipx[:, 1], grad_dir)
    return edge_set, pixels
