"""Cloud/image fusion: colorized point clouds and image-aligned depth maps.

A depth image is a (H, W) float array of camera-frame z in meters with 0
marking pixels that received no data. On disk it is a 16-bit PNG in
millimeters plus a sidecar text file recording the scale.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .geometry import Intrinsics, RigidTransform, project_points
from .pointcloud import PointCloud

DEFAULT_SPLAT_RADIUS = 2
DEPTH_SCALE_M = 0.001  # one PNG unit = 1 mm


def colorize(cloud: PointCloud, image: np.ndarray, intr: Intrinsics,
             T_CL: RigidTransform) -> PointCloud:
    """Color each point from the pixel it projects to (nearest pixel).

    Points behind the camera or out of frame are dropped; survivors keep
    their input order.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    p_cam = T_CL.apply(cloud.xyz)
    px, valid = project_points(p_cam, intr)
    u = np.rint(px[:, 0]).astype(np.int64)
    v = np.rint(px[:, 1]).astype(np.int64)
    keep = valid & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    rgb = img[v[keep], u[keep]].astype(np.uint8)
    return PointCloud(cloud.xyz[keep], cloud.intensity[keep], rgb=rgb,
                      sensor=cloud.sensor, duration=cloud.duration)


def depth_map(cloud: PointCloud, intr: Intrinsics, T_CL: RigidTransform,
              splat_radius: int = DEFAULT_SPLAT_RADIUS) -> np.ndarray:
    """Z-buffered sparse depth image.

    Every point splats into a disc of splat_radius pixels; each pixel keeps
    the minimum camera-frame depth it receives (order-independent), and
    pixels never hit stay 0.
    """
    p_cam = T_CL.apply(cloud.xyz)
    px, valid = project_points(p_cam, intr)
    z = p_cam[:, 2]
    u = np.rint(px[:, 0]).astype(np.int64)
    v = np.rint(px[:, 1]).astype(np.int64)
    r = int(splat_radius)
    margin = r
    keep = (valid & (u >= -margin) & (u < intr.width + margin)
            & (v >= -margin) & (v < intr.height + margin))
    u, v, z = u[keep], v[keep], z[keep]

    depth = np.full((intr.height, intr.width), np.inf)
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            if du * du + dv * dv > r * r:
                continue
            uu = u + du
            vv = v + dv
            m = (uu >= 0) & (uu < intr.width) & (vv >= 0) & (vv < intr.height)
            np.minimum.at(depth, (vv[m], uu[m]), z[m])
    depth[~np.isfinite(depth)] = 0.0
    return depth


def backproject_depth(depth: np.ndarray, intr: Intrinsics):
    """All nonzero depth pixels as camera-frame 3D points.

    Returns (points (N, 3), pixel indices (N, 2) as (u, v) ints).
    """
    from .geometry import undistort_normalized

    vs, us = np.nonzero(depth > 0)
    z = depth[vs, us]
    px = np.stack([us.astype(float), vs.astype(float)], axis=1)
    xy = undistort_normalized(px, intr)
    pts = np.stack([xy[:, 0] * z, xy[:, 1] * z, z], axis=1)
    return pts, np.stack([us, vs], axis=1)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_depth_png(depth: np.ndarray, path):
    """16-bit PNG in millimeters (0 = no data) plus a ``<path>.scale.txt``
    sidecar recording meters per unit."""
    mm = np.clip(np.rint(np.asarray(depth) / DEPTH_SCALE_M), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(str(path))
    with open(str(path) + ".scale.txt", "w", encoding="utf-8") as f:
        f.write(f"meters_per_unit = {DEPTH_SCALE_M}\n")


def read_depth_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        mm = np.asarray(im, dtype=np.float64)
    scale = DEPTH_SCALE_M
    try:
        with open(str(path) + ".scale.txt", "r", encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    key, _, val = line.partition("=")
                    if key.strip() == "meters_per_unit":
                        scale = float(val.strip())
    except FileNotFoundError:
        pass
    return mm * scale


def write_label_png(labels: np.ndarray, path):
    """16-bit PNG instance label image (0 = background, k = instance k)."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("labels must fit in uint16")
    Image.fromarray(arr.astype(np.uint16)).save(str(path))


def read_label_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im, dtype=np.int32)
