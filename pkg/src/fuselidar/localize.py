"""Per-fruit 3D localization from instance masks and an aligned depth image.

Pipeline per instance: gather the camera-frame points behind the mask's
depth pixels, reject depth outliers with a one-pass z-score on the
camera-z coordinate, take the centroid, transform it into the robot frame,
and quantify uncertainty as the covariance of the supporting points (its
determinant is the scalar uncertainty measure).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientSupportError, NoDepthError
from .geometry import Intrinsics, RigidTransform, undistort_normalized

DEFAULT_Z_MAX = 2.0
DEFAULT_MIN_SUPPORT = 5


@dataclass
class FruitMask:
    """Binary instance mask over the image; bbox is (x0, y0, w, h) in pixels."""

    instance_id: int
    mask: np.ndarray
    bbox: Optional[tuple] = None
    confidence: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("mask must be a 2-D boolean image")
        vs, us = np.nonzero(self.mask)
        if self.bbox is None:
            if len(us):
                self.bbox = (int(us.min()), int(vs.min()),
                             int(us.max() - us.min() + 1), int(vs.max() - vs.min() + 1))
            else:
                self.bbox = (0, 0, 0, 0)
        elif len(us):
            x0, y0, w, h = self.bbox
            if (us.min() < x0 or us.max() >= x0 + w
                    or vs.min() < y0 or vs.max() >= y0 + h):
                raise ValueError("mask has pixels outside its bounding box")


@dataclass
class FruitEstimate:
    instance_id: int
    location_camera: np.ndarray
    location_robot: np.ndarray
    support: int
    covariance: np.ndarray      # 3x3 covariance of the supporting points
    uncertainty: float          # det(covariance), m^6
    sd: np.ndarray              # per-axis standard deviations, meters
    confidence: float = 1.0


def mask_points(mask: FruitMask, depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Back-project every mask pixel with nonzero depth to a camera-frame point."""
    depth = np.asarray(depth)
    if depth.shape != mask.mask.shape:
        raise ValueError("mask and depth image dimensions must match")
    m = mask.mask & (depth > 0)
    vs, us = np.nonzero(m)
    if len(us) == 0:
        raise NoDepthError(f"instance {mask.instance_id}: no mask pixel has depth")
    z = depth[vs, us]
    px = np.stack([us.astype(float), vs.astype(float)], axis=1)
    xy = undistort_normalized(px, intr)
    return np.stack([xy[:, 0] * z, xy[:, 1] * z, z], axis=1)


def zscore_filter(points, z_max: float = DEFAULT_Z_MAX):
    """One-pass z-score rejection on the camera-z coordinate.

    Uses the population standard deviation of z; when it is zero every point
    is retained. Returns (inliers, outliers).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    z = pts[:, 2]
    std = z.std()
    if std == 0:
        return pts, pts[:0]
    score = np.abs(z - z.mean()) / std
    keep = score <= z_max
    return pts[keep], pts[~keep]


def fruit_location(inliers, min_support: int = DEFAULT_MIN_SUPPORT) -> np.ndarray:
    """Arithmetic centroid of the supporting points."""
    pts = np.asarray(inliers, dtype=float).reshape(-1, 3)
    if len(pts) < min_support:
        raise InsufficientSupportError(
            f"{len(pts)} supporting points, need {min_support}")
    return pts.mean(axis=0)


def to_robot_frame(p_camera, T_RC: RigidTransform) -> np.ndarray:
    return T_RC.apply(np.asarray(p_camera, dtype=float))


def estimate_uncertainty(inliers, min_support: int = DEFAULT_MIN_SUPPORT):
    """(covariance 3x3, det, per-axis sd) of the supporting points."""
    pts = np.asarray(inliers, dtype=float).reshape(-1, 3)
    if len(pts) < min_support:
        raise InsufficientSupportError(
            f"{len(pts)} supporting points, need {min_support}")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (len(pts) - 1)
    return cov, float(np.linalg.det(cov)), np.sqrt(np.diag(cov))


def localize_fruits(masks, depth, intr: Intrinsics,
                    T_RC: Optional[RigidTransform] = None,
                    z_max: float = DEFAULT_Z_MAX,
                    min_support: int = DEFAULT_MIN_SUPPORT,
                    threads: int = 1):
    """Run the full per-fruit pipeline over a list of FruitMask.

    Returns (estimates sorted by instance id, failures as (id, reason) pairs).
    Per-fruit work is independent; results are keyed and ordered by instance
    id so any threads value yields identical output.
    """
    T_RC = T_RC or RigidTransform.identity()

    def job(mask):
        try:
            pts = mask_points(mask, depth, intr)
            if len(pts) < 3:
                raise InsufficientSupportError(f"{len(pts)} depth pixels")
            inliers, _ = zscore_filter(pts, z_max=z_max)
            loc_c = fruit_location(inliers, min_support=min_support)
            cov, det, sd = estimate_uncertainty(inliers, min_support=min_support)
            return FruitEstimate(
                instance_id=mask.instance_id,
                location_camera=loc_c,
                location_robot=to_robot_frame(loc_c, T_RC),
                support=len(inliers),
                covariance=cov, uncertainty=det, sd=sd,
                confidence=mask.confidence), None
        except (NoDepthError, InsufficientSupportError, ValueError) as e:
            return None, (mask.instance_id, f"{type(e).__name__}: {e}")

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, masks))
    else:
        results = [job(m) for m in masks]

    estimates = sorted((r[0] for r in results if r[0] is not None),
                       key=lambda e: e.instance_id)
    failures = sorted((r[1] for r in results if r[1] is not None))
    return estimates, failures


# ---------------------------------------------------------------------------
# Mask file formats
# ---------------------------------------------------------------------------

def masks_from_label_image(labels: np.ndarray):
    """Instance masks from a label image (0 = background, k = instance k)."""
    labels = np.asarray(labels)
    out = []
    for k in np.unique(labels):
        if k == 0:
            continue
        out.append(FruitMask(instance_id=int(k), mask=labels == k))
    return out


def _rle_encode(mask: np.ndarray):
    """Row-major run lengths, alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if len(flat) == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def _rle_decode(runs, shape):
    total = int(shape[0]) * int(shape[1])
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise ValueError(f"run lengths sum to {pos}, mask has {total} pixels")
    return flat.reshape(int(shape[0]), int(shape[1]))


def write_masks_json(masks, path):
    """Structured text mask file: instances with RLE masks, bbox, confidence."""
    payload = []
    for m in masks:
        payload.append({
            "instance_id": m.instance_id,
            "confidence": m.confidence,
            "bbox": list(m.bbox),
            "size": [int(m.mask.shape[0]), int(m.mask.shape[1])],
            "rle": _rle_encode(m.mask),
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"instances": payload}, f, sort_keys=True)


def read_masks_json(path):
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    out = []
    for item in data["instances"]:
        mask = _rle_decode(item["rle"], item["size"])
        out.append(FruitMask(instance_id=int(item["instance_id"]), mask=mask,
                             bbox=tuple(item["bbox"]) if item.get("bbox") else None,
                             confidence=float(item.get("confidence", 1.0))))
    return out


def estimates_table(estimates) -> str:
    head = ("  id    cam x/m    cam y/m    cam z/m    rob x/m    rob y/m    rob z/m"
            "  support      sd x/m      sd y/m      sd z/m   det(cov)/m^6")
    lines = [head, "-" * len(head)]
    for e in estimates:
        c, r, s = e.location_camera, e.location_robot, e.sd
        lines.append(f"{e.instance_id:>4}  {c[0]:>9.4f}  {c[1]:>9.4f}  {c[2]:>9.4f}"
                     f"  {r[0]:>9.4f}  {r[1]:>9.4f}  {r[2]:>9.4f}  {e.support:>7}"
                     f"  {s[0]:>10.6f}  {s[1]:>10.6f}  {s[2]:>10.6f}  {e.uncertainty:>13.6e}")
    return "\n".join(lines)


def estimates_to_json(estimates) -> str:
    payload = [{
        "instance_id": e.instance_id,
        "location_camera": [float(v) for v in e.location_camera],
        "location_robot": [float(v) for v in e.location_robot],
        "support": e.support,
        "sd": [float(v) for v in e.sd],
        "uncertainty": e.uncertainty,
        "confidence": e.confidence,
    } for e in estimates]
    return json.dumps({"fruits": payload}, indent=2, sort_keys=True)
