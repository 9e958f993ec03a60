"""Point-cloud container, PCD v0.7 file I/O, voxel grid, RANSAC planes,
and depth-continuous edge extraction.

Clouds are stored column-wise as numpy arrays. PCD files use fields
``x y z intensity`` (float64 in our binary files; float32 also accepted on
read) with an optional packed ``rgb`` field, PCL-style 0x00RRGGBB.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    MalformedHeaderError,
    NoPlaneError,
    TruncatedBodyError,
    UnsupportedLayoutError,
)

# defaults for edge extraction; the 2 cm line gate matches the sensor's
# range-error floor
DEFAULT_VOXEL_SIZE = 1.0
DEFAULT_ANGLE_MIN_DEG = 30.0
DEFAULT_LINE_DIST = 0.02
DEFAULT_MIN_PLANE_POINTS = 30
DEFAULT_PLANE_THRESHOLD = 0.01


@dataclass
class PointCloud:
    """Points with intensity and optional per-point color.

    xyz: (N, 3) float64 meters; intensity: (N,) float64 in 0..255;
    rgb: optional (N, 3) uint8. ``duration`` records the accumulation
    window of the scan in seconds.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    rgb: Optional[np.ndarray] = None
    sensor: str = ""
    duration: float = 0.0

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("intensity length must match point count")
        if self.rgb is not None:
            self.rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
            if len(self.rgb) != len(self.xyz):
                raise ValueError("rgb length must match point count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.xyz)

    def select(self, mask_or_indices) -> "PointCloud":
        rgb = self.rgb[mask_or_indices] if self.rgb is not None else None
        return PointCloud(self.xyz[mask_or_indices], self.intensity[mask_or_indices],
                          rgb=rgb, sensor=self.sensor, duration=self.duration)


@dataclass
class Plane:
    """n . p + d = 0 with unit normal; inliers index into the source cloud."""

    normal: np.ndarray
    d: float
    inliers: np.ndarray

    def distance(self, xyz) -> np.ndarray:
        return np.abs(np.asarray(xyz) @ self.normal + self.d)


@dataclass
class EdgeSet:
    """Depth-continuous edge points: cloud points near plane-intersection lines.

    positions: (N, 3) original cloud points; directions: (N, 3) unit line
    directions; anchors: (N, 3) a point on each line; voxel_ids: (N,) flat id
    of the source voxel.
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    voxel_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.positions)

    def line_distances(self) -> np.ndarray:
        """Distance of each position from its own reported line."""
        rel = self.positions - self.anchors
        along = np.einsum("ij,ij->i", rel, self.directions)
        perp = rel - along[:, None] * self.directions
        return np.linalg.norm(perp, axis=1)


# ---------------------------------------------------------------------------
# PCD I/O
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT",
                "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")


def _pack_rgb(rgb: np.ndarray) -> np.ndarray:
    r = rgb[:, 0].astype(np.uint32)
    g = rgb[:, 1].astype(np.uint32)
    b = rgb[:, 2].astype(np.uint32)
    return (r << 16) | (g << 8) | b


def _unpack_rgb(packed: np.ndarray) -> np.ndarray:
    packed = packed.astype(np.uint32)
    return np.stack([(packed >> 16) & 0xFF, (packed >> 8) & 0xFF, packed & 0xFF],
                    axis=1).astype(np.uint8)


def write_pcd(cloud: PointCloud, path, binary: bool = True):
    """Write a PCD v0.7 file. Binary mode stores coordinates as float64 so a
    write/read round trip is bit-exact."""
    n = len(cloud)
    has_rgb = cloud.rgb is not None
    fields = "x y z intensity" + (" rgb" if has_rgb else "")
    sizes = "8 8 8 8" + (" 4" if has_rgb else "")
    types = "F F F F" + (" U" if has_rgb else "")
    counts = "1 1 1 1" + (" 1" if has_rgb else "")
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        f"FIELDS {fields}\n"
        f"SIZE {sizes}\n"
        f"TYPE {types}\n"
        f"COUNT {counts}\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            if has_rgb:
                dt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                               ("intensity", "<f8"), ("rgb", "<u4")])
                rec = np.empty(n, dtype=dt)
                rec["rgb"] = _pack_rgb(cloud.rgb)
            else:
                dt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                               ("intensity", "<f8")])
                rec = np.empty(n, dtype=dt)
            rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
            rec["intensity"] = cloud.intensity
            f.write(rec.tobytes())
        else:
            lines = []
            packed = _pack_rgb(cloud.rgb) if has_rgb else None
            for i in range(n):
                row = (f"{cloud.xyz[i, 0]:.17g} {cloud.xyz[i, 1]:.17g} "
                       f"{cloud.xyz[i, 2]:.17g} {cloud.intensity[i]:.17g}")
                if has_rgb:
                    row += f" {packed[i]}"
                lines.append(row)
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def read_pcd(path) -> PointCloud:
    """Read a PCD v0.7 file (ascii or binary) with fields x y z intensity [rgb]."""
    with open(path, "rb") as f:
        raw = f.read()

    header = {}
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise MalformedHeaderError("header ended before DATA line", offset)
        line = raw[offset:end]
        line_start = offset
        offset = end + 1
        text = line.decode("ascii", errors="replace").strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        key = parts[0].upper()
        if key not in _HEADER_KEYS:
            raise MalformedHeaderError(f"unknown header key {parts[0]!r}", line_start)
        if key in header:
            raise MalformedHeaderError(f"duplicate header key {key}", line_start)
        header[key] = (parts[1:], line_start)
        if key == "DATA":
            break

    for required in ("FIELDS", "SIZE", "TYPE", "POINTS", "DATA"):
        if required not in header:
            raise MalformedHeaderError(f"missing header key {required}", offset)

    fields = [f.lower() for f in header["FIELDS"][0]]
    sizes = header["SIZE"][0]
    types = [t.upper() for t in header["TYPE"][0]]
    if not (len(fields) == len(sizes) == len(types)):
        raise MalformedHeaderError("FIELDS/SIZE/TYPE lengths disagree",
                                   header["SIZE"][1])
    try:
        sizes = [int(s) for s in sizes]
        n_points = int(header["POINTS"][0][0])
    except (ValueError, IndexError):
        raise MalformedHeaderError("non-integer SIZE or POINTS",
                                   header["POINTS"][1]) from None

    if "COUNT" in header:
        counts = header["COUNT"][0]
        if any(c != "1" for c in counts):
            raise UnsupportedLayoutError("multi-count fields are not supported",
                                         header["COUNT"][1])

    for needed in ("x", "y", "z", "intensity"):
        if needed not in fields:
            raise UnsupportedLayoutError(f"field {needed!r} missing "
                                         f"(have: {' '.join(fields)})",
                                         header["FIELDS"][1])
    extra = set(fields) - {"x", "y", "z", "intensity", "rgb"}
    if extra:
        raise UnsupportedLayoutError(
            f"unsupported fields: {' '.join(sorted(extra))}", header["FIELDS"][1])

    np_types = []
    for name, size, typ in zip(fields, sizes, types):
        if typ == "F" and size in (4, 8):
            np_types.append((name, f"<f{size}"))
        elif typ == "U" and size in (1, 2, 4):
            np_types.append((name, f"<u{size}"))
        elif typ == "I" and size in (1, 2, 4):
            np_types.append((name, f"<i{size}"))
        else:
            raise UnsupportedLayoutError(f"field {name}: TYPE {typ} SIZE {size} "
                                         "not supported", header["TYPE"][1])
    dt = np.dtype(np_types)

    mode = header["DATA"][0][0].lower()
    body = raw[offset:]
    if mode == "binary":
        need = dt.itemsize * n_points
        if len(body) < need:
            raise TruncatedBodyError(
                f"binary body holds {len(body)} bytes, need {need}",
                offset + len(body))
        rec = np.frombuffer(body[:need], dtype=dt)
    elif mode == "ascii":
        rows = []
        pos = offset
        for line in body.split(b"\n"):
            text = line.decode("ascii", errors="replace").strip()
            if text and not text.startswith("#"):
                vals = text.split()
                if len(vals) != len(fields):
                    raise MalformedHeaderError(
                        f"ascii row has {len(vals)} values, expected {len(fields)}", pos)
                rows.append(vals)
            pos += len(line) + 1
            if len(rows) == n_points:
                break
        if len(rows) < n_points:
            raise TruncatedBodyError(
                f"ascii body holds {len(rows)} points, header claims {n_points}",
                len(raw))
        rec = np.zeros(n_points, dtype=dt)
        arr = np.array(rows)
        for i, (name, _) in enumerate(np_types):
            rec[name] = arr[:, i].astype(np.float64)
    else:
        raise MalformedHeaderError(f"unknown DATA mode {mode!r}", header["DATA"][1])

    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    intensity = rec["intensity"].astype(np.float64)
    rgb = _unpack_rgb(rec["rgb"]) if "rgb" in fields else None
    return PointCloud(xyz, intensity, rgb=rgb)


# ---------------------------------------------------------------------------
# Voxel grid
# ---------------------------------------------------------------------------

def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates (N, 3) for each point."""
    return np.floor(np.asarray(xyz) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One point per occupied voxel at the centroid; intensity (and color)
    averaged. Output ordered by voxel id."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    keys = voxel_keys(cloud.xyz, voxel_size)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n_vox = len(counts)
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, cloud.xyz)
    centroids = sums / counts[:, None]
    isum = np.zeros(n_vox)
    np.add.at(isum, inverse, cloud.intensity)
    intensity = isum / counts
    rgb = None
    if cloud.rgb is not None:
        csum = np.zeros((n_vox, 3))
        np.add.at(csum, inverse, cloud.rgb.astype(np.float64))
        rgb = np.clip(np.rint(csum / counts[:, None]), 0, 255).astype(np.uint8)
    return PointCloud(centroids, intensity, rgb=rgb,
                      sensor=cloud.sensor, duration=cloud.duration)


# ---------------------------------------------------------------------------
# RANSAC plane fitting
# ---------------------------------------------------------------------------

def _fit_plane_tls(xyz: np.ndarray):
    """Total least squares plane through a point set: (unit normal, offset)."""
    centroid = xyz.mean(axis=0)
    centered = xyz - centroid
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    normal = eigvecs[:, 0]
    if eigvals[1] < 1e-18 * max(eigvals[2], 1e-300):
        return None  # collinear: plane direction undetermined
    # orientation convention: largest-magnitude component positive
    k = int(np.argmax(np.abs(normal)))
    if normal[k] < 0:
        normal = -normal
    return normal, float(-normal @ centroid)


def ransac_plane(cloud: PointCloud, threshold: float, max_iters: int = 500,
                 seed: int = 0) -> Plane:
    """Best plane by inlier count over random minimal samples, refined by
    total least squares over the inliers. Deterministic for a fixed seed.

    Raises NoPlaneError when the cloud is degenerate (fewer than 3 points or
    all points collinear).
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)
    n = len(xyz)
    if n < 3:
        raise NoPlaneError(f"need at least 3 points, got {n}")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_plane = None
    for _ in range(max_iters):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = xyz[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue  # collinear sample
        normal = normal / norm
        d = -normal @ p0
        count = int(np.count_nonzero(np.abs(xyz @ normal + d) <= threshold))
        if count > best_count:
            best_count = count
            best_plane = (normal, d)
    if best_plane is None or best_count < 3:
        raise NoPlaneError("no valid plane sample found (points collinear?)")

    normal, d = best_plane
    inliers = np.abs(xyz @ normal + d) <= threshold
    fit = _fit_plane_tls(xyz[inliers])
    if fit is not None:
        normal, d = fit
        inliers = np.abs(xyz @ normal + d) <= threshold
    idx = np.flatnonzero(inliers)
    if len(idx) < 3:
        raise NoPlaneError("refined plane keeps fewer than 3 inliers")
    return Plane(normal=normal, d=d, inliers=idx)


# ---------------------------------------------------------------------------
# Depth-continuous edge extraction
# ---------------------------------------------------------------------------

def _intersection_line(plane_a: Plane, plane_b: Plane, near_point: np.ndarray):
    """Line of intersection of two planes: (anchor closest to near_point, unit dir)."""
    direction = np.cross(plane_a.normal, plane_b.normal)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        return None
    direction = direction / norm
    # anchor: point on both planes closest to near_point
    A = np.stack([plane_a.normal, plane_b.normal])
    b = -np.array([plane_a.d, plane_b.d]) - A @ near_point
    shift, *_ = np.linalg.lstsq(A, b, rcond=None)
    anchor = near_point + shift
    return anchor, direction


def _voxel_edges(xyz: np.ndarray, voxel_id: int, angle_min_deg: float,
                 line_dist: float, min_plane_points: int,
                 plane_threshold: float, ransac_iters: int, seed: int):
    """Edge points of a single voxel, or None."""
    if len(xyz) < 2 * min_plane_points:
        return None
    sub = PointCloud(xyz, np.zeros(len(xyz)))
    try:
        plane_a = ransac_plane(sub, plane_threshold, max_iters=ransac_iters, seed=seed)
    except NoPlaneError:
        return None
    if len(plane_a.inliers) < min_plane_points:
        return None
    rest_mask = np.ones(len(xyz), dtype=bool)
    rest_mask[plane_a.inliers] = False
    rest = xyz[rest_mask]
    if len(rest) < min_plane_points:
        return None
    try:
        plane_b = ransac_plane(PointCloud(rest, np.zeros(len(rest))),
                               plane_threshold, max_iters=ransac_iters, seed=seed + 1)
    except NoPlaneError:
        return None
    if len(plane_b.inliers) < min_plane_points:
        return None
    cos_dihedral = abs(float(plane_a.normal @ plane_b.normal))
    if cos_dihedral > np.cos(np.deg2rad(angle_min_deg)):
        return None  # planes too close to parallel
    line = _intersection_line(plane_a, plane_b, xyz.mean(axis=0))
    if line is None:
        return None
    anchor, direction = line
    rel = xyz - anchor
    along = rel @ direction
    perp = rel - along[:, None] * direction
    near = np.linalg.norm(perp, axis=1) <= line_dist
    if not np.any(near):
        return None
    pts = xyz[near]
    k = len(pts)
    return (pts, np.tile(direction, (k, 1)), np.tile(anchor, (k, 1)),
            np.full(k, voxel_id, dtype=np.int64))


def extract_depth_continuous_edges(cloud: PointCloud,
                                   voxel_size: float = DEFAULT_VOXEL_SIZE,
                                   angle_min_deg: float = DEFAULT_ANGLE_MIN_DEG,
                                   line_dist: float = DEFAULT_LINE_DIST,
                                   min_plane_points: int = DEFAULT_MIN_PLANE_POINTS,
                                   plane_threshold: float = DEFAULT_PLANE_THRESHOLD,
                                   ransac_iters: int = 200,
                                   seed: int = 0,
                                   threads: int = 1) -> EdgeSet:
    """Find points lying on the intersection lines of adjacent surfaces.

    Per voxel: fit up to two planes by repeated RANSAC (first plane's inliers
    removed before the second fit). If both planes keep >= min_plane_points
    inliers and meet at a dihedral angle >= angle_min_deg, the voxel's points
    within line_dist of the intersection line are emitted, tagged with the
    line direction. Results are merged in voxel-id order, so the output is a
    deterministic function of (cloud, parameters, seed) for any threads value.
    """
    if len(cloud) == 0:
        raise ValueError("cloud must be non-empty")
    keys = voxel_keys(cloud.xyz, voxel_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    boundaries = np.searchsorted(inverse[order], np.arange(len(uniq)))
    groups = np.split(order, boundaries[1:])

    def job(i):
        return _voxel_edges(cloud.xyz[groups[i]], i, angle_min_deg, line_dist,
                            min_plane_points, plane_threshold, ransac_iters,
                            seed + 7919 * i)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(groups))))
    else:
        results = [job(i) for i in range(len(groups))]

    hits = [r for r in results if r is not None]
    if not hits:
        return EdgeSet()
    return EdgeSet(
        positions=np.concatenate([h[0] for h in hits]),
        directions=np.concatenate([h[1] for h in hits]),
        anchors=np.concatenate([h[2] for h in hits]),
        voxel_ids=np.concatenate([h[3] for h in hits]),
    )


def crop_box(cloud: PointCloud, lo, hi) -> PointCloud:
    """Points inside the axis-aligned box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise ValueError("box must have positive volume")
    m = np.all((cloud.xyz >= lo) & (cloud.xyz <= hi), axis=1)
    return cloud.select(m)


def merge(clouds) -> PointCloud:
    clouds = list(clouds)
    rgb = None
    if all(c.rgb is not None for c in clouds):
        rgb = np.concatenate([c.rgb for c in clouds])
    return PointCloud(np.concatenate([c.xyz for c in clouds]),
                      np.concatenate([c.intensity for c in clouds]),
                      rgb=rgb,
                      sensor=clouds[0].sensor if clouds else "",
                      duration=max((c.duration for c in clouds), default=0.0))
