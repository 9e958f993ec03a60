"""Image-side feature extraction: grayscale handling, Canny edges with
sub-pixel localization, and checkerboard corner detection with saddle-point
refinement.

Images are numpy arrays, row-major, uint8; pixel (u, v) indexes column u of
row v. Edge and corner coordinates are float (sub-pixel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DetectionFailedError

DEFAULT_CANNY_SIGMA = 1.4
DEFAULT_CANNY_LOW = 40.0
DEFAULT_CANNY_HIGH = 100.0


@dataclass
class EdgePixels:
    """Edge pixels with sub-pixel positions and gradient directions (radians)."""

    u: np.ndarray
    v: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return len(self.u)

    def positions(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=1)

    def tangents(self) -> np.ndarray:
        """Unit tangent of the edge at each pixel (perpendicular to gradient)."""
        return np.stack([-np.sin(self.direction), np.cos(self.direction)], axis=1)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma grayscale conversion; pass-through for single-channel input."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8) if img.dtype != np.uint8 else img
    w = np.array([0.299, 0.587, 0.114])
    return np.clip(img[..., :3].astype(np.float64) @ w, 0, 255).astype(np.uint8)


def _validate_gray(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    return img.astype(np.float64)


# ---------------------------------------------------------------------------
# Canny
# ---------------------------------------------------------------------------

def canny(img, low: float = DEFAULT_CANNY_LOW, high: float = DEFAULT_CANNY_HIGH,
          sigma: float = DEFAULT_CANNY_SIGMA) -> EdgePixels:
    """Canny edge detection.

    Gaussian smoothing, Sobel gradients, quantized non-maximum suppression
    with parabolic sub-pixel refinement along the gradient, then
    double-threshold hysteresis. Thresholds are on the Sobel gradient
    magnitude (0..255-scale images give magnitudes up to ~4*255).
    """
    if not (0 <= low < high):
        raise ValueError("thresholds must satisfy 0 <= low < high")
    f = ndimage.gaussian_filter(_validate_gray(img), sigma=sigma, mode="nearest")
    gx = ndimage.sobel(f, axis=1, mode="nearest")
    gy = ndimage.sobel(f, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    h, w = mag.shape

    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.floor((theta + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    # offsets (dv, du) along the gradient for each quantized direction
    offsets = np.array([(0, 1), (1, 1), (1, 0), (1, -1)])

    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = mag
    vv, uu = np.mgrid[0:h, 0:w]
    dv = offsets[bins][..., 0]
    du = offsets[bins][..., 1]
    n_plus = padded[vv + 1 + dv, uu + 1 + du]
    n_minus = padded[vv + 1 - dv, uu + 1 - du]
    # asymmetric tie-break keeps single-pixel ridges on symmetric plateaus
    is_max = (mag >= n_minus) & (mag > n_plus) & (mag > 0)

    weak = is_max & (mag >= low)
    strong = is_max & (mag >= high)
    if not np.any(strong):
        return EdgePixels(np.zeros(0), np.zeros(0), np.zeros(0))
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_labels = np.unique(labels[strong])
    final = weak & np.isin(labels, keep_labels[keep_labels > 0])

    vs, us = np.nonzero(final)
    # parabolic sub-pixel peak along the quantized gradient direction
    m0 = mag[vs, us]
    mp = n_plus[vs, us]
    mm = n_minus[vs, us]
    denom = mm - 2.0 * m0 + mp
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (mm - mp) / np.where(denom == 0, 1, denom), 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    step = offsets[bins[vs, us]]
    u_sub = us + shift * step[:, 1]
    v_sub = vs + shift * step[:, 0]
    return EdgePixels(u_sub, v_sub, np.arctan2(gy[vs, us], gx[vs, us]))


# ---------------------------------------------------------------------------
# Checkerboard corners
# ---------------------------------------------------------------------------

def _shift(img: np.ndarray, dv: int, du: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    vs0, vs1 = max(0, -dv), min(h, h - dv)
    us0, us1 = max(0, -du), min(w, w - du)
    out[vs0:vs1, us0:us1] = img[vs0 + dv:vs1 + dv, us0 + du:us1 + du]
    return out


def _xcorner_response(img: np.ndarray, radius: int = 3):
    """Checkerboard-junction response from a 4-sample ring.

    |A+C-B-D| - |A-C| - |B-D| with A..D at opposite ring positions is maximal
    at X-junctions and cancels exactly at edges and single-square (L) corners,
    which a plain Harris detector cannot separate from the inner grid.
    """
    r = radius
    best = None
    for ring in (((-r, -r), (-r, r), (r, r), (r, -r)),
                 ((-r, 0), (0, r), (r, 0), (0, -r))):
        A = _shift(img, *ring[0])
        B = _shift(img, *ring[1])
        C = _shift(img, *ring[2])
        D = _shift(img, *ring[3])
        s = np.abs(A + C - B - D) - np.abs(A - C) - np.abs(B - D)
        best = s if best is None else np.maximum(best, s)
    best = np.maximum(best, 0.0)
    best[:r, :] = 0.0
    best[-r:, :] = 0.0
    best[:, :r] = 0.0
    best[:, -r:] = 0.0
    return ndimage.gaussian_filter(best, 1.0, mode="constant")


def _saddle_refine(gx_img: np.ndarray, gy_img: np.ndarray, u: float, v: float,
                   half: int = 4, iterations: int = 4):
    """Sub-pixel refinement of a checkerboard junction near (u, v).

    At the true saddle every local gradient g is orthogonal to the ray from
    the corner, so the corner solves sum(w g g^T) c = sum(w g g^T p) over the
    window. Re-centers and repeats; returns the input unchanged when the
    window leaves the image or the normal matrix is near-singular.
    """
    h, w = gx_img.shape
    cu, cv = float(u), float(v)
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1]
    xs = xs.ravel().astype(float)
    ys = ys.ravel().astype(float)
    weight = np.exp(-(xs**2 + ys**2) / (2.0 * (half / 2.0)**2))
    for _ in range(iterations):
        if not (half + 1 <= cu < w - half - 1 and half + 1 <= cv < h - half - 1):
            return u, v
        # window centered on the fractional estimate keeps the constraint
        # symmetric; integer-centered windows bias the solve
        px = xs + cu
        py = ys + cv
        coords = np.stack([py, px])
        gx = ndimage.map_coordinates(gx_img, coords, order=1, mode="nearest")
        gy = ndimage.map_coordinates(gy_img, coords, order=1, mode="nearest")
        wgx2 = weight * gx * gx
        wgy2 = weight * gy * gy
        wgxy = weight * gx * gy
        A = np.array([[wgx2.sum(), wgxy.sum()], [wgxy.sum(), wgy2.sum()]])
        b = np.array([(wgx2 * px + wgxy * py).sum(), (wgxy * px + wgy2 * py).sum()])
        if abs(np.linalg.det(A)) < 1e-9:
            return u, v
        nu, nv = np.linalg.solve(A, b)
        if abs(nu - u) > 2 * half or abs(nv - v) > 2 * half:
            return u, v
        moved = abs(nu - cu) + abs(nv - cv)
        cu, cv = float(nu), float(nv)
        if moved < 1e-4:
            break
    return cu, cv


def _order_grid(pts: np.ndarray, inner_rows: int, inner_cols: int):
    """Order candidate corners row-major along the board's own axes.

    Returns the (rows*cols, 2) ordered array or None when the candidates do
    not form a consistent grid.
    """
    n = inner_rows * inner_cols
    center = pts.mean(axis=0)
    rel = pts - center
    _, _, vt = np.linalg.svd(rel, full_matrices=False)
    for axes, (n_rows, n_cols) in (((vt[1], vt[0]), (inner_rows, inner_cols)),
                                   ((vt[0], vt[1]), (inner_rows, inner_cols))):
        col_axis, row_axis = axes
        b = rel @ row_axis
        order = np.argsort(b, kind="stable")
        rows = [order[i * n_cols:(i + 1) * n_cols] for i in range(n_rows)]
        # each chunk must be one grid row: spread along row_axis small vs gap
        ok = True
        row_means = []
        for chunk in rows:
            vals = b[chunk]
            row_means.append(vals.mean())
            if vals.max() - vals.min() > 0.5 * _grid_pitch(pts, n):
                ok = False
                break
        if ok and len(row_means) > 1:
            gaps = np.diff(row_means)
            if np.min(gaps) < 0.25 * np.median(gaps):
                ok = False
        if not ok:
            continue
        ordered = []
        for chunk in rows:
            a = rel[chunk] @ col_axis
            ordered.append(pts[chunk[np.argsort(a, kind="stable")]])
        grid = np.concatenate(ordered)
        if _grid_consistent(grid, n_rows, n_cols):
            return grid
    return None


def _grid_pitch(pts: np.ndarray, n: int) -> float:
    # crude spacing estimate: nearest-neighbor median distance
    d2 = np.sum((pts[:, None, :] - pts[None, :, :])**2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(d2.min(axis=1))))


def _grid_consistent(grid: np.ndarray, n_rows: int, n_cols: int) -> bool:
    g = grid.reshape(n_rows, n_cols, 2)
    col_steps = np.diff(g, axis=1).reshape(-1, 2)
    row_steps = np.diff(g, axis=0).reshape(-1, 2)
    for steps in (col_steps, row_steps):
        norms = np.linalg.norm(steps, axis=1)
        if norms.max() > 1.6 * norms.min():
            return False
        mean = steps.mean(axis=0)
        if np.max(np.linalg.norm(steps - mean, axis=1)) > 0.5 * norms.mean():
            return False
    return True


def _sample_quadrant(img: np.ndarray, corner: np.ndarray, direction: np.ndarray,
                     pitch: float) -> float:
    """Mean intensity of a small patch offset from a corner along direction."""
    h, w = img.shape
    target = corner + direction * pitch * 0.5
    ui = int(round(target[0]))
    vi = int(round(target[1]))
    r = max(1, int(pitch * 0.15))
    u0, u1 = max(0, ui - r), min(w, ui + r + 1)
    v0, v1 = max(0, vi - r), min(h, vi + r + 1)
    if u0 >= u1 or v0 >= v1:
        return 127.0
    return float(img[v0:v1, u0:u1].mean())


def checkerboard_corners(img, inner_rows: int, inner_cols: int) -> np.ndarray:
    """Detect the inner corners of a checkerboard, row-major in board order.

    corner[0] is the board-frame origin: the inner corner whose outward
    diagonal cell (one square beyond it against both axes) is dark. Raises
    DetectionFailedError when the corner grid cannot be established.
    """
    gray = _validate_gray(to_gray(img))
    if gray.std() < 1.0:
        raise DetectionFailedError("image has no contrast")
    n = inner_rows * inner_cols
    smoothed = ndimage.gaussian_filter(gray, 1.0, mode="nearest")
    resp = _xcorner_response(smoothed)
    peak = resp.max()
    if peak <= 0:
        raise DetectionFailedError("no corner-like structure found")
    local_max = resp == ndimage.maximum_filter(resp, size=7, mode="constant", cval=-np.inf)
    cand_mask = local_max & (resp > 0.2 * peak)
    vs, us = np.nonzero(cand_mask)
    if len(us) < n:
        raise DetectionFailedError(f"found {len(us)} corner candidates, need {n}")
    strength = resp[vs, us]
    order = np.argsort(strength, kind="stable")[::-1]
    # greedy suppression of duplicate maxima (exact-tie plateaus)
    picked = []
    for idx in order:
        p = (float(us[idx]), float(vs[idx]))
        if all((p[0] - q[0])**2 + (p[1] - q[1])**2 > 25.0 for q in picked):
            picked.append(p)
        if len(picked) == n:
            break
    if len(picked) < n:
        raise DetectionFailedError(f"found {len(picked)} distinct corners, need {n}")
    pts = np.array(picked)

    grid = _order_grid(pts, inner_rows, inner_cols)
    if grid is None:
        raise DetectionFailedError("candidates do not form a consistent grid")

    gx_img = ndimage.sobel(smoothed, axis=1, mode="nearest")
    gy_img = ndimage.sobel(smoothed, axis=0, mode="nearest")
    refined = np.array([_saddle_refine(gx_img, gy_img, u, v) for u, v in grid])
    g = refined.reshape(inner_rows, inner_cols, 2)

    # handedness: image of (col axis x row axis) must be positive, matching a
    # front view of the board frame
    col_dir = g[0, -1] - g[0, 0]
    row_dir = g[-1, 0] - g[0, 0]
    if col_dir[0] * row_dir[1] - col_dir[1] * row_dir[0] < 0:
        g = g[::-1, :, :]
    # 180-degree disambiguation: prefer the end whose outward diagonal cell is
    # dark. Boards whose inner dims share parity have a 180-symmetric pattern;
    # fall back to a positional tie-break there (the pose solver tries both
    # orientations anyway).
    pitch = _grid_pitch(refined, n)
    col_unit = (g[0, 1] - g[0, 0]) / np.linalg.norm(g[0, 1] - g[0, 0])
    row_unit = (g[1, 0] - g[0, 0]) / np.linalg.norm(g[1, 0] - g[0, 0])
    first = _sample_quadrant(gray, g[0, 0], -(col_unit + row_unit), pitch)
    last = _sample_quadrant(gray, g[-1, -1], (col_unit + row_unit), pitch)
    if abs(first - last) > 15.0:
        if last < first:
            g = g[::-1, ::-1, :]
    else:
        head, tail = g[0, 0], g[-1, -1]
        if (tail[1], tail[0]) < (head[1], head[0]):
            g = g[::-1, ::-1, :]
    return g.reshape(n, 2)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read PNG/PGM; returns (H, W) uint8 for grayscale or (H, W, 3) for color."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(img: np.ndarray, path):
    path = str(path)
    img = np.asarray(img)
    if path.lower().endswith(".pgm"):
        write_pgm(img, path)
        return
    if img.ndim == 2:
        Image.fromarray(img.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(img.astype(np.uint8), mode="RGB").save(path)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            i = data.find(b"\n", i) + 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if tokens[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    i += 1  # single whitespace after maxval
    body = np.frombuffer(data[i:i + w * h], dtype=np.uint8)
    if len(body) != w * h:
        raise ValueError(f"PGM body holds {len(body)} bytes, expected {w * h}")
    return body.reshape(h, w)


def write_pgm(img: np.ndarray, path):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM output requires a grayscale image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_corners(path) -> np.ndarray:
    """Corner list file: one ``u v`` pair per line, row-major board order."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"corner line must hold two numbers: {line!r}")
            rows.append([float(parts[0]), float(parts[1])])
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def write_corners(corners: np.ndarray, path):
    with open(path, "w", encoding="utf-8") as f:
        for u, v in np.asarray(corners, dtype=float):
            f.write(f"{u:.6f} {v:.6f}\n")
