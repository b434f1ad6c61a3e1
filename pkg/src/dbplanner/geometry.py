"""Metric BEV geometry.

Grid indexing, differentiable bilinear sampling, oriented-rectangle algebra,
convex clipping for perception regions, point-in-region masks, and the
squared Gaussian Wasserstein distance between oriented boxes.

Coordinate conventions: world points are (x, y) meters; continuous grid
coordinates are (gx, gy) with gx along the W axis (x) and gy along the H
axis (y). Feature maps are C x H x W, so the cell under grid point
(gx, gy) = (c, r) is features[:, r, c]. Cell (0, 0)'s center sits at
(x_min + res/2, y_min + res/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (Tensor, _make, _accum, as_tensor, add, mul, stack as tstack,
                       sub, tcos, tsin, tsqrt, tsum)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BevSpec:
    """Metric window and resolution of the BEV grid."""

    x_range: tuple[float, float] = (-15.0, 15.0)
    y_range: tuple[float, float] = (-7.5, 7.5)
    resolution: float = 0.5

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.resolution
            if hi <= lo or self.resolution <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"window {self.x_range} x {self.y_range} does not "
                                 f"tile evenly at resolution {self.resolution}")

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))


PAPER_SCALE = BevSpec(x_range=(-30.0, 30.0), y_range=(-15.0, 15.0), resolution=0.15)


@dataclass
class BevGrid:
    spec: BevSpec
    features: Tensor

    def __post_init__(self):
        c_h_w = self.features.shape
        if len(c_h_w) != 3 or c_h_w[1] != self.spec.height or c_h_w[2] != self.spec.width:
            raise ValueError(f"features {c_h_w} do not match spec "
                             f"H={self.spec.height} W={self.spec.width}")


def world_to_grid(spec: BevSpec, p) -> np.ndarray:
    """Affine world->grid map; accepts (2,) or (N, 2) arrays, out-of-range allowed."""
    p = np.asarray(p, dtype=np.float64)
    out = np.empty_like(p)
    out[..., 0] = (p[..., 0] - spec.x_range[0]) / spec.resolution - 0.5
    out[..., 1] = (p[..., 1] - spec.y_range[0]) / spec.resolution - 0.5
    return out


def grid_to_world(spec: BevSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = np.empty_like(q)
    out[..., 0] = (q[..., 0] + 0.5) * spec.resolution + spec.x_range[0]
    out[..., 1] = (q[..., 1] + 0.5) * spec.resolution + spec.y_range[0]
    return out


def world_to_grid_tensor(spec: BevSpec, p: Tensor) -> Tensor:
    """Differentiable world->grid map for (..., 2) tensors."""
    scale = 1.0 / spec.resolution
    shift = np.array([-spec.x_range[0] / spec.resolution - 0.5,
                      -spec.y_range[0] / spec.resolution - 0.5])
    return add(mul(p, as_tensor(scale)), as_tensor(shift))


@lru_cache(maxsize=8)
def cell_centers(spec: BevSpec) -> np.ndarray:
    """World coordinates of every cell center, shape (H, W, 2)."""
    xs = spec.x_range[0] + (np.arange(spec.width) + 0.5) * spec.resolution
    ys = spec.y_range[0] + (np.arange(spec.height) + 0.5) * spec.resolution
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# differentiable bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample_many(features: Tensor, points) -> Tensor:
    """Sample a C x H x W grid at M continuous (gx, gy) points -> (M, C).

    Zero padding outside the grid: corners that fall off the lattice
    contribute value 0. Differentiable in both the grid and the points.
    """
    feat = features.data
    pts = as_tensor(points)
    P = pts.data
    C, H, W = feat.shape
    x = P[:, 0]
    y = P[:, 1]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    tx = x - x0
    ty = y - y0

    vals = []
    weights = []
    valids = []
    for dx, dy, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        cxs = np.clip(cx, 0, W - 1)
        cys = np.clip(cy, 0, H - 1)
        v = feat[:, cys, cxs].T * ok[:, None]  # (M, C)
        vals.append(v)
        weights.append(w)
        valids.append((ok, cxs, cys))
    out = sum(w[:, None] * v for w, v in zip(weights, vals))

    def bw(g):
        if features.requires_grad:
            flat = np.zeros(H * W * C)
            col = np.arange(C)
            for w, (ok, cxs, cys) in zip(weights, valids):
                rows = cys * W + cxs
                flat += np.bincount((rows[:, None] * C + col).ravel(),
                                    weights=((w * ok)[:, None] * g).ravel(),
                                    minlength=H * W * C)
            _accum(features, flat.reshape(H, W, C).transpose(2, 0, 1))
        if pts.requires_grad:
            v00, v10, v01, v11 = vals
            dx_field = (v10 - v00) * (1 - ty)[:, None] + (v11 - v01) * ty[:, None]
            dy_field = (v01 - v00) * (1 - tx)[:, None] + (v11 - v10) * tx[:, None]
            gp = np.stack([(g * dx_field).sum(axis=1), (g * dy_field).sum(axis=1)], axis=1)
            _accum(pts, gp)

    return _make(out, (features, pts), bw)


def bilinear_sample(grid: "BevGrid | Tensor", q) -> Tensor:
    """Single-point sampling; returns a length-C feature vector."""
    feat = grid.features if isinstance(grid, BevGrid) else grid
    qt = as_tensor(q)
    many = bilinear_sample_many(feat, qt.reshape((1, 2)))
    return many.reshape((feat.shape[0],))


# ---------------------------------------------------------------------------
# oriented rectangles and convex regions
# ---------------------------------------------------------------------------

def normalize_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


@dataclass(frozen=True)
class OrientedRect:
    center: tuple[float, float]
    half_extents: tuple[float, float]
    heading: float = 0.0

    def __post_init__(self):
        if self.half_extents[0] <= 0 or self.half_extents[1] <= 0:
            raise ValueError(f"half_extents must be positive, got {self.half_extents}")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def corners(self) -> np.ndarray:
        """Corner points in counter-clockwise order, shape (4, 2)."""
        hl, hw = self.half_extents
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)

    def area(self) -> float:
        return 4.0 * self.half_extents[0] * self.half_extents[1]


def rect_contains(rect: OrientedRect, p, tol: float = 1e-9) -> bool:
    """Closed containment test: boundary points count as inside."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(rect.center)
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    lx = c * d[0] + s * d[1]
    ly = -s * d[0] + c * d[1]
    return abs(lx) <= rect.half_extents[0] + tol and abs(ly) <= rect.half_extents[1] + tol


def points_in_rect(rect: OrientedRect, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Vectorized closed containment for an (..., 2) point array."""
    d = np.asarray(pts, dtype=np.float64) - np.asarray(rect.center)
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    return (np.abs(lx) <= rect.half_extents[0] + tol) & (np.abs(ly) <= rect.half_extents[1] + tol)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rect_intersection_region(a: OrientedRect, b: OrientedRect) -> np.ndarray:
    """Sutherland-Hodgman clip of a's corner polygon against b's half-planes.

    Returns vertices in counter-clockwise order, shape (k, 2); empty (0, 2)
    array when the rectangles are disjoint.
    """
    poly = [tuple(p) for p in a.corners()]
    clip = b.corners()
    for i in range(4):
        if not poly:
            break
        p0 = clip[i]
        p1 = clip[(i + 1) % 4]
        edge = p1 - p0
        kept: list[tuple[float, float]] = []
        prev = poly[-1]
        prev_side = edge[0] * (prev[1] - p0[1]) - edge[1] * (prev[0] - p0[0])
        for cur in poly:
            side = edge[0] * (cur[1] - p0[1]) - edge[1] * (cur[0] - p0[0])
            if side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - side)
                    kept.append((prev[0] + t * (cur[0] - prev[0]),
                                 prev[1] + t * (cur[1] - prev[1])))
                kept.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - side)
                kept.append((prev[0] + t * (cur[0] - prev[0]),
                             prev[1] + t * (cur[1] - prev[1])))
            prev = cur
            prev_side = side
        poly = kept
    if len(poly) < 3:
        return np.zeros((0, 2))
    return np.asarray(poly, dtype=np.float64)


def point_in_convex_polygon(poly: np.ndarray, p, tol: float = 1e-9) -> bool:
    """Closed containment in a CCW convex polygon."""
    if len(poly) < 3:
        return False
    p = np.asarray(p, dtype=np.float64)
    nxt = np.roll(poly, -1, axis=0)
    edge = nxt - poly
    rel = p - poly
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool(np.all(cross >= -tol))


def points_in_convex_polygon(poly: np.ndarray, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Vectorized closed containment, pts shape (..., 2) -> boolean array."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(poly) < 3:
        return np.zeros(pts.shape[:-1], dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    edge = nxt - poly  # (k, 2)
    rel = pts[..., None, :] - poly  # (..., k, 2)
    cross = edge[:, 0] * rel[..., 1] - edge[:, 1] * rel[..., 0]
    return np.all(cross >= -tol, axis=-1)


def mask_points(points: np.ndarray, region: np.ndarray,
                valid: np.ndarray | None = None) -> np.ndarray:
    """Binary flags for ground-truth map points inside a convex region.

    points: (N_map, N_point, 2); region: CCW convex polygon from
    rect_intersection_region. Returns float flags of shape (N_map, N_point).
    """
    points = np.asarray(points, dtype=np.float64)
    flags = points_in_convex_polygon(region, points).astype(np.float64)
    if valid is not None:
        flags = flags * np.asarray(valid, dtype=np.float64)[:, None]
    return flags


# ---------------------------------------------------------------------------
# Gaussian Wasserstein distance between oriented boxes
# ---------------------------------------------------------------------------

def _cov_terms(hl, hw, cos_t, sin_t):
    """Covariance entries of N(mu, R diag(hl^2, hw^2) R^T), elementwise tensors."""
    a = mul(hl, hl)
    b = mul(hw, hw)
    cc = mul(cos_t, cos_t)
    ss = mul(sin_t, sin_t)
    s11 = add(mul(a, cc), mul(b, ss))
    s22 = add(mul(a, ss), mul(b, cc))
    s12 = mul(sub(a, b), mul(cos_t, sin_t))
    det = mul(a, b)
    return s11, s22, s12, det


def gwd_d2(mu_a, hl_a, hw_a, cos_a, sin_a,
           mu_b, hl_b, hw_b, cos_b, sin_b) -> Tensor:
    """Squared 2-Wasserstein distance between box Gaussians, elementwise.

    ``mu_*`` have shape (..., 2); the remaining arguments broadcast over the
    leading shape. Uses the closed form for 2x2 SPD matrices:
    Tr((A^1/2 B A^1/2)^1/2) = sqrt(Tr(AB) + 2 sqrt(det A det B)).
    """
    mu_a, mu_b = as_tensor(mu_a), as_tensor(mu_b)
    hl_a, hw_a, cos_a, sin_a = map(as_tensor, (hl_a, hw_a, cos_a, sin_a))
    hl_b, hw_b, cos_b, sin_b = map(as_tensor, (hl_b, hw_b, cos_b, sin_b))
    a11, a22, a12, det_a = _cov_terms(hl_a, hw_a, cos_a, sin_a)
    b11, b22, b12, det_b = _cov_terms(hl_b, hw_b, cos_b, sin_b)
    d = sub(mu_a, mu_b)
    center = tsum(mul(d, d), axis=-1)
    tr_ab = add(add(mul(a11, b11), mul(a22, b22)), mul(as_tensor(2.0), mul(a12, b12)))
    cross = tsqrt(add(tr_ab, mul(as_tensor(2.0), tsqrt(mul(det_a, det_b)))))
    trace_part = sub(add(add(a11, a22), add(b11, b22)), mul(as_tensor(2.0), cross))
    return add(center, trace_part)


def gwd(a: OrientedRect, b: OrientedRect) -> float:
    """Raw squared Gaussian Wasserstein distance between two oriented boxes."""
    return gwd_rect_tensor(a, b).item()


def gwd_rect_tensor(a: OrientedRect, b: OrientedRect,
                    params_a: dict[str, Tensor] | None = None) -> Tensor:
    """Tensor-valued gwd; ``params_a`` optionally supplies leaf tensors
    (keys cx, cy, hl, hw, heading) for box a so gradients can be checked."""
    if params_a is None:
        mu_a = as_tensor(np.asarray(a.center))
        hl_a, hw_a = as_tensor(a.half_extents[0]), as_tensor(a.half_extents[1])
        cos_a, sin_a = as_tensor(math.cos(a.heading)), as_tensor(math.sin(a.heading))
    else:
        mu_a = tstack([params_a["cx"], params_a["cy"]])
        hl_a, hw_a = params_a["hl"], params_a["hw"]
        cos_a, sin_a = tcos(params_a["heading"]), tsin(params_a["heading"])
    mu_b = as_tensor(np.asarray(b.center))
    return gwd_d2(mu_a, hl_a, hw_a, cos_a, sin_a,
                  mu_b, as_tensor(b.half_extents[0]), as_tensor(b.half_extents[1]),
                  as_tensor(math.cos(b.heading)), as_tensor(math.sin(b.heading)))


def trajectory_headings(waypoints: np.ndarray, step_eps: float = 1e-6) -> np.ndarray:
    """Heading per waypoint from finite differences of consecutive waypoints.

    Waypoint k takes the direction of the step arriving at it; the first
    waypoint takes the direction of the step leaving it, so a rigid lateral
    translation leaves every heading unchanged. A step shorter than
    ``step_eps`` reuses the previous heading (initially 0, the ego heading).
    """
    wps = np.asarray(waypoints, dtype=np.float64)
    n = len(wps)
    headings = np.zeros(n)
    if n == 0:
        return headings
    deltas = wps[1:] - wps[:-1]
    # delta index feeding each waypoint: [0, 0, 1, ..., n-2]
    last = 0.0
    for k in range(n):
        if n == 1:
            headings[k] = last
            continue
        d = deltas[0] if k == 0 else deltas[k - 1]
        if math.hypot(d[0], d[1]) >= step_eps:
            last = math.atan2(d[1], d[0])
        headings[k] = last
    return headings


def perception_box(waypoints: np.ndarray, step: int, spec: BevSpec,
                   step_eps: float = 1e-6) -> OrientedRect:
    """Ego perception bounding box at a trajectory step: a window-sized
    oriented rect centered on the waypoint, heading from waypoint differences."""
    headings = trajectory_headings(waypoints, step_eps)
    hl = (spec.x_range[1] - spec.x_range[0]) / 2.0
    hw = (spec.y_range[1] - spec.y_range[0]) / 2.0
    wp = np.asarray(waypoints, dtype=np.float64)[step]
    return OrientedRect(center=(float(wp[0]), float(wp[1])),
                        half_extents=(hl, hw), heading=float(headings[step]))
