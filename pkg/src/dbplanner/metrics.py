"""Open-loop planning metrics: per-horizon L2 displacement error and
cumulative collision rate of the swept ego footprint against agent futures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (OrientedRect, polygon_area, rect_intersection_region,
                       trajectory_headings)
from .scene import AgentBox

HORIZONS_S = (1.0, 2.0, 3.0)
EGO_DIMS = (4.08, 1.73)  # nuScenes ego footprint, length x width


@dataclass
class PlanMetrics:
    l2_at: dict[float, float]
    l2_avg: float
    collision_at: dict[float, float]
    collision_avg: float


def l2_error(pred: np.ndarray, gt: np.ndarray, dt: float,
             horizons=HORIZONS_S) -> dict[float, float]:
    """Euclidean waypoint error at each horizon second."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    out: dict[float, float] = {}
    for h in horizons:
        idx = int(round(h / dt)) - 1
        if idx < 0 or idx >= len(gt):
            raise ValueError(f"horizon {h}s beyond trajectory of {len(gt)} x {dt}s")
        out[h] = float(np.hypot(*(pred[idx] - gt[idx])))
    return out


def ego_footprints(traj: np.ndarray, ego_dims=EGO_DIMS) -> list[OrientedRect]:
    headings = trajectory_headings(traj)
    hl, hw = ego_dims[0] / 2.0, ego_dims[1] / 2.0
    return [OrientedRect(center=(float(p[0]), float(p[1])),
                         half_extents=(hl, hw), heading=float(h))
            for p, h in zip(traj, headings)]


def _rects_overlap(a: OrientedRect, b: OrientedRect) -> bool:
    # quick reject on circumscribed circles before clipping
    ra = math.hypot(*a.half_extents)
    rb = math.hypot(*b.half_extents)
    d = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    if d > ra + rb:
        return False
    return polygon_area(rect_intersection_region(a, b)) > 1e-12


def collision_check(traj: np.ndarray, agents: list[AgentBox], dt: float,
                    ego_dims=EGO_DIMS, horizons=HORIZONS_S) -> dict[float, bool]:
    """Cumulative collision flags: a hit at step k counts for every horizon
    >= (k+1)*dt, so flags are monotone in the horizon."""
    traj = np.asarray(traj, dtype=np.float64)
    for agent in agents:
        if len(agent.future) < len(traj):
            raise ValueError("agent futures do not cover the planning horizon")
    boxes = ego_footprints(traj, ego_dims)
    hit_step = None
    for k, ego_box in enumerate(boxes):
        for agent in agents:
            if _rects_overlap(ego_box, agent.rect_at(k)):
                hit_step = k
                break
        if hit_step is not None:
            break
    out: dict[float, bool] = {}
    for h in horizons:
        out[h] = hit_step is not None and (hit_step + 1) * dt <= h + 1e-9
    return out


def aggregate_metrics(per_scenario: list[tuple[dict[float, float], dict[float, bool]]],
                      horizons=HORIZONS_S) -> PlanMetrics:
    """Average per-horizon L2 and collision rates over an evaluation set."""
    n = len(per_scenario)
    if n == 0:
        return PlanMetrics({h: math.nan for h in horizons}, math.nan,
                           {h: math.nan for h in horizons}, math.nan)
    l2 = {h: sum(l[h] for l, _ in per_scenario) / n for h in horizons}
    cr = {h: sum(1.0 for _, c in per_scenario if c[h]) / n for h in horizons}
    return PlanMetrics(l2_at=l2, l2_avg=sum(l2.values()) / len(horizons),
                       collision_at=cr, collision_avg=sum(cr.values()) / len(horizons))
