"""Parametric BEV driving-scenario generator and dataset persistence.

Scenarios are pure functions of (seed, knobs): straight or constant-curvature
turn episodes over a two-lane road, with constant-velocity agents, polyline
map elements, a ground-truth plan, and a short ego position trail. The
rasterized pseudo-sensor observation stands in for the camera pipeline; it is
built only from scene geometry, never from the EgoStatus input, so perturbing
ego status at inference leaves the observation untouched.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import replace

import numpy as np
from scipy import ndimage

from .geometry import BevSpec, OrientedRect, cell_centers, points_in_rect, world_to_grid
from .metrics import collision_check
from .scene import (AgentBox, EgoStatus, MapInstanceSet, PLANNING_HORIZON_S,
                    Scenario, Trajectory)

SCHEMA = "dbp-scn-1"
PERTURB_MODES = ("none", "x0.0", "x0.5", "x1.5", "abs100")

LANE_WIDTH = 3.5
AGENT_HALF = (2.25, 0.9)
OBS_CHANNELS = 6  # agent occupancy, divider, boundary, crossing, map distance, ego trail
DISTANCE_CLIP_M = 5.0
TRAIL_TIMES = (-1.0, -0.5, 0.0)

MAX_SPEED = 20.0
MAX_CURVATURE = 0.2


class DatasetError(RuntimeError):
    pass


def perturb_ego(ego: EgoStatus, mode: str) -> EgoStatus:
    """Ego-velocity perturbation protocol: scale factors or a fixed 100 m/s
    magnitude that preserves direction (+x when the velocity is zero)."""
    if mode == "none":
        return ego
    vx, vy = ego.velocity
    if mode == "x0.0":
        v = (0.0, 0.0)
    elif mode == "x0.5":
        v = (0.5 * vx, 0.5 * vy)
    elif mode == "x1.5":
        v = (1.5 * vx, 1.5 * vy)
    elif mode == "abs100":
        mag = math.hypot(vx, vy)
        v = (100.0, 0.0) if mag < 1e-12 else (100.0 * vx / mag, 100.0 * vy / mag)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}; "
                         f"expected one of {PERTURB_MODES}")
    return replace(ego, velocity=v)


class _RoadFrame:
    """Arc-length parameterized road: straight line or constant-curvature arc."""

    def __init__(self, curvature: float):
        self.curvature = curvature

    def point(self, s):
        s = np.asarray(s, dtype=np.float64)
        k = self.curvature
        if abs(k) < 1e-12:
            return np.stack([s, np.zeros_like(s)], axis=-1)
        return np.stack([np.sin(k * s) / k, (1.0 - np.cos(k * s)) / k], axis=-1)

    def heading(self, s):
        return self.curvature * np.asarray(s, dtype=np.float64)

    def normal(self, s):
        h = self.heading(s)
        return np.stack([-np.sin(h), np.cos(h)], axis=-1)

    def offset_point(self, s, offset: float):
        return self.point(s) + offset * self.normal(s)


def _smoothstep01(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _arc_schedule(times: np.ndarray, v0: float, drop: float,
                  horizon: float) -> np.ndarray:
    """Arc length at the waypoint times for a speed profile that ramps from
    v0 down by ``drop`` starting at 0.2 s; drop=0 reduces to s = v0*t."""
    if drop <= 0.0:
        return v0 * times
    fine = np.linspace(0.0, horizon, 241)
    v = v0 * (1.0 - drop * _smoothstep01((fine - 0.2) / 1.2))
    s = np.concatenate([[0.0], np.cumsum((v[1:] + v[:-1]) * 0.5 * np.diff(fine))])
    return np.interp(times, fine, s)


def generate_scenario(seed: int, command_mix=(0.75, 0.25), difficulty: float = 0.5,
                      spec: BevSpec | None = None, horizon_steps: int = 6,
                      dt: float = 0.5, n_map: int = 8, n_map_points: int = 20,
                      plan_noise: float = 0.0) -> Scenario:
    """Deterministic scenario from a seed.

    command_mix is (straight_fraction, turn_fraction) and must sum to 1;
    difficulty in [0, 1] scales agent count and the probability of the
    blocked-lane obstacle-avoidance variant.
    """
    if abs(command_mix[0] + command_mix[1] - 1.0) > 1e-9:
        raise ValueError(f"command_mix must sum to 1, got {command_mix}")
    spec = spec or BevSpec()
    rng = np.random.default_rng(seed)

    turn = rng.random() < command_mix[1]
    blocked = False
    if turn:
        command = "left" if rng.random() < 0.5 else "right"
        speed = rng.uniform(3.0, 7.0)
        curv = rng.uniform(0.05, 0.15)
        # keep the 3 s arc under ~75 degrees of sweep
        curv = min(curv, 1.3 / (speed * PLANNING_HORIZON_S))
        curvature = curv if command == "left" else -curv
    else:
        command = "straight"
        blocked = rng.random() < 0.4 * difficulty
        speed = rng.uniform(4.0, 7.0) if blocked else rng.uniform(3.0, 12.0)
        curvature = 0.0
    assert speed <= MAX_SPEED and abs(curvature) <= MAX_CURVATURE

    has_crossing = rng.random() < 0.35
    crossing_s = rng.uniform(5.0, 12.0)
    # scene-cued slowdown: deterministic for turns and blocked lanes,
    # stochastic near crossings; vanishes at difficulty 0 so the zero-noise
    # kinematic contracts stay exact
    drop_scale = min(1.0, 2.0 * difficulty)
    crossing_drop = rng.uniform(0.2, 0.4)
    crossing_slows = has_crossing and rng.random() < 0.6 * difficulty
    if turn:
        drop = 0.3 * min(1.0, abs(curvature) / 0.15) * drop_scale
    elif blocked:
        drop = 0.25 * drop_scale
    elif crossing_slows:
        drop = crossing_drop * drop_scale
    else:
        drop = 0.0

    road = _RoadFrame(curvature)
    times = dt * np.arange(1, horizon_steps + 1)
    arc = _arc_schedule(times, speed, drop, horizon_steps * dt)
    waypoints = road.point(arc)

    block_x = 0.0
    if blocked:
        # static vehicle on the ego lane; the plan detours into the left lane
        # early enough that the swept ego footprint clears the obstacle
        block_x = max(0.55 * speed * PLANNING_HORIZON_S, 9.0)
        shift = _smoothstep01((times - 0.1) / 0.9)
        waypoints = waypoints.copy()
        waypoints[:, 1] += LANE_WIDTH * shift
    if plan_noise > 0.0:
        waypoints = waypoints + rng.normal(0.0, plan_noise, size=waypoints.shape)

    ego = EgoStatus(velocity=(speed, 0.0), acceleration=0.0,
                    yaw_rate=curvature * speed, command=command)
    plan = Trajectory(waypoints=waypoints, dt=dt)

    map_set = _build_map(road, speed, n_map, n_map_points,
                         crossing_s if has_crossing else None)
    agents = _build_agents(rng, road, spec, plan, difficulty, blocked, block_x,
                           horizon_steps, dt)
    trail = np.array([road.point(speed * t) for t in TRAIL_TIMES])

    return Scenario(seed=seed, command=command, ego_status=ego, gt_plan=plan,
                    agents=agents, map=map_set, trail=trail, obs=None)


def _build_map(road: _RoadFrame, speed: float, n_map: int, n_points: int,
               crossing_s: float | None) -> MapInstanceSet:
    s_max = max(speed * PLANNING_HORIZON_S + 6.0, 18.0)
    s = np.linspace(-8.0, s_max, n_points)
    lanes = [
        (-LANE_WIDTH / 2.0, 1),                  # right boundary
        (LANE_WIDTH / 2.0, 0),                   # divider between the two lanes
        (LANE_WIDTH * 1.5, 1),                   # left boundary
    ]
    instances = [(road.offset_point(s, off), cls) for off, cls in lanes]
    if crossing_s is not None:
        span = np.linspace(-LANE_WIDTH / 2.0, LANE_WIDTH * 1.5, n_points)
        crossing = road.point(crossing_s) + span[:, None] * road.normal(crossing_s)
        instances.append((crossing, 2))
    instances = instances[:n_map]

    points = np.zeros((n_map, n_points, 2))
    classes = np.zeros(n_map, dtype=np.int64)
    valid = np.zeros(n_map, dtype=bool)
    for i, (pts, cls) in enumerate(instances):
        points[i] = pts
        classes[i] = cls
        valid[i] = True
    return MapInstanceSet(points=points, classes=classes, valid=valid)


def _agent_in_window(center: np.ndarray, spec: BevSpec, margin: float) -> bool:
    return (spec.x_range[0] + margin <= center[0] <= spec.x_range[1] - margin
            and spec.y_range[0] + margin <= center[1] <= spec.y_range[1] - margin)


def _build_agents(rng: np.random.Generator, road: _RoadFrame, spec: BevSpec,
                  plan: Trajectory, difficulty: float, blocked: bool,
                  block_x: float, horizon_steps: int, dt: float) -> list[AgentBox]:
    agents: list[AgentBox] = []
    margin = math.hypot(*AGENT_HALF) + 0.2

    if blocked:
        # slide the obstacle outward until the avoidance plan clears it
        x = block_x
        while x <= spec.x_range[1] - margin:
            rect = OrientedRect(center=(x, 0.0), half_extents=AGENT_HALF, heading=0.0)
            cand = AgentBox(rect=rect, cls=0,
                            future=np.tile([x, 0.0], (horizon_steps, 1)))
            if not any(collision_check(plan.waypoints, [cand], dt).values()):
                agents.append(cand)
                break
            x += 1.0

    n_extra = int(round(1 + 3.0 * difficulty))
    n_extra = max(0, min(6, n_extra + int(rng.integers(-1, 2))))
    for _ in range(n_extra):
        placed = None
        for _attempt in range(20):
            if blocked:
                s_a = rng.uniform(-12.0, -4.0)
                offset = -LANE_WIDTH * 1.15  # parked off the right side
                v_a = 0.0
            else:
                s_a = rng.uniform(-12.0, 13.0)
                offset = LANE_WIDTH if rng.random() < 0.7 else -LANE_WIDTH * 1.15
                v_a = rng.uniform(0.0, 6.0) if offset > 0 else 0.0
            center = road.offset_point(s_a, offset)
            heading = float(road.heading(s_a))
            direction = np.array([math.cos(heading), math.sin(heading)])
            steps = dt * np.arange(1, horizon_steps + 1)
            future = center + direction * (v_a * steps)[:, None]
            if not all(_agent_in_window(p, spec, margin) for p in [center, *future]):
                continue
            cand = AgentBox(rect=OrientedRect(center=(float(center[0]), float(center[1])),
                                              half_extents=AGENT_HALF, heading=heading),
                            cls=0, future=future)
            hits = collision_check(plan.waypoints, [cand], dt)
            if any(hits.values()):
                continue
            placed = cand
            break
        if placed is not None:
            agents.append(placed)
    return agents


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _paint_polyline(mask: np.ndarray, pts: np.ndarray, spec: BevSpec) -> None:
    step = spec.resolution * 0.5
    for a, b in zip(pts[:-1], pts[1:]):
        dist = math.hypot(b[0] - a[0], b[1] - a[1])
        n = max(2, int(math.ceil(dist / step)) + 1)
        samples = np.linspace(a, b, n)
        grid = np.rint(world_to_grid(spec, samples)).astype(np.intp)
        ok = ((grid[:, 0] >= 0) & (grid[:, 0] < spec.width)
              & (grid[:, 1] >= 0) & (grid[:, 1] < spec.height))
        mask[grid[ok, 1], grid[ok, 0]] = 1.0


def rasterize(scenario: Scenario, spec: BevSpec) -> np.ndarray:
    """Hard-binary rasterization of the scenario into OBS_CHANNELS x H x W.

    Channels: agent occupancy at t=0; one channel per map class; clipped
    metric distance-to-map; ego trail breadcrumbs.
    """
    h, w = spec.height, spec.width
    obs = np.zeros((OBS_CHANNELS, h, w))
    centers = cell_centers(spec)

    for agent in scenario.agents:
        obs[0][points_in_rect(agent.rect, centers)] = 1.0

    for i in range(scenario.map.points.shape[0]):
        if not scenario.map.valid[i]:
            continue
        ch = 1 + int(scenario.map.classes[i])
        _paint_polyline(obs[ch], scenario.map.points[i], spec)

    union = (obs[1] + obs[2] + obs[3]) > 0
    if union.any():
        dist = ndimage.distance_transform_edt(~union, sampling=spec.resolution)
        obs[4] = np.minimum(dist, DISTANCE_CLIP_M)
    else:
        obs[4] = DISTANCE_CLIP_M

    grid = np.rint(world_to_grid(spec, scenario.trail)).astype(np.intp)
    ok = ((grid[:, 0] >= 0) & (grid[:, 0] < w) & (grid[:, 1] >= 0) & (grid[:, 1] < h))
    obs[5][grid[ok, 1], grid[ok, 0]] = 1.0
    return obs


def ensure_obs(scenarios: list[Scenario], spec: BevSpec) -> None:
    for sc in scenarios:
        if sc.obs is None or sc.obs.shape[1:] != (spec.height, spec.width):
            sc.obs = rasterize(sc, spec)


# ---------------------------------------------------------------------------
# persistence (JSON Lines, schema dbp-scn-1; rasters are regenerated on load)
# ---------------------------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "schema": SCHEMA,
        "seed": sc.seed,
        "command": sc.command,
        "ego": {
            "velocity": list(sc.ego_status.velocity),
            "acceleration": sc.ego_status.acceleration,
            "yaw_rate": sc.ego_status.yaw_rate,
            "command": sc.ego_status.command,
        },
        "dt": sc.gt_plan.dt,
        "gt_plan": sc.gt_plan.waypoints.tolist(),
        "agents": [
            {
                "center": list(a.rect.center),
                "half_extents": list(a.rect.half_extents),
                "heading": a.rect.heading,
                "cls": a.cls,
                "future": a.future.tolist(),
            }
            for a in sc.agents
        ],
        "map": {
            "points": sc.map.points.tolist(),
            "classes": sc.map.classes.tolist(),
            "valid": sc.map.valid.astype(int).tolist(),
        },
        "trail": sc.trail.tolist(),
    }


def scenario_from_dict(d: dict) -> Scenario:
    ego = EgoStatus(velocity=tuple(d["ego"]["velocity"]),
                    acceleration=d["ego"]["acceleration"],
                    yaw_rate=d["ego"]["yaw_rate"],
                    command=d["ego"]["command"])
    agents = [
        AgentBox(rect=OrientedRect(center=tuple(a["center"]),
                                   half_extents=tuple(a["half_extents"]),
                                   heading=a["heading"]),
                 cls=int(a["cls"]), future=np.asarray(a["future"]))
        for a in d["agents"]
    ]
    map_set = MapInstanceSet(points=np.asarray(d["map"]["points"]),
                             classes=np.asarray(d["map"]["classes"]),
                             valid=np.asarray(d["map"]["valid"], dtype=bool))
    return Scenario(seed=int(d["seed"]), command=d["command"], ego_status=ego,
                    gt_plan=Trajectory(np.asarray(d["gt_plan"]), dt=d["dt"]),
                    agents=agents, map=map_set,
                    trail=np.asarray(d["trail"]), obs=None)


def save_dataset(scenarios: list[Scenario], path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for sc in scenarios:
            f.write(json.dumps(scenario_to_dict(sc), sort_keys=True))
            f.write("\n")
    os.replace(tmp, path)


def load_dataset(path: str, spec: BevSpec | None = None) -> list[Scenario]:
    scenarios: list[Scenario] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e})") from None
            if d.get("schema") != SCHEMA:
                raise DatasetError(f"{path}:{lineno}: schema {d.get('schema')!r} "
                                   f"does not match {SCHEMA!r}")
            try:
                scenarios.append(scenario_from_dict(d))
            except (KeyError, ValueError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: bad scenario record ({e})") from None
    if spec is not None:
        ensure_obs(scenarios, spec)
    return scenarios
