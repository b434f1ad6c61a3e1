"""Driving-scene data types shared by the world generator, model and losses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import OrientedRect

COMMANDS = ("straight", "left", "right")
MAP_CLASSES = ("divider", "boundary", "crossing")
PLANNING_HORIZON_S = 3.0


@dataclass(frozen=True)
class EgoStatus:
    """Ego kinematic state plus navigation command; the input whose shortcut
    influence is under test."""

    velocity: tuple[float, float]
    acceleration: float = 0.0
    yaw_rate: float = 0.0
    command: str = "straight"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"command must be one of {COMMANDS}, got {self.command!r}")

    def kinematics(self) -> np.ndarray:
        return np.array([self.velocity[0], self.velocity[1],
                         self.acceleration, self.yaw_rate])


@dataclass
class Trajectory:
    """T waypoints (x, y) in ego-centric meters; T*dt is the 3 s horizon."""

    waypoints: np.ndarray
    dt: float = 0.5

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError(f"waypoints must be (T, 2), got {self.waypoints.shape}")
        horizon = len(self.waypoints) * self.dt
        if abs(horizon - PLANNING_HORIZON_S) > 1e-9:
            raise ValueError(f"T*dt must equal {PLANNING_HORIZON_S} s, got {horizon}")

    @property
    def steps(self) -> int:
        return len(self.waypoints)


@dataclass
class AgentBox:
    """A dynamic agent: oriented box, class label and per-step future centers."""

    rect: OrientedRect
    cls: int = 0
    future: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.future = np.asarray(self.future, dtype=np.float64)

    def rect_at(self, step: int) -> OrientedRect:
        c = self.future[step]
        return OrientedRect(center=(float(c[0]), float(c[1])),
                            half_extents=self.rect.half_extents,
                            heading=self.rect.heading)


@dataclass
class MapInstanceSet:
    """N_map polylines with class labels and validity flags."""

    points: np.ndarray           # (N_map, N_point, 2) meters
    classes: np.ndarray          # (N_map,) int indices into MAP_CLASSES
    valid: np.ndarray            # (N_map,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = self.points.shape[0]
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ValueError(f"points must be (N, P, 2), got {self.points.shape}")
        if self.classes.shape != (n,) or self.valid.shape != (n,):
            raise ValueError("classes/valid must match the instance count")


@dataclass
class Scenario:
    seed: int
    command: str
    ego_status: EgoStatus
    gt_plan: Trajectory
    agents: list[AgentBox]
    map: MapInstanceSet
    trail: np.ndarray            # (K, 2) recent ego positions, oldest first
    obs: np.ndarray | None = None

    def with_ego(self, ego: EgoStatus) -> "Scenario":
        return replace(self, ego_status=ego)
