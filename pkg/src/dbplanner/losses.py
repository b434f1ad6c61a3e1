"""Training objectives.

Composite unidirectional BEV distillation (dense reweighted feature term,
inter-keypoint and inter-channel correlation terms), autoregressive online
mapping (masked L1 over the intersection of rolled-out perception boxes plus
a Gaussian-Wasserstein box term), set-based perception losses with Hungarian
matching, winner-takes-all planning imitation, and the weighted multi-task
total. Teacher features are detached before every distillation term, so the
stop-gradient is structural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import (ShapeError, Tensor, as_tensor, add, div, log_softmax,
                       mul, reshape, sub, softmax, take, tabs, tlog, tmean,
                       transpose, tsqrt, tsum)
from .geometry import (BevSpec, OrientedRect, cell_centers, mask_points,
                       gwd_d2, perception_box, points_in_rect,
                       rect_intersection_region, trajectory_headings,
                       world_to_grid)
from .scene import AgentBox, MapInstanceSet
from .geometry import bilinear_sample_many

AGENT_CLASSES = ("vehicle",)
AGENT_NO_OBJECT = len(AGENT_CLASSES)          # logits width = 2
MAP_NO_OBJECT = 3                             # divider/boundary/crossing + none

_NORM_TINY = 1e-300  # keeps zero feature rows finite without disturbing scale


@dataclass
class LossWeights:
    """Distillation (alpha, beta, gamma), autoregressive (delta, lam) and
    per-task weights. Defaults follow the published auxiliary tuple
    (0.01, 0.1, 0.01, 0.01, 0.01); task weights default to 1."""

    alpha: float = 0.01
    beta: float = 0.1
    gamma: float = 0.01
    delta: float = 0.01
    lam: float = 0.01
    det: float = 1.0
    map: float = 1.0
    mot: float = 1.0
    plan: float = 1.0
    aux: float = 1.0
    mask_eps: float = 1.0
    background: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "lam", "det", "map",
                     "mot", "plan", "aux", "mask_eps", "background"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


class NonFiniteLoss(RuntimeError):
    def __init__(self, part: str, value: float):
        super().__init__(f"loss component {part!r} is non-finite ({value})")
        self.part = part


@dataclass
class AgentPredictions:
    boxes: Tensor         # (N_agent, 5): cx, cy, half_l, half_w, heading
    class_logits: Tensor  # (N_agent, len(AGENT_CLASSES) + 1)
    motion: Tensor        # (N_agent, T_m, 2) future centers
    queries: Tensor       # (N_agent, C)


@dataclass
class MapPredictions:
    points: Tensor        # (N_map, N_point, 2)
    class_logits: Tensor  # (N_map, 4)
    queries: Tensor       # (N_map, C)


# ---------------------------------------------------------------------------
# BEV unidirectional distillation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1024)
def _weight_grid_cached(rects: tuple[OrientedRect, ...], spec: BevSpec,
                        background: float) -> np.ndarray:
    w = np.full((spec.height, spec.width), background)
    centers = cell_centers(spec)
    for rect in rects:
        w[points_in_rect(rect, centers)] = 1.0
    return w


def agent_weight_grid(agent_rects: list[OrientedRect], spec: BevSpec,
                      background: float = 0.05) -> np.ndarray:
    """Cell weights: 1 inside any ground-truth agent footprint, w_bg elsewhere."""
    return _weight_grid_cached(tuple(agent_rects), spec, background)


@lru_cache(maxsize=1024)
def _keypoints_cached(rects: tuple[OrientedRect, ...], spec: BevSpec) -> np.ndarray:
    pts = []
    for rect in rects:
        pts.append(np.asarray(rect.center))
        pts.extend(rect.corners())
    if not pts:
        return np.zeros((0, 2))
    grid = world_to_grid(spec, np.asarray(pts))
    grid[:, 0] = np.clip(grid[:, 0], 0.0, spec.width - 1.0)
    grid[:, 1] = np.clip(grid[:, 1], 0.0, spec.height - 1.0)
    return grid


def agent_keypoints(agent_rects: list[OrientedRect], spec: BevSpec) -> np.ndarray:
    """5 keypoints per agent (center + corners) in grid coords, clamped to the grid."""
    return _keypoints_cached(tuple(agent_rects), spec)


def distill_df(student: Tensor, teacher: Tensor, agent_rects: list[OrientedRect],
               spec: BevSpec, background: float = 0.05) -> Tensor:
    """Agent-reweighted dense feature distillation: weighted mean over cells of
    the squared channel-wise difference, teacher detached."""
    if student.shape != teacher.shape:
        raise ShapeError("distill_df", student.shape, teacher.shape)
    w = agent_weight_grid(agent_rects, spec, background)
    diff = sub(student, teacher.detach())
    per_cell = tsum(mul(diff, diff), axis=0)             # (H, W)
    return div(tsum(mul(per_cell, as_tensor(w))), as_tensor(float(w.sum())))


def _row_normalized(x: Tensor) -> Tensor:
    norms = tsqrt(tsum(mul(x, x), axis=1, keepdims=True))
    return div(x, add(norms, as_tensor(_NORM_TINY)))


def distill_ik(student: Tensor, teacher: Tensor, keypoints: np.ndarray) -> Tensor:
    """Inter-keypoint distillation: mean absolute difference between the
    keypoint cosine-similarity matrices of student and teacher."""
    if len(keypoints) < 2:
        return as_tensor(0.0)
    ks = bilinear_sample_many(student, as_tensor(keypoints))
    kt = bilinear_sample_many(teacher.detach(), as_tensor(keypoints))
    sn = _row_normalized(ks)
    tn = _row_normalized(kt)
    s_sim = sn @ transpose(sn)
    t_sim = tn @ transpose(tn)
    return tmean(tabs(sub(s_sim, t_sim)))


@lru_cache(maxsize=1024)
def _foreground_cached(rects: tuple[OrientedRect, ...], spec: BevSpec) -> np.ndarray:
    centers = cell_centers(spec)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for rect in rects:
        mask |= points_in_rect(rect, centers)
    return np.flatnonzero(mask.ravel())


def foreground_cells(agent_rects: list[OrientedRect], spec: BevSpec) -> np.ndarray:
    """Flat indices (row-major over H x W) of cells inside any agent box."""
    return _foreground_cached(tuple(agent_rects), spec)


def distill_ic(student: Tensor, teacher: Tensor, agent_rects: list[OrientedRect],
               spec: BevSpec) -> Tensor:
    """Inter-channel distillation over foreground cells: mean absolute
    difference of the per-channel-normalized C x C Gram matrices."""
    if student.shape != teacher.shape:
        raise ShapeError("distill_ic", student.shape, teacher.shape)
    idx = foreground_cells(agent_rects, spec)
    if idx.size == 0:
        return as_tensor(0.0)
    c = student.shape[0]

    def channel_gram(grid: Tensor) -> Tensor:
        flat = transpose(reshape(grid, (c, grid.shape[1] * grid.shape[2])))
        fg = take(flat, idx, axis=0)                      # (n_fg, C)
        norms = tsqrt(tsum(mul(fg, fg), axis=0, keepdims=True))
        fn = div(fg, add(norms, as_tensor(_NORM_TINY)))
        return transpose(fn) @ fn                         # (C, C)

    return tmean(tabs(sub(channel_gram(student), channel_gram(teacher.detach()))))


def distill_total(student: Tensor, teacher: Tensor, agent_rects: list[OrientedRect],
                  spec: BevSpec, weights: LossWeights) -> Tensor:
    """alpha*DF + beta*IK + gamma*IC with the teacher detached up front."""
    t = teacher.detach()
    kps = agent_keypoints(agent_rects, spec)
    df = distill_df(student, t, agent_rects, spec, weights.background)
    ik = distill_ik(student, t, kps)
    ic = distill_ic(student, t, agent_rects, spec)
    return add(add(mul(as_tensor(weights.alpha), df),
                   mul(as_tensor(weights.beta), ik)),
               mul(as_tensor(weights.gamma), ic))


# ---------------------------------------------------------------------------
# autoregressive online mapping
# ---------------------------------------------------------------------------

def autoregressive_map_loss(pred_traj, gt_traj, pred_map_points: Tensor,
                            gt_map: MapInstanceSet, spec: BevSpec,
                            eps: float = 1.0) -> Tensor:
    """Masked L1 between predicted and ground-truth map points, restricted per
    timestep to the intersection of the two rolled-out perception boxes.

    The per-step normalizer counts masked coordinates (2 per point) plus eps.
    The binary mask is a constant w.r.t. the trajectory; gradient flows to
    the predicted map points.
    """
    pred_wp = pred_traj.data if isinstance(pred_traj, Tensor) else np.asarray(pred_traj)
    gt_wp = np.asarray(gt_traj, dtype=np.float64)
    if pred_wp.shape != gt_wp.shape:
        raise ShapeError("autoregressive_map_loss", pred_wp.shape, gt_wp.shape)
    steps = len(gt_wp)
    masks = np.zeros((steps, *gt_map.points.shape[:2]))
    for tau in range(steps):
        region = rect_intersection_region(perception_box(pred_wp, tau, spec),
                                          perception_box(gt_wp, tau, spec))
        masks[tau] = mask_points(gt_map.points, region, gt_map.valid)
    diff = tabs(sub(pred_map_points, as_tensor(gt_map.points)))
    masked = mul(as_tensor(masks[:, :, :, None]),
                 reshape(diff, (1, *diff.shape)))
    sums = tsum(masked, axis=(1, 2, 3))                   # (T,)
    denom = 2.0 * masks.sum(axis=(1, 2)) + eps
    return tmean(mul(sums, as_tensor(1.0 / denom)))


def _traj_cos_sin(pred_traj: Tensor, step_eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Differentiable per-waypoint heading direction (cos, sin) tensors.

    Steps shorter than step_eps fall back to the carried heading by adding a
    constant unit vector, which swamps the degenerate delta.
    """
    t = pred_traj.shape[0]
    if t == 1:
        ones = as_tensor(np.ones(1))
        return ones, as_tensor(np.zeros(1))
    deltas = sub(pred_traj[1:], pred_traj[: t - 1])       # (T-1, 2)
    idx = np.concatenate([[0], np.arange(t - 1)])
    per_wp = take(deltas, idx, axis=0)                    # (T, 2)
    headings = trajectory_headings(pred_traj.data, step_eps)
    lengths = np.hypot(*(per_wp.data.T))
    fallback = np.zeros((t, 2))
    degenerate = lengths < step_eps
    fallback[degenerate, 0] = np.cos(headings[degenerate])
    fallback[degenerate, 1] = np.sin(headings[degenerate])
    safe = add(per_wp, as_tensor(fallback))
    norm = tsqrt(tsum(mul(safe, safe), axis=1))
    return div(safe[:, 0], norm), div(safe[:, 1], norm)


def autoregressive_gwd_loss(pred_traj: Tensor | np.ndarray, gt_traj, spec: BevSpec) -> Tensor:
    """Mean log(1 + d^2) Gaussian-Wasserstein distance between predicted and
    ground-truth perception boxes along the horizon; provides a gradient even
    when the boxes do not overlap."""
    pred = as_tensor(pred_traj) if not isinstance(pred_traj, Tensor) else pred_traj
    gt_wp = np.asarray(gt_traj, dtype=np.float64)
    if pred.shape != gt_wp.shape:
        raise ShapeError("autoregressive_gwd_loss", pred.shape, gt_wp.shape)
    hl = (spec.x_range[1] - spec.x_range[0]) / 2.0
    hw = (spec.y_range[1] - spec.y_range[0]) / 2.0
    cos_p, sin_p = _traj_cos_sin(pred)
    gt_head = trajectory_headings(gt_wp)
    d2 = gwd_d2(pred, as_tensor(hl), as_tensor(hw), cos_p, sin_p,
                as_tensor(gt_wp), as_tensor(hl), as_tensor(hw),
                as_tensor(np.cos(gt_head)), as_tensor(np.sin(gt_head)))
    # |.| guards against rounding-level negative d^2 at identical boxes
    return tmean(tlog(add(as_tensor(1.0), tabs(d2))))


def autoregressive_total(pred_traj, gt_traj, pred_map_points: Tensor,
                         gt_map: MapInstanceSet, spec: BevSpec,
                         weights: LossWeights) -> Tensor:
    map_term = autoregressive_map_loss(pred_traj, gt_traj, pred_map_points,
                                       gt_map, spec, weights.mask_eps)
    gwd_term = autoregressive_gwd_loss(pred_traj, gt_traj, spec)
    return add(mul(as_tensor(weights.delta), map_term),
               mul(as_tensor(weights.lam), gwd_term))


# ---------------------------------------------------------------------------
# set-based perception, motion and planning losses
# ---------------------------------------------------------------------------

def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal one-to-one assignment of min(n, m) pairs minimizing total cost."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian_match: cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def _gt_agent_params(gt_agents: list[AgentBox]) -> np.ndarray:
    return np.array([[a.rect.center[0], a.rect.center[1],
                      a.rect.half_extents[0], a.rect.half_extents[1],
                      a.rect.heading] for a in gt_agents])


def _match_agents(pred: AgentPredictions, gt_agents: list[AgentBox]):
    gt = _gt_agent_params(gt_agents)
    gt_cls = np.array([a.cls for a in gt_agents])
    probs = softmax(pred.class_logits, axis=1).data
    cost = np.abs(pred.boxes.data[:, None, :2] - gt[None, :, :2]).sum(axis=2)
    cost = cost + (1.0 - probs[:, gt_cls])
    return hungarian_match(cost)


def _classification(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(len(targets)), targets]
    return mul(as_tensor(-1.0), tmean(picked))


def perception_losses(pred_agents: AgentPredictions, gt_agents: list[AgentBox],
                      pred_map: MapPredictions, gt_map: MapInstanceSet
                      ) -> tuple[Tensor, Tensor]:
    """(L_det, L_map): matched pairs contribute L1 regression plus
    classification; unmatched predictions contribute no-object classification."""
    n_pred = pred_agents.boxes.shape[0]
    targets = np.full(n_pred, AGENT_NO_OBJECT, dtype=np.intp)
    if gt_agents:
        rows, cols = _match_agents(pred_agents, gt_agents)
        gt = _gt_agent_params(gt_agents)
        targets[rows] = [gt_agents[j].cls for j in cols]
        reg = tmean(tabs(sub(take(pred_agents.boxes, rows), as_tensor(gt[cols]))))
        l_det = add(reg, _classification(pred_agents.class_logits, targets))
    else:
        l_det = _classification(pred_agents.class_logits, targets)

    n_map_pred = pred_map.points.shape[0]
    map_targets = np.full(n_map_pred, MAP_NO_OBJECT, dtype=np.intp)
    gt_idx = np.flatnonzero(gt_map.valid)
    if gt_idx.size:
        probs = softmax(pred_map.class_logits, axis=1).data
        pred_centers = pred_map.points.data.mean(axis=1)
        gt_centers = gt_map.points[gt_idx].mean(axis=1)
        cost = np.abs(pred_centers[:, None] - gt_centers[None]).sum(axis=2)
        cost = cost + (1.0 - probs[:, gt_map.classes[gt_idx]])
        rows, cols = hungarian_match(cost)
        map_targets[rows] = gt_map.classes[gt_idx[cols]]
        reg = tmean(tabs(sub(take(pred_map.points, rows),
                             as_tensor(gt_map.points[gt_idx[cols]]))))
        l_map = add(reg, _classification(pred_map.class_logits, map_targets))
    else:
        l_map = _classification(pred_map.class_logits, map_targets)
    return l_det, l_map


def motion_loss(pred_agents: AgentPredictions, gt_agents: list[AgentBox]) -> Tensor:
    """L1 on matched agents' future waypoints (single predicted future per
    agent, so no mode-selection term)."""
    if not gt_agents:
        return as_tensor(0.0)
    rows, cols = _match_agents(pred_agents, gt_agents)
    gt_future = np.stack([gt_agents[j].future for j in cols])
    return tmean(tabs(sub(take(pred_agents.motion, rows), as_tensor(gt_future))))


def planning_loss(traj_modes: Tensor, gt_traj, scores: Tensor) -> tuple[Tensor, int]:
    """Winner-takes-all imitation: L1 of the mode closest to ground truth plus
    cross-entropy selecting that mode. Ties break to the lowest index."""
    gt = np.asarray(gt_traj, dtype=np.float64)
    dists = np.abs(traj_modes.data - gt[None]).mean(axis=(1, 2))
    winner = int(np.argmin(dists))
    reg = tmean(tabs(sub(traj_modes[winner], as_tensor(gt))))
    logp = log_softmax(scores, axis=0)
    ce = mul(as_tensor(-1.0), logp[winner])
    return add(reg, ce), winner


# ---------------------------------------------------------------------------
# multi-task total
# ---------------------------------------------------------------------------

def total_loss(parts: dict[str, Tensor | float], weights: LossWeights) -> Tensor:
    """det + map + mot + plan task terms plus aux*(distill + autoreg)."""
    vals: dict[str, Tensor] = {}
    for name in ("det", "map", "mot", "plan", "distill", "autoreg"):
        part = parts.get(name, 0.0)
        t = as_tensor(part)
        v = float(t.data) if t.data.ndim == 0 else t.item()
        if not math.isfinite(v):
            raise NonFiniteLoss(name, v)
        vals[name] = t
    aux = add(vals["distill"], vals["autoreg"])
    out = mul(as_tensor(weights.det), vals["det"])
    out = add(out, mul(as_tensor(weights.map), vals["map"]))
    out = add(out, mul(as_tensor(weights.mot), vals["mot"]))
    out = add(out, mul(as_tensor(weights.plan), vals["plan"]))
    return add(out, mul(as_tensor(weights.aux), aux))
