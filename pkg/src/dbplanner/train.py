"""Training loop: per-scenario steps, AdamW with warmup+cosine schedule,
per-epoch component logging, and final/best-val checkpoints."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import OptimizerConfig
from .losses import (LossWeights, NonFiniteLoss, autoregressive_total,
                     distill_total, motion_loss, perception_losses,
                     planning_loss, total_loss)
from .model import DualBranchPlanner, ForwardOutputs
from .optim import AdamW, cosine_lr
from .scene import Scenario

LOSS_COLUMNS = ("total", "det", "map", "mot", "plan", "distill", "autoreg", "lr")


class TrainAbort(RuntimeError):
    def __init__(self, epoch: int, component: str):
        super().__init__(f"non-finite loss in component {component!r} at epoch {epoch}")
        self.epoch = epoch
        self.component = component


@dataclass
class EpochStats:
    epoch: int
    total: float
    det: float
    map: float
    mot: float
    plan: float
    distill: float
    autoreg: float
    lr: float

    def row(self) -> list[float]:
        return [self.total, self.det, self.map, self.mot, self.plan,
                self.distill, self.autoreg, self.lr]


BRANCH_PLAN_WEIGHT = 0.5  # deep supervision on each branch's own plan


def scenario_losses(out: ForwardOutputs, sc: Scenario,
                    weights: LossWeights, cfg) -> dict[str, ad.Tensor | float]:
    """All loss components for one scenario, gated by the ablation flags."""
    l_det, l_map = perception_losses(out.agents, sc.agents, out.maps, sc.map)
    l_mot = motion_loss(out.agents, sc.agents)
    l_plan, winner = planning_loss(out.trajectories, sc.gt_plan.waypoints, out.scores)
    if cfg.dual_branch:
        gt = sc.gt_plan.waypoints
        l_scene, _ = planning_loss(out.scene_trajectories, gt, out.scene_scores)
        l_ego, _ = planning_loss(out.ego_trajectories, gt, out.ego_scores)
        branch = ad.mul(ad.as_tensor(BRANCH_PLAN_WEIGHT), ad.add(l_scene, l_ego))
        l_plan = ad.add(l_plan, branch)
    parts: dict[str, ad.Tensor | float] = {
        "det": l_det, "map": l_map, "mot": l_mot, "plan": l_plan,
        "distill": 0.0, "autoreg": 0.0,
    }
    if cfg.distill:
        rects = [a.rect for a in sc.agents]
        parts["distill"] = distill_total(out.b_woes, out.b_wes, rects, cfg.bev, weights)
    if cfg.autoregressive_map:
        parts["autoreg"] = autoregressive_total(out.trajectories[winner],
                                                sc.gt_plan.waypoints,
                                                out.maps.points, sc.map,
                                                cfg.bev, weights)
    return parts


def train_model(model: DualBranchPlanner, scenarios: list[Scenario],
                optim_cfg: OptimizerConfig, weights: LossWeights, seed: int,
                val_scenarios: list[Scenario] | None = None,
                epochs: int | None = None,
                ) -> tuple[list[EpochStats], dict[str, np.ndarray], float]:
    """Train in place; returns (per-epoch stats, best-val parameter state,
    wall seconds). Best-val tracks held-out avg L2 every ``eval_every``
    epochs; without a validation set the final state is the best state."""
    from .evaluate import evaluate_model  # late import, avoids a cycle

    epochs = epochs if epochs is not None else optim_cfg.epochs
    opt = AdamW(list(model.named_parameters()), lr=optim_cfg.lr,
                betas=(optim_cfg.beta1, optim_cfg.beta2), eps=optim_cfg.eps,
                weight_decay=optim_cfg.weight_decay)
    total_steps = max(1, epochs * len(scenarios))
    stats: list[EpochStats] = []
    best_state = None
    best_l2 = float("inf")
    step = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = np.random.default_rng((seed, epoch)).permutation(len(scenarios))
        sums = np.zeros(7)
        lr = optim_cfg.lr
        for i in order:
            sc = scenarios[i]
            out = model.forward(sc.obs, sc.ego_status, sc.command)
            parts = scenario_losses(out, sc, weights, model.cfg)
            try:
                loss = total_loss(parts, weights)
            except NonFiniteLoss as e:
                raise TrainAbort(epoch, e.part) from None
            lr = cosine_lr(step, total_steps, optim_cfg.lr, optim_cfg.warmup_steps)
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr)
            step += 1
            sums += [loss.item(),
                     *(p.item() if isinstance(p, ad.Tensor) else float(p)
                       for p in (parts["det"], parts["map"], parts["mot"],
                                 parts["plan"], parts["distill"], parts["autoreg"]))]
        mean = sums / max(1, len(scenarios))
        stats.append(EpochStats(epoch, *mean, lr=lr))
        is_last = epoch == epochs - 1
        if val_scenarios and (is_last or (optim_cfg.eval_every > 0
                                          and (epoch + 1) % optim_cfg.eval_every == 0)):
            metrics = evaluate_model(model, val_scenarios)
            if metrics.l2_avg < best_l2:
                best_l2 = metrics.l2_avg
                best_state = model.state()
    seconds = time.perf_counter() - t0
    if best_state is None:
        best_state = model.state()
    return stats, best_state, seconds


def write_loss_csv(stats: list[EpochStats], path: str) -> None:
    lines = ["epoch," + ",".join(LOSS_COLUMNS)]
    for s in stats:
        lines.append(str(s.epoch) + "," + ",".join(repr(float(v)) for v in s.row()))
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
