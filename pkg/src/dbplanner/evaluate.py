"""Evaluation runners: open-loop metrics over scenario sets, ego-status
perturbation sweeps, and stable CSV/JSON result emission.

Forward passes run without tape recording; scenarios evaluate independently,
so a read-only model can be shared across worker threads (capped by the
DBP_THREADS environment variable)."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .metrics import HORIZONS_S, PlanMetrics, aggregate_metrics, collision_check, l2_error
from .model import DualBranchPlanner
from .scene import Scenario
from .world import PERTURB_MODES, perturb_ego

FLAG_NAMES = ("dual_branch", "distill", "scene_aware_init", "autoregressive_map",
              "ego_enhancement", "path_attention")

CSV_COLUMNS = ("experiment_id", *FLAG_NAMES, "perturbation", "command_filter",
               "n_scenarios",
               "l2_1s", "l2_2s", "l2_3s", "l2_avg",
               "col_1s", "col_2s", "col_3s", "col_avg",
               "train_seconds", "seed")


@dataclass
class ResultRow:
    experiment_id: str
    flags: dict[str, bool]
    perturbation: str
    command_filter: str        # "all", "ST" or "LR"
    n_scenarios: int
    metrics: PlanMetrics
    train_seconds: float
    seed: int

    def csv_values(self) -> list[str]:
        m = self.metrics
        vals = [self.experiment_id]
        vals += ["1" if self.flags.get(n, False) else "0" for n in FLAG_NAMES]
        vals += [self.perturbation, self.command_filter, str(self.n_scenarios)]
        vals += [repr(float(m.l2_at[h])) for h in HORIZONS_S] + [repr(float(m.l2_avg))]
        vals += [repr(float(m.collision_at[h])) for h in HORIZONS_S]
        vals += [repr(float(m.collision_avg))]
        vals += [repr(float(self.train_seconds)), str(self.seed)]
        return vals


def model_flags(model: DualBranchPlanner) -> dict[str, bool]:
    return {n: getattr(model.cfg, n) for n in FLAG_NAMES}


def eval_threads() -> int:
    cap = os.environ.get("DBP_THREADS", "")
    if cap.strip():
        return max(1, int(cap))
    return 1


def plan_scenario(model: DualBranchPlanner, sc: Scenario, perturb: str = "none",
                  scene_only: bool = False) -> np.ndarray:
    """Planned (T, 2) trajectory for one scenario; perturbation touches only
    the EgoStatus input, never the observation."""
    if sc.obs is None:
        raise ValueError("scenario has no rasterized observation; call ensure_obs")
    ego = perturb_ego(sc.ego_status, perturb)
    with no_grad():
        out = model.forward(sc.obs, ego, sc.command, scene_only=scene_only)
    return out.trajectories.data[out.selected_index].copy()


def evaluate_plans(plans: list[np.ndarray], scenarios: list[Scenario]) -> PlanMetrics:
    per = []
    for plan, sc in zip(plans, scenarios):
        l2 = l2_error(plan, sc.gt_plan.waypoints, sc.gt_plan.dt)
        col = collision_check(plan, sc.agents, sc.gt_plan.dt)
        per.append((l2, col))
    return aggregate_metrics(per)


def evaluate_model(model: DualBranchPlanner, scenarios: list[Scenario],
                   perturb: str = "none", scene_only: bool = False,
                   threads: int | None = None) -> PlanMetrics:
    plans = collect_plans(model, scenarios, perturb, scene_only, threads)
    return evaluate_plans(plans, scenarios)


def collect_plans(model: DualBranchPlanner, scenarios: list[Scenario],
                  perturb: str = "none", scene_only: bool = False,
                  threads: int | None = None) -> list[np.ndarray]:
    n = threads if threads is not None else eval_threads()
    if n <= 1 or len(scenarios) < 2:
        return [plan_scenario(model, sc, perturb, scene_only) for sc in scenarios]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(
            lambda sc: plan_scenario(model, sc, perturb, scene_only), scenarios))


def _filter(scenarios: list[Scenario], command_filter: str) -> list[Scenario]:
    if command_filter == "all":
        return scenarios
    if command_filter == "ST":
        return [s for s in scenarios if s.command == "straight"]
    if command_filter == "LR":
        return [s for s in scenarios if s.command in ("left", "right")]
    raise ValueError(f"unknown command filter {command_filter!r}")


def eval_rows(model: DualBranchPlanner, scenarios: list[Scenario],
              experiment_id: str, seed: int, split_by_command: bool = False,
              perturb: str = "none", scene_only: bool = False,
              train_seconds: float = 0.0) -> list[ResultRow]:
    flags = model_flags(model)
    filters = ["all", "ST", "LR"] if split_by_command else ["all"]
    rows = []
    for cf in filters:
        subset = _filter(scenarios, cf)
        if not subset:
            continue
        metrics = evaluate_model(model, subset, perturb, scene_only)
        rows.append(ResultRow(experiment_id=experiment_id, flags=flags,
                              perturbation=perturb, command_filter=cf,
                              n_scenarios=len(subset), metrics=metrics,
                              train_seconds=train_seconds, seed=seed))
    return rows


def perturbation_rows(model: DualBranchPlanner, scenarios: list[Scenario],
                      experiment_id: str, seed: int, scene_only: bool = False,
                      modes=PERTURB_MODES) -> list[ResultRow]:
    rows = []
    for mode in modes:
        rows.extend(eval_rows(model, scenarios, experiment_id, seed,
                              perturb=mode, scene_only=scene_only))
    return rows


def write_results_csv(rows: list[ResultRow], path: str) -> None:
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r.csv_values()) for r in rows]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def write_results_json(rows: list[ResultRow], path: str) -> None:
    payload = []
    for r in rows:
        payload.append({
            "experiment_id": r.experiment_id,
            "flags": r.flags,
            "perturbation": r.perturbation,
            "command_filter": r.command_filter,
            "n_scenarios": r.n_scenarios,
            "l2": {repr(h): r.metrics.l2_at[h] for h in HORIZONS_S},
            "l2_avg": r.metrics.l2_avg,
            "collision": {repr(h): r.metrics.collision_at[h] for h in HORIZONS_S},
            "collision_avg": r.metrics.collision_avg,
            "train_seconds": r.train_seconds,
            "seed": r.seed,
        })
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
