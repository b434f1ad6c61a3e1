"""Command-line harness.

Subcommands: gen-data, train, eval, perturb, ablate, gradcheck. Every run is
reproducible: (config, seed) fully determines all emitted files. Outputs land
in --out (default from the config's [io] section): train/val JSONL datasets
plus manifest.json, losses.csv and DBP1 checkpoints, results.csv/results.json.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .evaluate import (ResultRow, eval_rows, perturbation_rows,
                       write_results_csv, write_results_json)
from .gradcheck import DEFAULT_TOL, format_report, run_gradcheck
from .model import DualBranchPlanner, ModelConfig
from .train import TrainAbort, train_model, write_loss_csv
from .world import SCHEMA, ensure_obs, generate_scenario, load_dataset, save_dataset

# Component ladder: dual-branch, distillation, scene-aware init and
# autoregressive mapping are added incrementally to the ego-enhanced baseline.
ABLATION_LADDER = (
    ("ID-1", dict(dual_branch=False, distill=False, scene_aware_init=False,
                  autoregressive_map=False)),
    ("ID-2", dict(dual_branch=True, distill=False, scene_aware_init=False,
                  autoregressive_map=False)),
    ("ID-3", dict(dual_branch=True, distill=True, scene_aware_init=False,
                  autoregressive_map=False)),
    ("ID-4", dict(dual_branch=True, distill=True, scene_aware_init=True,
                  autoregressive_map=False)),
    ("ID-5", dict(dual_branch=True, distill=True, scene_aware_init=True,
                  autoregressive_map=True)),
)


def _generate_split(cfg: RunConfig, seed_start: int, size: int, salt: int):
    turn_fraction = 1.0 - cfg.data.straight_fraction
    n_turn = int(math.floor(size * turn_fraction))
    order = np.random.default_rng((cfg.seed, salt)).permutation(size)
    turn_idx = set(order[:n_turn].tolist())
    scenarios = []
    for i in range(size):
        mix = (0.0, 1.0) if i in turn_idx else (1.0, 0.0)
        scenarios.append(generate_scenario(
            seed_start + i, command_mix=mix, difficulty=cfg.data.difficulty,
            spec=cfg.model.bev, horizon_steps=cfg.model.horizon_steps,
            dt=cfg.model.dt, n_map=cfg.model.n_map,
            n_map_points=cfg.model.n_map_points, plan_noise=cfg.data.plan_noise))
    return scenarios, n_turn


def cmd_gen_data(cfg: RunConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"schema": SCHEMA, "seed": cfg.seed, "splits": {}}
    for name, start, size, salt in (
            ("train", cfg.data.train_seed_start, cfg.data.train_size, 0),
            ("val", cfg.data.val_seed_start, cfg.data.val_size, 1)):
        scenarios, n_turn = _generate_split(cfg, start, size, salt)
        path = os.path.join(out_dir, f"{name}.jsonl")
        save_dataset(scenarios, path)
        manifest["splits"][name] = {
            "path": f"{name}.jsonl", "count": size,
            "seed_start": start, "seed_end": start + size - 1,
            "straight": size - n_turn, "turns": n_turn,
        }
    mpath = os.path.join(out_dir, "manifest.json")
    tmp = mpath + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, mpath)
    return manifest


def _load_split(cfg: RunConfig, data_dir: str, name: str, required: bool = True):
    path = os.path.join(data_dir, f"{name}.jsonl")
    if not os.path.exists(path):
        if required:
            raise FileNotFoundError(f"dataset {path} not found; run gen-data first")
        return []
    scenarios = load_dataset(path)
    ensure_obs(scenarios, cfg.model.bev)
    return scenarios


def _checkpoint_meta(cfg: RunConfig) -> dict:
    return {"model": cfg.model.to_dict(), "seed": cfg.seed}


def load_planner(path: str) -> tuple[DualBranchPlanner, dict]:
    params, meta = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(meta["model"])
    model = DualBranchPlanner(model_cfg, seed=int(meta.get("seed", 0)))
    model.load_state(params)
    return model, meta


def cmd_train(cfg: RunConfig, data_dir: str, out_dir: str,
              epochs: int | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    train_scs = _load_split(cfg, data_dir, "train")
    val_scs = _load_split(cfg, data_dir, "val", required=False)
    model = DualBranchPlanner(cfg.model, seed=cfg.seed)
    stats, best_state, seconds = train_model(
        model, train_scs, cfg.optimizer, cfg.losses, cfg.seed,
        val_scenarios=val_scs or None, epochs=epochs)
    write_loss_csv(stats, os.path.join(out_dir, "losses.csv"))
    meta = _checkpoint_meta(cfg)
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    best_path = os.path.join(out_dir, "checkpoint_best.ckpt")
    save_checkpoint(final_path, model.state(), meta)
    save_checkpoint(best_path, best_state, meta)
    return {"final": final_path, "best": best_path, "epochs": len(stats),
            "train_seconds": seconds,
            "last": {c: getattr(stats[-1], c) for c in
                     ("total", "det", "map", "mot", "plan", "distill", "autoreg")}}


def cmd_eval(cfg: RunConfig, checkpoint: str, data_dir: str, out_dir: str,
             split_by_command: bool = False) -> list[ResultRow]:
    os.makedirs(out_dir, exist_ok=True)
    model, _ = load_planner(checkpoint)
    scenarios = _load_split_for_model(model, data_dir)
    rows = eval_rows(model, scenarios, experiment_id="eval", seed=cfg.seed,
                     split_by_command=split_by_command)
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    write_results_json(rows, os.path.join(out_dir, "results.json"))
    return rows


def _load_split_for_model(model: DualBranchPlanner, data_dir: str):
    path = os.path.join(data_dir, "val.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset {path} not found; run gen-data first")
    scenarios = load_dataset(path)
    ensure_obs(scenarios, model.cfg.bev)
    return scenarios


def cmd_perturb(cfg: RunConfig, checkpoint: str, data_dir: str, out_dir: str,
                scene_only: bool = False) -> list[ResultRow]:
    os.makedirs(out_dir, exist_ok=True)
    model, _ = load_planner(checkpoint)
    scenarios = _load_split_for_model(model, data_dir)
    rows = perturbation_rows(model, scenarios, experiment_id="perturb",
                             seed=cfg.seed, scene_only=scene_only,
                             modes=cfg.experiment.perturbation_modes)
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    write_results_json(rows, os.path.join(out_dir, "results.json"))
    return rows


def cmd_ablate(cfg: RunConfig, data_dir: str, out_dir: str,
               epochs: int | None = None) -> list[ResultRow]:
    """Train and evaluate the five-rung component ladder with a shared seed
    and identical data order; one result row per rung."""
    os.makedirs(out_dir, exist_ok=True)
    train_scs = _load_split(cfg, data_dir, "train")
    val_scs = _load_split(cfg, data_dir, "val")
    rows = []
    for exp_id, flags in ABLATION_LADDER:
        model_cfg = dataclasses.replace(cfg.model, **flags)
        model = DualBranchPlanner(model_cfg, seed=cfg.seed)
        t0 = time.perf_counter()
        stats, _, _ = train_model(model, train_scs, cfg.optimizer, cfg.losses,
                                  cfg.seed, epochs=epochs)
        seconds = time.perf_counter() - t0
        write_loss_csv(stats, os.path.join(out_dir, f"losses_{exp_id}.csv"))
        rows.extend(eval_rows(model, val_scs, experiment_id=exp_id, seed=cfg.seed,
                              train_seconds=seconds))
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    write_results_json(rows, os.path.join(out_dir, "results.json"))
    return rows


def cmd_gradcheck(seed: int, tol: float = DEFAULT_TOL) -> int:
    reports = run_gradcheck(seed=seed, tol=tol)
    print(format_report(reports, tol))
    return 0 if all(r.passed(tol) for r in reports) else 1


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbp", description="dual-branch BEV planner harness")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate train/val scenario datasets")
    _add_common(p)

    p = sub.add_parser("train", help="train a planner variant")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split-by-command", action="store_true")

    p = sub.add_parser("perturb", help="ego-velocity perturbation sweep")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--scene-only", action="store_true",
                   help="sever the ego branch at evaluation time")

    p = sub.add_parser("ablate", help="train/evaluate the component ladder")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    out_dir = cfg.io.out_dir
    data_dir = getattr(args, "data", None) or cfg.io.resolved_data_dir()

    try:
        if args.cmd == "gen-data":
            manifest = cmd_gen_data(cfg, out_dir)
            counts = {k: v["count"] for k, v in manifest["splits"].items()}
            print(f"wrote datasets to {out_dir}: {counts}")
        elif args.cmd == "train":
            info = cmd_train(cfg, data_dir, out_dir, epochs=args.epochs)
            print(f"trained {info['epochs']} epochs in {info['train_seconds']:.1f}s; "
                  f"final loss {info['last']['total']:.4f}; "
                  f"checkpoints: {info['final']}, {info['best']}")
        elif args.cmd == "eval":
            rows = cmd_eval(cfg, args.checkpoint, data_dir, out_dir,
                            split_by_command=args.split_by_command)
            for r in rows:
                print(f"[{r.command_filter}] L2 avg {r.metrics.l2_avg:.4f} m, "
                      f"CR avg {r.metrics.collision_avg:.4f}")
        elif args.cmd == "perturb":
            rows = cmd_perturb(cfg, args.checkpoint, data_dir, out_dir,
                               scene_only=args.scene_only)
            for r in rows:
                print(f"[{r.perturbation}] L2 avg {r.metrics.l2_avg:.4f} m, "
                      f"CR avg {r.metrics.collision_avg:.4f}")
        elif args.cmd == "ablate":
            rows = cmd_ablate(cfg, data_dir, out_dir, epochs=args.epochs)
            for r in rows:
                print(f"[{r.experiment_id}] L2 avg {r.metrics.l2_avg:.4f} m, "
                      f"CR avg {r.metrics.collision_avg:.4f}")
        elif args.cmd == "gradcheck":
            return cmd_gradcheck(cfg.seed, tol=args.tol)
    except TrainAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
