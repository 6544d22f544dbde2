"""Experiment runner: ``python -m voltmesh {train,evaluate,sweep}``.

Exit codes: 0 success, 1 runtime failure (I/O, divergence, incompatible
inputs), 2 usage error. ``VOLTMESH_THREADS`` caps the number of worker
processes a sweep uses (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import MadqnConfig, MadqnPolicy, RhoConfig, RhoPolicy, UncontrolledPolicy, madqn_train
from .env import FAIRNESS_SIGNS, FaultSpec, RewardConfig, rollout
from .maddpg import MaddpgPolicy, TrainConfig, episodes_to_fraction, train
from .nn import TrainingDivergence, load_networks
from .scenario import (DEFAULT_CONFIG, ScenarioError, load_config, load_scenario_dir, parse_synthetic_spec,
                       synthetic_from_spec)

CURVE_FIELDS = ["episode", "mean_reward", "completion", "cost"]
METRIC_FIELDS = ["policy", "scenario", "seed", "total_cost", "total_reward", "completion",
                 "fairness_dispersion", "n_sessions"]
EVAL_SEED_OFFSET = 10_000


class UsageError(Exception):
    pass


# -- argument helpers ----------------------------------------------------------------

def _unit_interval(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"xi must lie in [0, 1], got {x}")
    return x


def _positive_int(text: str) -> int:
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if x < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {x}")
    return x


def parse_fault(text: str) -> FaultSpec:
    """``step=S,chargers=0,2`` (chargers may also be separated by ``;`` or ``+``)."""
    m = re.fullmatch(r"\s*step=(\d+)\s*,\s*chargers=([\d\s,;+]+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad fault spec {text!r}; expected step=S,chargers=LIST")
    chargers = tuple(sorted({int(c) for c in re.split(r"[,;+\s]+", m.group(2).strip()) if c}))
    if not chargers:
        raise argparse.ArgumentTypeError("fault spec lists no chargers")
    return FaultSpec(int(m.group(1)), chargers)


def parse_grid(text: str):
    """``name=a:b:n`` (inclusive linspace) or ``name=v1,v2,...`` -> (name, values)."""
    if "=" not in text:
        raise UsageError(f"bad --param {text!r}; expected name=a:b:n or name=v1,v2")
    name, body = (s.strip() for s in text.split("=", 1))
    if name not in ("xi", "size"):
        raise UsageError(f"unknown sweep parameter {name!r}; use xi or size")
    try:
        if ":" in body:
            a, b, n = body.split(":")
            values = np.linspace(float(a), float(b), int(n)).tolist()
        else:
            values = [float(v) for v in body.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"malformed range {body!r}") from None
    if not values:
        raise UsageError(f"empty parameter grid in {text!r}")
    if name == "size":
        if any(v != int(v) or v < 1 for v in values):
            raise UsageError("size values must be positive integers")
        values = [int(v) for v in values]
    elif any(not 0.0 <= v <= 1.0 for v in values):
        raise UsageError("xi values must lie in [0, 1]")
    return name, values


def _run_config(args) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    return cfg


def reward_from(args, cfg: dict) -> RewardConfig:
    xi = args.xi if getattr(args, "xi", None) is not None else cfg["xi"]
    sign = getattr(args, "fairness", None) or cfg["fairness_sign"]
    return RewardConfig(xi=xi, rho=cfg["rho"], grid_penalty_coeff=cfg["grid_penalty_coeff"], fairness_sign=sign)


# -- shared run logic ---------------------------------------------------------------------

def evaluate_on(policy, scenarios, reward: RewardConfig, pv_rule: str = "request") -> dict:
    """Mean greedy metrics of ``policy`` over ``scenarios``."""
    rows = [rollout(sc, policy, reward=reward, pv_rule=pv_rule).metrics() for sc in scenarios]
    keys = ("total_cost", "total_reward", "completion", "fairness_dispersion")
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    out["n_sessions"] = int(sum(r["n_sessions"] for r in rows))
    return out


def train_policy(algo: str, scenarios, seed: int, episodes: int, reward: RewardConfig, cfg: dict,
                 exploration: str = "noisy", batch_size: Optional[int] = None,
                 steps_per_update: Optional[int] = None, warmup: Optional[int] = None, diagnostics_dir=None):
    batch_size = batch_size or cfg["batch_size"]
    steps_per_update = steps_per_update or cfg["steps_per_update"]
    warmup = cfg["warmup"] if warmup is None else warmup
    if algo == "maddpg":
        tc = TrainConfig(
            gamma=cfg["gamma"], tau=cfg["tau"], batch_size=batch_size, lr_actor=cfg["lr_actor"],
            lr_critic=cfg["lr_critic"], episodes=episodes, steps_per_update=steps_per_update, warmup=warmup,
            buffer_capacity=cfg["buffer_capacity"],
            exploration="noisy_net" if exploration == "noisy" else "action_noise", pv_rule=cfg["pv_rule"],
        )
        res = train(scenarios, tc, seed, reward, diagnostics_dir=diagnostics_dir)
        return res.policy, res.curve
    mc = MadqnConfig(gamma=cfg["gamma"], lr=cfg["lr_critic"], batch_size=batch_size, episodes=episodes,
                     warmup=warmup, steps_per_update=steps_per_update, tau=cfg["tau"],
                     buffer_capacity=cfg["buffer_capacity"], pv_rule=cfg["pv_rule"])
    res = madqn_train(scenarios, mc, seed, reward, diagnostics_dir=diagnostics_dir)
    return res.policy, res.curve


def write_csv(path, fieldnames, rows) -> Path:
    p = Path(path)
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in fieldnames})
    return p


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args)
    scenarios = _scenarios(args, cfg, args.train_scenarios)
    reward = reward_from(args, cfg)
    out = Path(args.out or f"runs/train-{args.algo}-seed{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    policy, curve = train_policy(args.algo, scenarios, args.seed, args.episodes, reward, cfg, args.exploration,
                                 args.batch_size, args.steps_per_update, args.warmup, diagnostics_dir=out)
    policy.save(out / "checkpoint.npz")
    write_csv(out / "learning_curve.csv", CURVE_FIELDS, curve)
    ev = evaluate_on(policy, scenarios, reward, cfg["pv_rule"])
    tail = [c["mean_reward"] for c in curve[-50:]]
    summary = {
        "algo": args.algo, "exploration": args.exploration, "seed": args.seed, "episodes": args.episodes,
        "xi": reward.xi, "fairness_sign": reward.fairness_sign, "scenario": args.scenario,
        "n_chargers": scenarios[0].n_chargers, "n_scenarios": len(scenarios),
        "final_mean_reward": float(np.mean(tail)) if tail else 0.0,
        "episodes_to_95pct": episodes_to_fraction(curve),
        "final_cost": ev["total_cost"], "completion": ev["completion"],
        "fairness_dispersion": ev["fairness_dispersion"],
    }
    _dump_json(out / "summary.json", summary)
    print(f"trained {args.algo} ({args.exploration}) for {args.episodes} episodes -> {out}")
    print(f"cost {ev['total_cost']:.4f}  completion {ev['completion']:.2f}%  "
          f"dispersion {ev['fairness_dispersion']:.2f}")
    return 0


def _scenarios(args, cfg, count):
    spec = args.scenario
    if spec.startswith("synthetic:"):
        try:
            parse_synthetic_spec(spec)
        except ScenarioError as exc:
            raise UsageError(str(exc)) from None
        return [synthetic_from_spec(spec, args.scenario_seed + i, cfg) for i in range(count)]
    p = Path(spec)
    if not p.is_dir():
        raise UsageError(f"scenario {spec!r} is neither a directory nor synthetic:NxH")
    return [load_scenario_dir(p, cfg if args.config else None)]


def load_policy(name: str, scenario, args=None):
    if name == "uncontrolled":
        return UncontrolledPolicy(scenario.station)
    if name == "rho":
        window = getattr(args, "window", "longest_parking")
        rc = RhoConfig(window="longest_parking" if window == "longest_parking" else "fixed",
                       k=0 if window == "longest_parking" else int(window),
                       forecast=getattr(args, "forecast", "perfect"), trigger=getattr(args, "trigger", "every_step"))
        return RhoPolicy(rc, scenario)
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"policy {name!r} is not a checkpoint file, 'rho' or 'uncontrolled'")
    _, meta = load_networks(path)
    kind = meta.get("kind")
    policy = MaddpgPolicy.load(path) if kind == "maddpg" else MadqnPolicy.load(path) if kind == "madqn" else None
    if policy is None:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    if policy.n_agents != scenario.n_chargers:
        raise ValueError(f"checkpoint has {policy.n_agents} agents but the scenario has "
                         f"{scenario.n_chargers} chargers")
    return policy


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    (scenario,) = _scenarios(args, cfg, 1)
    reward = reward_from(args, cfg)
    policy = load_policy(args.policy, scenario, args)
    fault = args.fault.validate(scenario.n_chargers) if args.fault else None
    out = Path(args.out or "runs/evaluate")
    out.mkdir(parents=True, exist_ok=True)
    trace = rollout(scenario, policy, fault=fault, seed=args.seed, reward=reward, pv_rule=cfg["pv_rule"])
    trace.to_jsonl(out / "trace.jsonl")
    m = trace.metrics()
    row = {"policy": args.policy, "scenario": args.scenario, "seed": args.seed, **m}
    write_csv(out / "metrics.csv", METRIC_FIELDS, [row])
    print(f"{args.policy}: cost {m['total_cost']:.4f}  completion {m['completion']:.2f}%  "
          f"dispersion {m['fairness_dispersion']:.2f}")
    if fault is not None:
        rep = dict(trace.fault_report)
        rep["decentralized"] = bool(getattr(policy, "decentralized", False))
        _dump_json(out / "fault_report.json", rep)
        print(f"fault report: {rep['changed_actions']} changed healthy actions over "
              f"{rep['steps_compared']} steps")
    return 0


def run_job(job: dict) -> dict:
    """One sweep repetition: train on its scenario set, evaluate on held-out draws."""
    cfg = job["cfg"]
    reward = RewardConfig(xi=job["xi"], rho=cfg["rho"], grid_penalty_coeff=cfg["grid_penalty_coeff"],
                          fairness_sign=job["fairness"])
    train_set = [synthetic_from_spec(job["spec"], job["scenario_seed"] + i, cfg) for i in range(job["n_train"])]
    eval_set = [synthetic_from_spec(job["spec"], EVAL_SEED_OFFSET + job["scenario_seed"] + i, cfg)
                for i in range(job["n_eval"])]
    policy, curve = train_policy(job["algo"], train_set, job["seed"], job["episodes"], reward, cfg,
                                 job["exploration"], job["batch_size"], job["steps_per_update"], job["warmup"])
    ev = evaluate_on(policy, eval_set, reward, cfg["pv_rule"])
    n = train_set[0].n_chargers
    return {"param": job["param"], "value": job["value"], "seed": job["seed"], "n_chargers": n,
            "cost": ev["total_cost"], "cost_per_charger": ev["total_cost"] / n,
            "completion": ev["completion"], "fairness_dispersion": ev["fairness_dispersion"],
            "final_mean_reward": float(np.mean([c["mean_reward"] for c in curve[-50:]]))}


def sweep_jobs(args, cfg) -> list:
    name, values = parse_grid(args.param)
    if not args.scenario.startswith("synthetic:"):
        raise UsageError("sweeps need a synthetic:NxH scenario")
    try:
        base_n, horizon = parse_synthetic_spec(args.scenario)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    jobs = []
    for v in values:
        job_cfg = dict(cfg)
        spec, xi = args.scenario, args.xi if args.xi is not None else cfg["xi"]
        if name == "size":
            spec = f"synthetic:{v}x{horizon}"
            if not args.no_scale:
                job_cfg["pv_capacity"] = cfg["pv_capacity"] * v / base_n
                job_cfg["g_max"] = cfg["g_max"] * v / base_n
        else:
            xi = float(v)
        for r in range(args.repeat):
            jobs.append({"param": name, "value": v, "seed": args.seed + r, "spec": spec, "xi": xi, "cfg": job_cfg,
                         "algo": args.algo, "exploration": args.exploration, "episodes": args.episodes,
                         "fairness": args.fairness or cfg["fairness_sign"], "scenario_seed": args.scenario_seed,
                         "n_train": args.train_scenarios, "n_eval": args.eval_scenarios,
                         "batch_size": args.batch_size, "steps_per_update": args.steps_per_update,
                         "warmup": args.warmup})
    return jobs


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get("VOLTMESH_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"VOLTMESH_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def aggregate(results: list) -> list:
    rows = []
    for v in dict.fromkeys(r["value"] for r in results):
        group = [r for r in results if r["value"] == v]
        row = {"param": group[0]["param"], "value": v, "runs": len(group)}
        for k in ("cost", "cost_per_charger", "completion", "fairness_dispersion"):
            vals = np.array([g[k] for g in group])
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std())
        rows.append(row)
    return rows


AGG_FIELDS = ["param", "value", "runs", "cost_mean", "cost_std", "cost_per_charger_mean", "cost_per_charger_std",
              "completion_mean", "completion_std", "fairness_dispersion_mean", "fairness_dispersion_std"]
RUN_FIELDS = ["param", "value", "seed", "n_chargers", "cost", "cost_per_charger", "completion",
              "fairness_dispersion", "final_mean_reward"]


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    jobs = sweep_jobs(args, cfg)
    workers = worker_count(len(jobs))
    if workers == 1:
        results = [run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_job, jobs))
    out = Path(args.out or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "runs.csv", RUN_FIELDS, results)
    agg = aggregate(results)
    write_csv(out / "sweep.csv", AGG_FIELDS, agg)
    for row in agg:
        print(f"{row['param']}={row['value']}: cost {row['cost_mean']:.3f}±{row['cost_std']:.3f}  "
              f"completion {row['completion_mean']:.2f}±{row['completion_std']:.2f}")
    return 0


# -- parser ----------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, scenario_required: bool = True):
    p.add_argument("--scenario", required=scenario_required, help="scenario directory or synthetic:NxH")
    p.add_argument("--scenario-seed", type=int, default=0, help="first seed for synthetic scenario draws")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--xi", type=_unit_interval, default=None, help="cost weight in [0, 1]")
    p.add_argument("--fairness", choices=FAIRNESS_SIGNS, default=None)
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--out", help="output directory")


def _learning(p: argparse.ArgumentParser):
    p.add_argument("--algo", choices=("maddpg", "madqn"), default="maddpg")
    p.add_argument("--exploration", choices=("noisy", "action-noise"), default="noisy")
    p.add_argument("--episodes", type=_positive_int, default=500)
    p.add_argument("--train-scenarios", type=_positive_int, default=1,
                   help="number of synthetic scenario draws to train on")
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--steps-per-update", type=_positive_int, default=None)
    p.add_argument("--warmup", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltmesh", description="EV charging station experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train MADDPG or MADQN")
    _common(p)
    _learning(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll out a policy and export trace and metrics")
    _common(p)
    p.add_argument("--policy", required=True, help="checkpoint path, 'rho' or 'uncontrolled'")
    p.add_argument("--fault", type=parse_fault, default=None, help="step=S,chargers=LIST")
    p.add_argument("--forecast", choices=("perfect", "persistence"), default="perfect")
    p.add_argument("--window", default="longest_parking", help="longest_parking or a step count")
    p.add_argument("--trigger", choices=("every_step", "on_arrival"), default="every_step")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid of training runs with aggregated CSV")
    _common(p, scenario_required=False)
    _learning(p)
    p.set_defaults(scenario="synthetic:2x96")
    p.add_argument("--param", required=True, help="xi=a:b:n or size=4,8")
    p.add_argument("--repeat", type=_positive_int, default=3)
    p.add_argument("--eval-scenarios", type=_positive_int, default=5)
    p.add_argument("--no-scale", action="store_true",
                   help="keep PV capacity and grid limit fixed across station sizes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "evaluate" and args.window != "longest_parking":
        try:
            if int(args.window) < 1:
                raise ValueError
        except ValueError:
            parser.print_usage(sys.stderr)
            print("voltmesh: error: --window must be longest_parking or a positive integer", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voltmesh: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergence, ScenarioError, OSError, ValueError, RuntimeError) as exc:
        print(f"voltmesh: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
