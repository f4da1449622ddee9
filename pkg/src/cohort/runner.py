"""Glue between scenario configs, schedulers and metrics."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .config import ScenarioConfig
from .metrics import RunResult, SuccessCriteria, chain_records, resource_summary
from .simworld import World
from .training.rewards import make_reward_fn


def criteria_for(cfg: ScenarioConfig) -> SuccessCriteria:
    budgets = {w.latency_budget_ms for w in cfg.workloads} or {1800.0}
    goals = {"clip": 4.0, "sam": 2.0, "full": 2.0}
    for w in cfg.workloads:
        goals[w.pipeline] = w.goal_fps
    return SuccessCriteria(goal_fps=goals, latency_budget_ms=max(budgets), fps_window_s=cfg.sim.fps_window_s)


def simulate(cfg: ScenarioConfig, scheduler, seed: int, with_reward=True, duals=None) -> World:
    world = World(cfg, seed=seed, scheduler=scheduler,
                  reward_fn=make_reward_fn(cfg.reward) if with_reward else None)
    world.duals = duals
    return world.run()


def run_result(cfg: ScenarioConfig, world: World, label: str) -> RunResult:
    return RunResult(
        scenario=cfg.name,
        scheduler=label,
        seed=world.seed,
        config_hash=cfg.digest(),
        chains=chain_records(world),
        resources=resource_summary(world),
        robots=list(cfg.roster),
        criteria=criteria_for(cfg),
        dropped_frames=dict(world.dropped_frames),
    )


def evaluate_once(cfg: ScenarioConfig, scheduler, seed: int, label: str = None) -> RunResult:
    world = simulate(cfg, scheduler, seed, with_reward=False)
    return run_result(cfg, world, label or getattr(scheduler, "name", "custom"))


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("COHORT_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_seeds(cfg: ScenarioConfig, make_scheduler, seeds, label=None) -> list:
    """One RunResult per seed; each seed gets a fresh world and scheduler."""
    seeds = list(seeds)

    def job(s):
        return evaluate_once(cfg, make_scheduler(s), s, label)

    n = min(max_workers(), len(seeds))
    if n <= 1:
        return [job(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(job, seeds))
