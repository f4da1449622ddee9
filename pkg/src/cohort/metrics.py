"""QoS and resource accounting for finished simulation runs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .simworld import CPU_BASE, CPU_BUSY

VERSION = "0.1.0"


@dataclass(frozen=True)
class SuccessCriteria:
    goal_fps: dict = field(default_factory=lambda: {"clip": 4.0, "sam": 2.0, "full": 2.0})
    latency_budget_ms: float = 1800.0
    fps_window_s: float = 5.0

    def __post_init__(self):
        if self.latency_budget_ms <= 0 or self.fps_window_s <= 0 or any(v <= 0 for v in self.goal_fps.values()):
            raise ValueError("success criteria must be positive")

    def goal_for(self, pipeline: str) -> float:
        return self.goal_fps[pipeline]


@dataclass
class ChainRecord:
    chain_id: str
    host: int
    pipeline: str
    start_ms: float
    end_ms: Optional[float]
    latency_ms: Optional[float]
    winners: list
    offloaded_stage_count: int
    n_stages: int
    energy_J: float
    failed: bool = False
    fps_at_completion: float = 0.0

    def __post_init__(self):
        if self.end_ms is not None and abs(self.latency_ms - (self.end_ms - self.start_ms)) > 1e-9:
            raise ValueError("latency_ms must equal end - start")
        if self.offloaded_stage_count > self.n_stages:
            raise ValueError("more offloaded stages than stages")

    @property
    def completed(self):
        return self.end_ms is not None and not self.failed


def windowed_fps(completion_times_ms, window_s: float, at_ms=None):
    """Completions in the trailing window divided by its length.

    Returns one value per query time (default: at each completion).
    """
    if window_s <= 0:
        raise ValueError("window_s must be > 0")
    t = np.sort(np.asarray(completion_times_ms, dtype=float))
    q = t if at_ms is None else np.asarray(at_ms, dtype=float)
    w = window_s * 1000.0
    hi = np.searchsorted(t, q, side="right")
    lo = np.searchsorted(t, q - w, side="right")
    return (hi - lo) / window_s


def chain_records(world) -> list:
    """Build ChainRecords (with completion-time FPS) from a finished world."""
    out = []
    window = world.sim.fps_window_s
    by_host = {}
    for ch in world.chains:
        if ch.end_ms is not None and not ch.failed:
            by_host.setdefault(ch.host, []).append(ch.end_ms)
    for ch in world.chains:
        fps = 0.0
        if ch.end_ms is not None and not ch.failed:
            fps = float(windowed_fps(by_host[ch.host], window, [ch.end_ms])[0])
        out.append(ChainRecord(
            chain_id=ch.spec.chain_id,
            host=ch.host,
            pipeline=ch.spec.pipeline,
            start_ms=ch.created_ms,
            end_ms=ch.end_ms if not ch.failed else None,
            latency_ms=ch.latency_ms if not ch.failed else None,
            winners=[s.winner for s in ch.stages],
            offloaded_stage_count=ch.offloaded_stage_count,
            n_stages=len(ch.spec.stages),
            energy_J=sum(s.energy_J for s in ch.stages),
            failed=ch.failed or ch.end_ms is None,
            fps_at_completion=fps,
        ))
    return out


def chain_success(c: ChainRecord, criteria: SuccessCriteria) -> bool:
    return (c.completed and c.fps_at_completion >= criteria.goal_for(c.pipeline) - 1e-12
            and c.latency_ms <= criteria.latency_budget_ms)


def success_rate(chains, criteria: SuccessCriteria) -> float:
    """Fraction of chains meeting both the goal FPS and the latency budget."""
    chains = list(chains)
    if not chains:
        raise ValueError("success_rate needs at least one chain")
    return sum(chain_success(c, criteria) for c in chains) / len(chains)


def success_by_host(chains, criteria: SuccessCriteria) -> dict:
    groups = {}
    for c in chains:
        groups.setdefault(c.host, []).append(c)
    return {h: success_rate(cs, criteria) for h, cs in sorted(groups.items())}


def offload_rate(chains) -> dict:
    """Per host: offloaded stages / stages executed for chains it published."""
    num, den = {}, {}
    for c in chains:
        num[c.host] = num.get(c.host, 0) + c.offloaded_stage_count
        den[c.host] = den.get(c.host, 0) + len(c.winners)
    if not any(den.values()):
        raise ValueError("offload_rate needs at least one stage")
    return {h: (num[h] / den[h] if den[h] else 0.0) for h in sorted(den)}


def offload_rate_from_records(records) -> dict:
    num, den = {}, {}
    for r in records:
        if r.failed:
            continue
        num[r.robot_id] = num.get(r.robot_id, 0) + (r.winner_id != r.robot_id)
        den[r.robot_id] = den.get(r.robot_id, 0) + 1
    return {h: num[h] / den[h] for h in sorted(den)}


def resource_summary(world, window=None) -> dict:
    """Per-robot cpu%, gpu%, energy (Wh) and SoC drop (%).

    ``window=None`` covers the whole run from the accumulated counters. An
    explicit (start_ms, end_ms) window assumes the robot was online throughout.
    """
    out = {}
    for r in world.robots:
        p = r.profile
        if window is None:
            span = r.online_ms
            busy = r.busy_ms
            energy_J = r.cum_energy
            soc_drop = p.initial_soc - r.soc
        else:
            a, b = window
            if not (0 <= a < b <= world.clock + 1e-9):
                raise ValueError("window outside the simulated history")
            span = b - a
            busy = r.busy_overlap(a, b)
            energy_J = (p.idle_power * (span - busy) + p.busy_power * busy) / 1000.0
            soc_drop = energy_J / (p.battery_capacity * 3600.0)
        frac = busy / span if span > 0 else 0.0
        out[p.name] = {
            "cpu": 100.0 * (CPU_BASE + CPU_BUSY * frac) if span > 0 else 0.0,
            "gpu": 100.0 * frac,
            "energy_Wh": energy_J / 3600.0,
            "soc_drop": 100.0 * soc_drop,
        }
    return out


# --- reports ------------------------------------------------------------------

CHAIN_COLUMNS = ["chain_id", "host", "pipeline", "latency_ms", "met_deadline", "met_fps_window", "success",
                 "offloaded_stages", "n_stages", "energy_J"]
ROBOT_COLUMNS = ["robot", "role", "success_rate", "offload_rate", "chains", "CPU (%)", "GPU (%)", "Energy (Wh)",
                 "SoC drop (%)"]


@dataclass
class RunResult:
    scenario: str
    scheduler: str
    seed: int
    config_hash: str
    chains: list
    resources: dict
    robots: list  # RobotProfile per slot
    criteria: SuccessCriteria = field(default_factory=SuccessCriteria)
    dropped_frames: dict = field(default_factory=dict)

    def host_success(self) -> dict:
        return success_by_host(self.chains, self.criteria) if self.chains else {}

    def host_offload(self) -> dict:
        return offload_rate(self.chains) if self.chains else {}

    def summary(self) -> dict:
        succ = self.host_success()
        off = self.host_offload()
        per_robot = {}
        for p in self.robots:
            res = self.resources[p.name]
            per_robot[p.name] = {
                "success_rate": succ.get(p.robot_id),
                "offload_rate": off.get(p.robot_id),
                "chains": sum(1 for c in self.chains if c.host == p.robot_id),
                "cpu": res["cpu"],
                "gpu": res["gpu"],
                "energy_Wh": res["energy_Wh"],
                "soc_drop": res["soc_drop"],
            }
        hosts = [v for v in succ.values()]
        return {
            "scenario": self.scenario,
            "scheduler": self.scheduler,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": VERSION,
            "chains": len(self.chains),
            "success_rate": float(np.mean(hosts)) if hosts else 0.0,
            "energy_Wh": sum(v["energy_Wh"] for v in per_robot.values()),
            "soc_drop": float(np.mean([v["soc_drop"] for v in per_robot.values()])),
            "offload_rate": float(np.mean(list(off.values()))) if off else 0.0,
            "chain_energy_J": sum(c.energy_J for c in self.chains),
            "robots": per_robot,
        }


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(round(x, 6))
    return str(x)


def chain_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CHAIN_COLUMNS)
    crit = result.criteria
    for c in result.chains:
        met_deadline = c.completed and c.latency_ms <= crit.latency_budget_ms
        met_fps = c.completed and c.fps_at_completion >= crit.goal_for(c.pipeline) - 1e-12
        w.writerow([_fmt(v) for v in (c.chain_id, c.host, c.pipeline, c.latency_ms, met_deadline, met_fps,
                                      chain_success(c, crit), c.offloaded_stage_count, c.n_stages, c.energy_J)])
    return buf.getvalue()


def robot_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROBOT_COLUMNS)
    s = result.summary()
    for p in result.robots:
        r = s["robots"][p.name]
        w.writerow([_fmt(v) for v in (p.name, "host" if p.is_host else "executor", r["success_rate"], r["offload_rate"],
                                      r["chains"], r["cpu"], r["gpu"], r["energy_Wh"], r["soc_drop"])])
    return buf.getvalue()


def emit_report(result: RunResult, out_dir=None) -> dict:
    """Per-chain CSV, per-robot CSV and a JSON manifest; written to ``out_dir`` when given."""
    chains = chain_csv(result)
    robots = robot_csv(result)
    manifest = json.dumps(result.summary(), indent=2, sort_keys=True)
    if out_dir is not None:
        from pathlib import Path

        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{result.scenario}_{result.scheduler}_seed{result.seed}"
        (d / f"{stem}_chains.csv").write_text(chains)
        (d / f"{stem}_robots.csv").write_text(robots)
        (d / f"{stem}.json").write_text(manifest + "\n")
    return {"chains_csv": chains, "robots_csv": robots, "manifest": manifest}


def aggregate(results) -> dict:
    """mean and sd across seeds of the headline metrics, overall and per robot."""
    results = list(results)
    keys = ["success_rate", "energy_Wh", "soc_drop", "offload_rate"]
    summaries = [r.summary() for r in results]
    agg = {"scenario": results[0].scenario, "scheduler": results[0].scheduler,
           "seeds": [r.seed for r in results], "config_hash": results[0].config_hash}
    for k in keys:
        vals = np.array([s[k] for s in summaries], dtype=float)
        agg[k] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    per_robot = {}
    for name in summaries[0]["robots"]:
        entry = {}
        for k in ("success_rate", "offload_rate", "cpu", "gpu", "energy_Wh", "soc_drop"):
            vals = [s["robots"][name][k] for s in summaries if s["robots"][name][k] is not None]
            if vals:
                entry[k] = {"mean": float(np.mean(vals)), "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
        per_robot[name] = entry
    agg["robots"] = per_robot
    return agg
