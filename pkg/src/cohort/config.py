"""Scenario configuration: the experiment contract shared by every command."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from .core import DEFAULT_SCALES, STAGE_KINDS, ChainSpec, FeatureScales, RewardWeights, RobotProfile, StageContext


class ConfigError(ValueError):
    pass


@dataclass
class LinkConfig:
    a: int
    b: int
    base_rtt: float = 16.0  # ms
    jitter_sd: float = 3.0  # ms
    bandwidth: float = 20000.0  # bytes per ms
    rssi: float = -55.0
    up: bool = True


@dataclass
class StageCost:
    kind: str
    flops: float  # GFLOP
    tensor_bytes: float


@dataclass
class Workload:
    host: int
    stages: list
    goal_fps: float = 2.0
    latency_budget_ms: float = 1800.0
    frame_rate: float = 2.5  # camera frames per second offered to the pipeline
    max_inflight: int = 3
    pipeline: str = "full"


@dataclass
class EventConfig:
    time_s: float
    kind: str  # "join" | "leave"
    robot: int


@dataclass
class SimParams:
    contention: float = 0.1  # c_q
    proc_noise_sd: float = 0.3
    bid_window_ms: float = 200.0
    fps_window_s: float = 5.0
    util_window_s: float = 2.0
    temp_window_s: float = 30.0
    ga_planning_ms: float = 50.0
    max_robots: int = 4


@dataclass
class TrainingHyperparams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo_clip: float = 0.2
    epochs_per_update: int = 2
    batch_chains: int = 32
    lr: float = 3e-4
    awr_beta: float = 1.0
    dual_lr: float = 0.01
    entropy_coef: float = 0.01
    minibatch: int = 64
    bc_epochs: int = 60
    bc_batch: int = 256
    critic_epochs: int = 30
    awr_epochs: int = 30
    phase_c_updates: int = 50
    phase_c_init_log_sd: float = -1.0
    bc_lr: float = 3e-3

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.ppo_clip <= 0 or self.awr_beta <= 0:
            raise ConfigError("ppo_clip and awr_beta must be > 0")


@dataclass
class DualLimits:
    power_frac: float = 0.8  # power limit = power_frac * busy_power
    miss_rate: float = 0.2


@dataclass
class ScenarioConfig:
    name: str
    roster: list
    links: list
    stage_catalog: list
    workloads: list
    reward: RewardWeights = field(default_factory=RewardWeights)
    training: TrainingHyperparams = field(default_factory=TrainingHyperparams)
    duals: DualLimits = field(default_factory=DualLimits)
    sim: SimParams = field(default_factory=SimParams)
    scales: dict = field(default_factory=lambda: dict(DEFAULT_SCALES))
    horizon_s: float = 120.0
    seed: int = 0
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------
    def validate(self):
        if not self.roster:
            raise ConfigError("roster is empty")
        if self.horizon_s < 0:
            raise ConfigError("horizon_s must be >= 0")
        ids = [p.robot_id for p in self.roster]
        if ids != list(range(len(ids))):
            raise ConfigError("robot ids must be 0..N-1 in roster order")
        if len(ids) > self.sim.max_robots:
            raise ConfigError(f"roster has {len(ids)} robots, max_robots is {self.sim.max_robots}")
        kinds = {s.kind for s in self.stage_catalog}
        for s in self.stage_catalog:
            if s.kind not in STAGE_KINDS:
                raise ConfigError(f"unknown stage kind {s.kind!r}")
            if s.flops <= 0 or s.tensor_bytes < 0:
                raise ConfigError(f"stage {s.kind}: flops must be > 0 and tensor_bytes >= 0")
        for link in self.links:
            for end in (link.a, link.b):
                if end not in ids:
                    raise ConfigError(f"link references unknown robot {end}")
            if link.up and link.bandwidth <= 0:
                raise ConfigError("link bandwidth must be > 0")
        for w in self.workloads:
            if w.host not in ids:
                raise ConfigError(f"workload references unknown robot {w.host}")
            if not self.roster[w.host].is_host:
                raise ConfigError(f"robot {w.host} is executor-only and cannot publish workloads")
            for k in w.stages:
                if k not in kinds:
                    raise ConfigError(f"workload stage {k!r} missing from stage_catalog")
            if w.goal_fps <= 0 or w.latency_budget_ms <= 0 or w.frame_rate <= 0 or w.max_inflight < 1:
                raise ConfigError("workload targets must be positive")
        for e in self.events:
            if e.kind not in ("join", "leave"):
                raise ConfigError(f"unknown event kind {e.kind!r}")
            if e.robot not in ids:
                raise ConfigError(f"event references unknown robot {e.robot}")
        FeatureScales(self.scales)

    # -- derived ---------------------------------------------------------
    @property
    def n_slots(self) -> int:
        return len(self.roster)

    @property
    def feature_scales(self) -> FeatureScales:
        return FeatureScales(dict(self.scales))

    def stage_cost(self, kind) -> StageCost:
        for s in self.stage_catalog:
            if s.kind == kind:
                return s
        raise ConfigError(f"stage {kind!r} not in catalog")

    def chain_stages(self, workload: Workload) -> tuple:
        """Stage contexts with the latency budget split by nominal FLOPs."""
        costs = [self.stage_cost(k) for k in workload.stages]
        total = sum(c.flops for c in costs)
        return tuple(
            StageContext(
                stage_kind=c.kind,
                deadline_ms=workload.latency_budget_ms * c.flops / total,
                tensor_bytes=c.tensor_bytes,
                flops=c.flops,
            )
            for c in costs
        )

    def chain_spec(self, workload: Workload, chain_id: str) -> ChainSpec:
        return ChainSpec(
            chain_id=chain_id,
            host_id=workload.host,
            stages=self.chain_stages(workload),
            goal_fps=workload.goal_fps,
            latency_budget_ms=workload.latency_budget_ms,
            pipeline=workload.pipeline,
        )

    def link(self, a, b) -> Optional[LinkConfig]:
        for link in self.links:
            if {link.a, link.b} == {a, b}:
                return link
        return None

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "seed": self.seed,
            "horizon_s": self.horizon_s,
            "roster": [asdict(p) for p in self.roster],
            "links": [asdict(x) for x in self.links],
            "stage_catalog": [asdict(s) for s in self.stage_catalog],
            "workloads": [asdict(w) for w in self.workloads],
            "events": [asdict(e) for e in self.events],
            "reward": asdict(self.reward),
            "training": asdict(self.training),
            "duals": asdict(self.duals),
            "sim": asdict(self.sim),
            "scales": {k: list(v) for k, v in self.scales.items()},
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            return cls(
                name=d["name"],
                seed=int(d.get("seed", 0)),
                horizon_s=float(d.get("horizon_s", 120.0)),
                roster=[RobotProfile(**p) for p in d["roster"]],
                links=[LinkConfig(**x) for x in d.get("links", [])],
                stage_catalog=[StageCost(**s) for s in d["stage_catalog"]],
                workloads=[Workload(**w) for w in d.get("workloads", [])],
                events=[EventConfig(**e) for e in d.get("events", [])],
                reward=RewardWeights(**d.get("reward", {})),
                training=TrainingHyperparams(**d.get("training", {})),
                duals=DualLimits(**d.get("duals", {})),
                sim=SimParams(**d.get("sim", {})),
                scales={k: tuple(v) for k, v in d.get("scales", DEFAULT_SCALES).items()},
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.loads(Path(path).read_text())

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ScenarioConfig":
        d = copy.deepcopy(self.to_dict())
        d.update(kw)
        return ScenarioConfig.from_dict(d)


# --- scenario templates ---------------------------------------------

HUSKY = RobotProfile(0, "husky", compute_throughput=1250.0, gpu_mem=24576, battery_capacity=800.0,
                     idle_power=90.0, busy_power=180.0, is_host=True, rssi=-50.0)
JACKAL = RobotProfile(1, "jackal", compute_throughput=320.0, gpu_mem=4096, battery_capacity=150.0,
                      idle_power=15.0, busy_power=40.0, is_host=True, rssi=-58.0)
SPOT = RobotProfile(2, "spot", compute_throughput=450.0, gpu_mem=32768, battery_capacity=320.0,
                    idle_power=120.0, busy_power=200.0, is_host=True, rssi=-62.0)
LINUX = RobotProfile(3, "linux", compute_throughput=1000.0, gpu_mem=8192, battery_capacity=99.0,
                     idle_power=25.0, busy_power=140.0, is_host=False, rssi=-52.0)

STAGE_CATALOG = [
    StageCost("samA", 60.0, 300_000),
    StageCost("samB", 100.0, 250_000),
    StageCost("samC", 40.0, 200_000),
    StageCost("clipA", 10.0, 50_000),
    StageCost("clipB", 25.0, 250_000),
    StageCost("clipC", 15.0, 150_000),
    StageCost("extra", 30.0, 300_000),
]

SIX_STAGES = ["samA", "samB", "samC", "clipA", "clipB", "clipC"]

_LINK_RTT = {(0, 1): 15.0, (0, 2): 18.0, (1, 2): 20.0, (0, 3): 14.0, (1, 3): 16.0, (2, 3): 19.0}


def _links(ids):
    out = []
    for (a, b), rtt in _LINK_RTT.items():
        if a in ids and b in ids:
            out.append(LinkConfig(a, b, base_rtt=rtt, jitter_sd=3.0, bandwidth=20000.0, rssi=-55.0))
    return out


def scenario(template: str, seed: int = 0, horizon_s: float = 120.0) -> ScenarioConfig:
    """Build one of the named scenarios: default3, executor4, failure2, extratask."""
    if template not in TEMPLATES:
        raise ConfigError(f"unknown scenario template {template!r}; choose from {sorted(TEMPLATES)}")
    hosts = [HUSKY, JACKAL, SPOT]
    roster = list(hosts)
    stages = list(SIX_STAGES)
    events = []
    if template == "executor4":
        roster.append(LINUX)
    if template == "failure2":
        events.append(EventConfig(0.0, "leave", SPOT.robot_id))
    if template == "extratask":
        stages.append("extra")
    workloads = [Workload(host=h.robot_id, stages=list(stages)) for h in hosts]
    ids = [p.robot_id for p in roster]
    return ScenarioConfig(
        name=template,
        roster=roster,
        links=_links(ids),
        stage_catalog=list(STAGE_CATALOG),
        workloads=workloads,
        events=events,
        horizon_s=horizon_s,
        seed=seed,
    )


TEMPLATES = ("default3", "executor4", "failure2", "extratask")
