"""Domain types shared across the scheduler, plus observation construction."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

STAGE_KINDS = ("samA", "samB", "samC", "clipA", "clipB", "clipC", "extra")
STAGE_INDEX = {k: i for i, k in enumerate(STAGE_KINDS)}

MODES = ("local", "offload", "accept")
CAPACITIES = (1, 2, 4)

A_MIN = 0.0
A_MAX = 400.0


@dataclass(frozen=True)
class RobotProfile:
    robot_id: int
    name: str
    compute_throughput: float  # GFLOP/s
    gpu_mem: float  # MB
    battery_capacity: float  # Wh
    idle_power: float  # W
    busy_power: float  # W
    is_host: bool = True
    rssi: float = -55.0  # dBm
    initial_soc: float = 1.0

    def __post_init__(self):
        if self.compute_throughput <= 0:
            raise ValueError(f"{self.name}: compute_throughput must be > 0")
        if self.battery_capacity <= 0:
            raise ValueError(f"{self.name}: battery_capacity must be > 0")
        if not (self.busy_power >= self.idle_power >= 0):
            raise ValueError(f"{self.name}: need busy_power >= idle_power >= 0")
        if not 0.0 <= self.initial_soc <= 1.0:
            raise ValueError(f"{self.name}: initial_soc outside [0, 1]")


@dataclass(frozen=True)
class ResourceTelemetry:
    battery_horizon: float  # s
    soc: float
    power: float  # W
    temp: float  # degC
    cpu: float
    gpu: float
    ram: float
    queue: int

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc {self.soc} outside [0, 1]")
        for name in ("cpu", "gpu", "ram"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if self.queue < 0 or self.battery_horizon < 0:
            raise ValueError("queue and battery_horizon must be non-negative")


def battery_horizon(soc: float, capacity_wh: float, power: float, idle_power: float) -> float:
    """Remaining runtime in seconds at the current draw."""
    draw = max(power, idle_power)
    if draw <= 0:
        return 0.0
    return soc * capacity_wh * 3600.0 / draw


@dataclass(frozen=True)
class NetworkTelemetry:
    rssi: float
    rtt: dict  # peer robot_id -> ms; missing key means unreachable

    def __post_init__(self):
        for peer, v in self.rtt.items():
            if v < 0:
                raise ValueError(f"negative rtt to peer {peer}")


@dataclass(frozen=True)
class StageContext:
    stage_kind: str
    deadline_ms: float
    tensor_bytes: float
    flops: float = 0.0  # GFLOP, nominal cost used by the simulator

    def __post_init__(self):
        if self.stage_kind not in STAGE_INDEX:
            raise ValueError(f"unknown stage_kind {self.stage_kind!r}; expected one of {STAGE_KINDS}")
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be > 0")
        if self.tensor_bytes < 0:
            raise ValueError("tensor_bytes must be >= 0")

    @property
    def stage_onehot(self) -> np.ndarray:
        v = np.zeros(len(STAGE_KINDS))
        v[STAGE_INDEX[self.stage_kind]] = 1.0
        return v


@dataclass(frozen=True)
class ChainSpec:
    chain_id: str
    host_id: int
    stages: tuple
    goal_fps: float
    latency_budget_ms: float
    pipeline: str = "full"

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("a chain needs at least one stage")
        total = sum(s.deadline_ms for s in self.stages)
        if total > self.latency_budget_ms * (1 + 1e-9):
            raise ValueError("stage deadlines exceed the chain latency budget")


@dataclass(frozen=True)
class RewardWeights:
    lambda_D: float = 5.0
    lambda_E: float = 0.001
    w_slack: float = 0.5
    w_rtt: float = 0.2
    w_proc: float = 0.2
    w_xfer: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"reward weight {k} must be >= 0")


# --- normalization -------------------------------------------------------

TELEMETRY_FEATURES = ("battery_horizon", "soc", "power", "temp", "cpu", "gpu", "ram", "queue")
NETWORK_FEATURES = ("rssi", "rtt_min", "rtt_mean", "rtt_host")
CONTEXT_FEATURES = ("deadline_ms", "tensor_bytes")

DEFAULT_SCALES = {
    # name: (offset, gain); normalized = (x - offset) * gain
    "battery_horizon": (20000.0, 1 / 20000.0),
    "soc": (0.5, 2.0),
    "power": (125.0, 1 / 125.0),
    "temp": (50.0, 1 / 30.0),
    "cpu": (0.5, 2.0),
    "gpu": (0.5, 2.0),
    "ram": (0.5, 2.0),
    "queue": (4.0, 0.25),
    "rssi": (-60.0, 1 / 30.0),
    "rtt": (100.0, 0.01),
    "deadline_ms": (500.0, 0.002),
    "tensor_bytes": (1.0e6, 1.0e-6),
}


@dataclass(frozen=True)
class FeatureScales:
    scales: dict = field(default_factory=lambda: dict(DEFAULT_SCALES))

    def __post_init__(self):
        for name, (_, gain) in self.scales.items():
            if gain == 0:
                raise ValueError(f"zero gain for feature {name}")

    def _get(self, name):
        key = name if name in self.scales else ("rtt" if name.startswith("rtt") else name)
        if key not in self.scales:
            raise KeyError(f"no normalization scale for feature {name!r}")
        return self.scales[key]

    def normalize(self, name: str, x: float) -> float:
        offset, gain = self._get(name)
        return (x - offset) * gain

    def denormalize(self, name: str, z: float) -> float:
        offset, gain = self._get(name)
        return z / gain + offset


@dataclass(frozen=True)
class Observation:
    """One robot's local view at a stage auction.

    Raw telemetry is kept alongside the normalized feature vector so the
    heuristic bidder and the policy read the same sample.
    """

    telemetry: ResourceTelemetry
    rssi: float
    rtt_min: float
    rtt_mean: float
    rtt_host: float
    rtt_peers: tuple  # per roster slot, ms; None when unreachable or self
    context: StageContext
    roster_slot: int
    n_slots: int
    features: np.ndarray = field(compare=False, repr=False)
    is_host: bool = False

    @property
    def robot_embed(self) -> np.ndarray:
        v = np.zeros(self.n_slots)
        v[self.roster_slot] = 1.0
        return v

    def to_dict(self) -> dict:
        return {
            "telemetry": asdict(self.telemetry),
            "network": {
                "rssi": self.rssi,
                "rtt": {str(i): r for i, r in enumerate(self.rtt_peers) if r is not None},
                "rtt_host": self.rtt_host,
            },
            "context": asdict(self.context),
            "roster_slot": self.roster_slot,
            "n_slots": self.n_slots,
            "is_host": self.is_host,
        }


def obs_width(n_slots: int) -> int:
    return len(TELEMETRY_FEATURES) + len(NETWORK_FEATURES) + n_slots + len(STAGE_KINDS) + len(CONTEXT_FEATURES) + n_slots


def build_observation(
    telemetry: ResourceTelemetry,
    network: NetworkTelemetry,
    context: StageContext,
    roster_slot: int,
    n_slots: int,
    scales: FeatureScales,
    rtt_host: Optional[float] = None,
    is_host: bool = False,
) -> Observation:
    """Assemble and normalize one robot's observation.

    ``network.rtt`` maps peer slot -> sampled RTT. ``rtt_host`` is the sample
    toward the chain host (0 when this robot is the host).
    """
    if context.stage_kind not in STAGE_INDEX:
        raise ValueError(f"unknown stage_kind {context.stage_kind!r}")
    if not 0 <= roster_slot < n_slots:
        raise ValueError(f"roster_slot {roster_slot} outside 0..{n_slots - 1}")
    peers = [network.rtt.get(i) if i != roster_slot else None for i in range(n_slots)]
    reachable = [r for r in peers if r is not None]
    rtt_min = min(reachable) if reachable else 0.0
    rtt_mean = sum(reachable) / len(reachable) if reachable else 0.0
    if rtt_host is None:
        rtt_host = 0.0

    f = [scales.normalize(name, float(getattr(telemetry, name))) for name in TELEMETRY_FEATURES]
    f += [
        scales.normalize("rssi", network.rssi),
        scales.normalize("rtt", rtt_min),
        scales.normalize("rtt", rtt_mean),
        scales.normalize("rtt", rtt_host),
    ]
    # unreachable peers (and self) read as "far"
    f += [scales.normalize("rtt", r) if r is not None else 1.0 for r in peers]
    f += list(context.stage_onehot)
    f += [scales.normalize("deadline_ms", context.deadline_ms), scales.normalize("tensor_bytes", context.tensor_bytes)]
    embed = [0.0] * n_slots
    embed[roster_slot] = 1.0
    f += embed
    return Observation(
        telemetry=telemetry,
        rssi=network.rssi,
        rtt_min=rtt_min,
        rtt_mean=rtt_mean,
        rtt_host=float(rtt_host),
        rtt_peers=tuple(peers),
        context=context,
        roster_slot=roster_slot,
        n_slots=n_slots,
        features=np.asarray(f, dtype=float),
        is_host=is_host,
    )


def observation_from_dict(d: dict, scales: FeatureScales) -> Observation:
    tel = ResourceTelemetry(**d["telemetry"])
    net = d["network"]
    network = NetworkTelemetry(rssi=net["rssi"], rtt={int(k): v for k, v in net["rtt"].items()})
    ctx = StageContext(**d["context"])
    return build_observation(tel, network, ctx, d["roster_slot"], d["n_slots"], scales,
                             rtt_host=net["rtt_host"], is_host=d.get("is_host", False))


def clip_bid(raw: float, a_min: float = A_MIN, a_max: float = A_MAX) -> float:
    if not a_min < a_max:
        raise ValueError("need a_min < a_max")
    if math.isnan(raw):
        raise ValueError("bid is NaN")
    return min(max(float(raw), a_min), a_max)


@dataclass(frozen=True)
class AvailabilityMask:
    available: tuple

    def __len__(self):
        return len(self.available)

    def __getitem__(self, i):
        return self.available[i]

    @property
    def any(self) -> bool:
        return any(self.available)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.available, dtype=bool)


@dataclass
class StageOutcome:
    proc_ms: float  # executor-side latency: queue wait plus service
    xfer_ms: float
    energy_J: float
    deadline_miss: bool
    rtt_ms: float = 0.0
    deadline_ms: float = 0.0
    failed: bool = False

    @property
    def slack_ms(self) -> float:
        return self.deadline_ms - (self.proc_ms + self.xfer_ms)


@dataclass
class RobotAction:
    """What one robot emitted at a stage auction."""

    bid: float
    mode: Optional[int] = None  # index into MODES; None when the head is not applicable
    target: Optional[int] = None
    capacity: Optional[int] = None  # index into CAPACITIES
    raw: Optional[float] = None  # pre-squash sample, kept for on-policy updates
    logp: Optional[float] = None


@dataclass
class TransitionRecord:
    t: int
    chain_id: str
    robot_id: int  # host of the chain; per-robot curves group on this tag
    time_ms: float
    observations: list  # Observation or None per roster slot
    mask: tuple
    actions: list  # RobotAction or None per roster slot
    winner_id: int
    reward: float
    penalized_reward: float
    slack_ms: float
    rtt_ms: float
    proc_ms: float
    xfer_ms: float
    energy_J: float
    deadline_miss: bool
    done: bool
    failed: bool = False
    fps: float = 0.0
    powers: list = field(default_factory=list)
    stage_kind: str = ""

    def __post_init__(self):
        if not (0 <= self.winner_id < len(self.mask)) or not self.mask[self.winner_id]:
            raise ValueError(f"winner {self.winner_id} is not an available slot")

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "chain_id": self.chain_id,
            "robot_id": self.robot_id,
            "time_ms": self.time_ms,
            "stage_kind": self.stage_kind,
            "observations": [o.to_dict() if o is not None else None for o in self.observations],
            "mask": list(self.mask),
            "actions": [asdict(a) if a is not None else None for a in self.actions],
            "winner_id": self.winner_id,
            "reward": self.reward,
            "penalized_reward": self.penalized_reward,
            "slack_ms": self.slack_ms,
            "rtt_ms": self.rtt_ms,
            "proc_ms": self.proc_ms,
            "xfer_ms": self.xfer_ms,
            "energy_J": self.energy_J,
            "deadline_miss": self.deadline_miss,
            "done": self.done,
            "failed": self.failed,
            "fps": self.fps,
            "powers": list(self.powers),
        }

    @classmethod
    def from_dict(cls, d: dict, scales: FeatureScales) -> "TransitionRecord":
        obs = [observation_from_dict(o, scales) if o is not None else None for o in d["observations"]]
        acts = [RobotAction(**a) if a is not None else None for a in d["actions"]]
        return cls(
            t=d["t"],
            chain_id=d["chain_id"],
            robot_id=d["robot_id"],
            time_ms=d["time_ms"],
            observations=obs,
            mask=tuple(bool(m) for m in d["mask"]),
            actions=acts,
            winner_id=d["winner_id"],
            reward=d["reward"],
            penalized_reward=d["penalized_reward"],
            slack_ms=d["slack_ms"],
            rtt_ms=d["rtt_ms"],
            proc_ms=d["proc_ms"],
            xfer_ms=d["xfer_ms"],
            energy_J=d["energy_J"],
            deadline_miss=d["deadline_miss"],
            done=d["done"],
            failed=d.get("failed", False),
            fps=d.get("fps", 0.0),
            powers=list(d.get("powers", [])),
            stage_kind=d.get("stage_kind", ""),
        )


def dumps_record(rec) -> str:
    d = rec.to_dict() if hasattr(rec, "to_dict") else rec
    return json.dumps(d, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records: Iterable) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def stack_features(observations: Sequence[Observation]) -> np.ndarray:
    return np.stack([o.features for o in observations])
