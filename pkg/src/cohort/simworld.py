"""Deterministic discrete-event simulation of robots executing perception chains."""
from __future__ import annotations

import bisect
import enum
import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import LinkConfig, ScenarioConfig
from .core import (
    ChainSpec,
    NetworkTelemetry,
    ResourceTelemetry,
    RobotProfile,
    StageContext,
    StageOutcome,
    TransitionRecord,
    battery_horizon,
)

log = logging.getLogger(__name__)

# cpu load = CPU_BASE + CPU_BUSY * busy fraction; gpu load = busy fraction
CPU_BASE = 0.1
CPU_BUSY = 0.5


class SimError(RuntimeError):
    pass


class RobotOffline(SimError):
    pass


class LinkDown(SimError):
    pass


class EventKind(enum.IntEnum):
    # declaration order is the tie-break order
    chain_arrival = 0
    stage_start = 1
    stage_done = 2
    transfer_done = 3
    device_join = 4
    device_leave = 5


@dataclass(order=True)
class SimEvent:
    time: float
    kind: EventKind
    robot_id: int
    seq: int = 0
    payload: object = field(default=None, compare=False)


@dataclass
class NetworkLink:
    base_rtt: float
    jitter_sd: float
    bandwidth: float  # bytes per ms
    rssi: float
    up: bool = True

    @classmethod
    def from_config(cls, c: LinkConfig):
        return cls(c.base_rtt, c.jitter_sd, c.bandwidth, c.rssi, c.up)

    def sample_rtt(self, rng) -> float:
        if self.jitter_sd <= 0:
            return self.base_rtt
        return max(0.0, self.base_rtt + self.jitter_sd * rng.standard_normal())


@dataclass
class PendingStage:
    chain: "ChainRun"
    index: int
    stage: StageContext
    winner: int
    t_decision: float
    start: float
    end: float
    proc_ms: float
    xfer_ms: float
    rtt_ms: float
    decision: object = None
    energy_J: float = 0.0
    failed: bool = False
    done: bool = False


@dataclass
class ChainRun:
    spec: ChainSpec
    created_ms: float
    next_index: int = 0
    end_ms: Optional[float] = None
    failed: bool = False
    plan: Optional[list] = None
    stages: list = field(default_factory=list)  # PendingStage per executed stage
    records: list = field(default_factory=list)

    @property
    def host(self):
        return self.spec.host_id

    @property
    def latency_ms(self):
        return None if self.end_ms is None else self.end_ms - self.created_ms

    @property
    def offloaded_stage_count(self):
        return sum(1 for s in self.stages if s.winner != self.host)


class RobotState:
    def __init__(self, profile: RobotProfile, online: bool = True, t0: float = 0.0):
        self.profile = profile
        self.online = online
        self.queue: list = []
        # reserved busy intervals, non-overlapping and ascending
        self.starts: list = []
        self.ends: list = []
        self.owners: list = []
        self._prefix: list = [0.0]  # _prefix[k] = total duration of the first k intervals
        self.busy_until = 0.0
        self.cum_energy = 0.0
        self.stage_energy = 0.0  # energy of all completed or aborted stage work
        self.idle_energy = 0.0
        self.busy_ms = 0.0
        self.online_ms = 0.0
        self.accounted_until = t0
        self.soc = profile.initial_soc

    @property
    def slot(self):
        return self.profile.robot_id

    def reserve(self, start: float, end: float, owner=None):
        if self.ends and start < self.ends[-1] - 1e-9:
            raise SimError("overlapping reservation")
        self.starts.append(start)
        self.ends.append(end)
        self.owners.append(owner)
        self._prefix.append(self._prefix[-1] + (end - start))
        self.busy_until = end

    def truncate(self, t: float):
        """Drop reserved work after ``t``; returns the affected owners with the ms they ran."""
        hit = []
        while self.ends and self.ends[-1] > t:
            s, owner = self.starts.pop(), self.owners.pop()
            self.ends.pop()
            self._prefix.pop()
            ran = max(0.0, t - s)
            hit.append((owner, ran))
            if ran > 0:
                self.starts.append(s)
                self.ends.append(t)
                self.owners.append(owner)
                self._prefix.append(self._prefix[-1] + ran)
                break
        self.busy_until = min(self.busy_until, t)
        return hit

    def busy_before(self, x: float) -> float:
        i = bisect.bisect_right(self.starts, x)
        if i == 0:
            return 0.0
        return self._prefix[i - 1] + min(self.ends[i - 1], x) - self.starts[i - 1]

    def busy_overlap(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        return self.busy_before(b) - self.busy_before(a)

    def advance(self, t: float):
        """Integrate energy up to ``t`` while online."""
        a = self.accounted_until
        if t <= a:
            return
        if self.online:
            dt = t - a
            busy = self.busy_overlap(a, t)
            e_busy = self.profile.busy_power * busy / 1000.0
            e_idle = self.profile.idle_power * (dt - busy) / 1000.0
            self.cum_energy += e_busy + e_idle
            self.soc -= (e_busy + e_idle) / (self.profile.battery_capacity * 3600.0)
            self.idle_energy += e_idle
            self.busy_ms += busy
            self.online_ms += dt
        self.accounted_until = t

    def is_busy(self, t: float) -> bool:
        i = bisect.bisect_right(self.starts, t) - 1
        return i >= 0 and t < self.ends[i]

    def mean_power(self, a: float, b: float) -> float:
        if not self.online or b <= a:
            return 0.0
        frac = self.busy_overlap(a, b) / (b - a)
        p = self.profile
        return p.idle_power + (p.busy_power - p.idle_power) * frac


def sample_proc_time(robot: RobotState, stage: StageContext, rng, contention: float = 0.1,
                     noise_sd: float = 0.1, queue_len: Optional[int] = None) -> float:
    """Processing time in ms: FLOPs / throughput, inflated by queue contention, lognormal noise."""
    if not robot.online:
        raise RobotOffline(f"robot {robot.profile.name} is offline")
    q = len(robot.queue) if queue_len is None else queue_len
    base = stage.flops / robot.profile.compute_throughput * 1000.0
    noise = math.exp(noise_sd * rng.standard_normal()) if noise_sd > 0 else 1.0
    return base * (1.0 + contention * q) * noise


def sample_transfer_time(payload: float, link: NetworkLink, rng) -> tuple:
    """Returns (xfer_ms, rtt_ms); xfer = payload / bandwidth + sampled RTT."""
    if link is None or not link.up:
        raise LinkDown("peer unreachable")
    rtt = link.sample_rtt(rng)
    return payload / link.bandwidth + rtt, rtt


@dataclass
class Decision:
    winner: int
    mask: tuple
    observations: list = None
    actions: list = None
    auction_failed: bool = False


class LocalOnly:
    """Fallback scheduler that keeps every stage on its host."""

    name = "baseline"

    def on_chain_start(self, world, chain, t):
        return 0.0

    def decide(self, world, chain, index, t):
        mask = tuple(r.online for r in world.robots)
        return Decision(winner=chain.host, mask=mask)


class World:
    def __init__(self, cfg: ScenarioConfig, seed: int = 0, scheduler=None, reward_fn=None,
                 keep_history: bool = False):
        self.cfg = cfg
        self.seed = seed
        ss = np.random.SeedSequence([int(cfg.seed), int(seed)])
        s_proc, s_net, s_arr, s_sched = ss.spawn(4)
        self.rng_proc = np.random.default_rng(s_proc)
        self.rng_net = np.random.default_rng(s_net)
        self.rng_arrival = np.random.default_rng(s_arr)
        self.rng_sched = np.random.default_rng(s_sched)
        self.scheduler = scheduler if scheduler is not None else LocalOnly()
        self.reward_fn = reward_fn
        self.scales = cfg.feature_scales
        self.n_slots = cfg.n_slots
        self.sim = cfg.sim
        self.robots = [RobotState(p) for p in cfg.roster]
        n = self.n_slots
        self.links = [[None] * n for _ in range(n)]
        for lc in cfg.links:
            link = NetworkLink.from_config(lc)
            self.links[lc.a][lc.b] = link
            self.links[lc.b][lc.a] = link
        self.clock = 0.0
        self.horizon_ms = cfg.horizon_s * 1000.0
        self._events: list = []
        self._seq = 0
        self.inflight = {w.host: [] for w in cfg.workloads}
        self.completions = {w.host: deque() for w in cfg.workloads}
        self.chains: list = []
        self.records: list = []
        self.event_counts = {k: 0 for k in EventKind}
        self.dropped_frames = {w.host: 0 for w in cfg.workloads}
        self.duals = None
        self.keep_history = keep_history
        self.history = []  # (time, slot, soc, cum_energy) snapshots when keep_history
        self.finished = False
        self._chain_counter = 0
        for w_i, w in enumerate(cfg.workloads):
            phase = self.rng_arrival.random() * 1000.0 / w.frame_rate
            if phase < self.horizon_ms:
                self.push(SimEvent(phase, EventKind.chain_arrival, w.host, payload=w_i))
        for e in cfg.events:
            kind = EventKind.device_join if e.kind == "join" else EventKind.device_leave
            self.push(SimEvent(e.time_s * 1000.0, kind, e.robot))
            if e.kind == "join":
                # joiners start offline until their event fires
                self.robots[e.robot].online = False

    # -- event queue -----------------------------------------------------------
    def push(self, ev: SimEvent):
        ev.seq = self._seq
        self._seq += 1
        heapq.heappush(self._events, ev)

    def peek_time(self):
        return self._events[0].time if self._events else None

    # -- telemetry ---------------------------------------------------------------
    def link(self, a, b) -> Optional[NetworkLink]:
        if a == b:
            return None
        return self.links[a][b]

    def reachable(self, a, b) -> bool:
        if a == b:
            return self.robots[a].online
        link = self.links[a][b]
        return link is not None and link.up and self.robots[a].online and self.robots[b].online

    def telemetry(self, slot: int, t: float) -> ResourceTelemetry:
        r = self.robots[slot]
        p = r.profile
        w_u = self.sim.util_window_s * 1000.0
        w_t = self.sim.temp_window_s * 1000.0
        util = r.busy_overlap(t - w_u, t) / w_u
        util_long = r.busy_overlap(t - w_t, t) / w_t
        q = len(r.queue)
        power = p.busy_power if r.is_busy(t) else p.idle_power
        soc = min(1.0, max(0.0, r.soc))
        return ResourceTelemetry(
            battery_horizon=battery_horizon(soc, p.battery_capacity, power, p.idle_power),
            soc=soc,
            power=power,
            temp=35.0 + 35.0 * util_long,
            cpu=min(1.0, CPU_BASE + CPU_BUSY * util),
            gpu=min(1.0, util),
            ram=min(1.0, 0.3 + 0.08 * min(q, 8)),
            queue=q,
        )

    def network(self, slot: int, rng=None) -> NetworkTelemetry:
        rng = rng if rng is not None else self.rng_net
        rtt = {}
        for j in range(self.n_slots):
            if j != slot and self.reachable(slot, j):
                rtt[j] = self.links[slot][j].sample_rtt(rng)
        rssi_vals = [self.links[slot][j].rssi for j in rtt]
        rssi = self.robots[slot].profile.rssi if not rssi_vals else 0.5 * (self.robots[slot].profile.rssi + float(np.mean(rssi_vals)))
        return NetworkTelemetry(rssi=rssi, rtt=rtt)

    def host_fps(self, host: int, t: float) -> float:
        window = self.sim.fps_window_s * 1000.0
        dq = self.completions.get(host)
        if not dq:
            return 0.0
        while dq and dq[0] <= t - window:
            dq.popleft()
        return len(dq) / self.sim.fps_window_s

    # -- dynamics ----------------------------------------------------------------
    def _advance_all(self, t):
        for r in self.robots:
            r.advance(t)

    def step(self, ev: SimEvent):
        """Process one event; returns (new events, emitted records)."""
        if ev.time < self.clock - 1e-9:
            raise SimError("event earlier than the clock")
        self.clock = ev.time
        self._advance_all(ev.time)
        self.event_counts[ev.kind] += 1
        n_before = len(self.records)
        new = []
        if ev.kind == EventKind.chain_arrival:
            new = self._on_arrival(ev)
        elif ev.kind == EventKind.stage_done:
            new = self._on_stage_done(ev)
        elif ev.kind == EventKind.device_leave:
            new = self._on_leave(ev)
        elif ev.kind == EventKind.device_join:
            self.robots[ev.robot_id].online = True
            self.robots[ev.robot_id].accounted_until = ev.time
        if self.keep_history:
            for r in self.robots:
                self.history.append((ev.time, r.slot, r.soc, r.cum_energy))
        for e in new:
            self.push(e)
        return new, self.records[n_before:]

    def run(self):
        while self._events:
            ev = heapq.heappop(self._events)
            self.step(ev)
        self.finish()
        return self

    def finish(self):
        t_end = max(self.clock, self.horizon_ms)
        self.clock = t_end
        self._advance_all(t_end)
        self.finished = True

    def _on_arrival(self, ev):
        if isinstance(ev.payload, ChainRun):
            # planning finished for a chain admitted earlier
            chain = ev.payload
            if chain.failed or not self.robots[chain.host].online:
                return []
            return self._dispatch(chain, ev.time)
        w_i = ev.payload
        w = self.cfg.workloads[w_i]
        out = []
        nxt = ev.time + 1000.0 / w.frame_rate
        if nxt < self.horizon_ms:
            out.append(SimEvent(nxt, EventKind.chain_arrival, w.host, payload=w_i))
        host = self.robots[w.host]
        if not host.online:
            return out
        if len(self.inflight[w.host]) >= w.max_inflight:
            self.dropped_frames[w.host] += 1
            return out
        chain_id = f"{w.host}-{self._chain_counter}"
        self._chain_counter += 1
        chain = ChainRun(spec=self.cfg.chain_spec(w, chain_id), created_ms=ev.time)
        self.chains.append(chain)
        self.inflight[w.host].append(chain)
        delay = self.scheduler.on_chain_start(self, chain, ev.time) or 0.0
        if delay > 0:
            out.append(SimEvent(ev.time + delay, EventKind.chain_arrival, w.host, payload=chain))
        else:
            out.extend(self._dispatch(chain, ev.time))
        return out

    def _dispatch(self, chain: ChainRun, t: float):
        idx = chain.next_index
        stage = chain.spec.stages[idx]
        decision = self.scheduler.decide(self, chain, idx, t)
        winner = decision.winner
        if not self.robots[winner].online or (winner != chain.host and not self.reachable(chain.host, winner)):
            winner = chain.host
            decision.winner = winner
        ps = execute_stage(self, winner, chain, idx, t, decision)
        out = []
        if ps.xfer_ms > 0:
            out.append(SimEvent(t + ps.xfer_ms, EventKind.transfer_done, winner, payload=ps))
        out.append(SimEvent(ps.start, EventKind.stage_start, winner, payload=ps))
        out.append(SimEvent(ps.end, EventKind.stage_done, winner, payload=ps))
        return out

    def _on_stage_done(self, ev):
        ps: PendingStage = ev.payload
        if ps.failed or ps.done:
            return []
        ps.done = True
        robot = self.robots[ps.winner]
        robot.queue.remove(ps)
        ps.energy_J = robot.profile.busy_power * ps.proc_ms / 1000.0
        robot.stage_energy += ps.energy_J
        chain = ps.chain
        last = ps.index == len(chain.spec.stages) - 1
        if last and not chain.failed:
            chain.end_ms = ev.time
            self.completions[chain.host].append(ev.time)
            self._retire(chain)
        self._emit(ps, ev.time, done=last or chain.failed)
        if not last and not chain.failed:
            chain.next_index += 1
            return self._dispatch(chain, ev.time)
        return []

    def _retire(self, chain):
        lst = self.inflight.get(chain.host)
        if lst is not None and chain in lst:
            lst.remove(chain)

    def _on_leave(self, ev):
        slot = ev.robot_id
        robot = self.robots[slot]
        if not robot.online:
            return []
        t = ev.time
        robot.advance(t)
        for ps, ran in robot.truncate(t):
            if ps is not None and not ps.done:
                ps.failed = True
                ps.energy_J = robot.profile.busy_power * ran / 1000.0
                robot.stage_energy += ps.energy_J
        robot.online = False
        failed_stages = [ps for ps in robot.queue if ps.failed]
        robot.queue = [ps for ps in robot.queue if not ps.failed]
        for ps in failed_stages:
            ps.chain.failed = True
            self._retire(ps.chain)
            self._emit(ps, t, done=True, failed=True)
        # chains hosted by the departing robot cannot deliver results
        for chain in list(self.inflight.get(slot, [])):
            chain.failed = True
            self._retire(chain)
        return []

    def _emit(self, ps: PendingStage, t: float, done: bool, failed: bool = False):
        chain = ps.chain
        host = chain.host
        deadline = ps.stage.deadline_ms
        # the executor sees the request from its arrival to its result, queueing included
        proc = ps.proc_ms if failed else max(ps.proc_ms, ps.end - ps.t_decision - ps.xfer_ms)
        outcome = StageOutcome(
            proc_ms=proc,
            xfer_ms=ps.xfer_ms,
            energy_J=ps.energy_J,
            deadline_miss=(proc + ps.xfer_ms > deadline) or failed,
            rtt_ms=ps.rtt_ms,
            deadline_ms=deadline,
            failed=failed,
        )
        fps = self.host_fps(host, t)
        powers = [r.mean_power(ps.t_decision, t) if r.online else 0.0 for r in self.robots]
        reward, penalized = (0.0, 0.0)
        if self.reward_fn is not None:
            reward, penalized = self.reward_fn(outcome, fps, powers, self.duals)
        d = ps.decision
        mask = d.mask if d is not None else tuple(r.online for r in self.robots)
        if not mask[ps.winner]:
            mask = tuple(m or i == ps.winner for i, m in enumerate(mask))
        rec = TransitionRecord(
            t=ps.index,
            chain_id=chain.spec.chain_id,
            robot_id=host,
            time_ms=t,
            observations=list(d.observations) if d is not None and d.observations is not None else [None] * self.n_slots,
            mask=mask,
            actions=list(d.actions) if d is not None and d.actions is not None else [None] * self.n_slots,
            winner_id=ps.winner,
            reward=reward,
            penalized_reward=penalized,
            slack_ms=outcome.slack_ms,
            rtt_ms=outcome.rtt_ms,
            proc_ms=outcome.proc_ms,
            xfer_ms=outcome.xfer_ms,
            energy_J=outcome.energy_J,
            deadline_miss=outcome.deadline_miss,
            done=done,
            failed=failed,
            fps=fps,
            powers=powers,
            stage_kind=ps.stage.stage_kind,
        )
        chain.records.append(rec)
        self.records.append(rec)
        return rec


def execute_stage(world: World, winner_id: int, chain: ChainRun, index: int, t: float, decision=None) -> PendingStage:
    """Assign stage ``index`` of ``chain`` to ``winner_id`` at time ``t``.

    The stage's busy interval is reserved FIFO behind the winner's queue;
    energy and the deadline flag are settled when it completes.
    """
    robot = world.robots[winner_id]
    if not robot.online:
        raise RobotOffline(f"winner {robot.profile.name} is offline")
    stage = chain.spec.stages[index]
    host = chain.host
    if winner_id == host:
        xfer, rtt = 0.0, 0.0
    else:
        xfer, rtt = sample_transfer_time(stage.tensor_bytes, world.link(host, winner_id), world.rng_net)
    proc = sample_proc_time(robot, stage, world.rng_proc, world.sim.contention, world.sim.proc_noise_sd)
    start = max(t + xfer, robot.busy_until)
    end = start + proc
    ps = PendingStage(chain=chain, index=index, stage=stage, winner=winner_id, t_decision=t,
                      start=start, end=end, proc_ms=proc, xfer_ms=xfer, rtt_ms=rtt, decision=decision)
    robot.reserve(start, end, ps)
    robot.queue.append(ps)
    chain.stages.append(ps)
    return ps


def step_world(world: World, event: SimEvent):
    return world.step(event)


def run_world(cfg: ScenarioConfig, scheduler, seed: int = 0, reward_fn=None, keep_history=False) -> World:
    w = World(cfg, seed=seed, scheduler=scheduler, reward_fn=reward_fn, keep_history=keep_history)
    return w.run()


def conservation_errors(world: World) -> dict:
    """Per robot: relative energy-closure error and absolute SoC error.

    Energy closes when the integrated draw equals stage energy plus idle
    energy; SoC closes when its drop equals the integrated draw over capacity.
    """
    out = {}
    for r in world.robots:
        p = r.profile
        total = r.stage_energy + r.idle_energy
        e_rel = abs(r.cum_energy - total) / max(abs(r.cum_energy), 1e-12)
        soc_err = abs((p.initial_soc - r.soc) - r.cum_energy / (p.battery_capacity * 3600.0))
        out[p.name] = (e_rel, soc_err)
    return out
