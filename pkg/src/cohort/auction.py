"""Stage-level auction: bid collection, masking, winner selection, heuristic bidder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    A_MAX,
    A_MIN,
    AvailabilityMask,
    Observation,
    RobotAction,
    StageContext,
    build_observation,
    clip_bid,
)

# heuristic cost coefficients: per queued stage, per unit (1 - soc), per ms RTT, per unit gpu / cpu load
K_QUEUE = 50.0
K_SOC = 100.0
K_RTT = 0.5
K_GPU = 80.0
K_CPU = 40.0

# bids below this keep (host) or accept (peer) the stage in the heuristic's discrete decisions
MODE_THRESHOLD = 100.0


class AuctionFailed(RuntimeError):
    pass


@dataclass
class BidSet:
    bids: list  # float per roster slot; None where masked
    mask: AvailabilityMask
    stage: StageContext
    host: int = 0
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)

    def __post_init__(self):
        for i, b in enumerate(self.bids):
            if self.mask[i] and not (A_MIN <= b <= A_MAX):
                raise ValueError(f"bid {b} of slot {i} outside [{A_MIN}, {A_MAX}]")


@dataclass(frozen=True)
class AuctionOutcome:
    winner_id: int
    winning_bid: float
    responded: frozenset


def select_winner(bid_set: BidSet) -> AuctionOutcome:
    """argmin over masked-in bids; ties go to the lowest robot id."""
    best, best_bid = None, math.inf
    responded = []
    for i, (b, ok) in enumerate(zip(bid_set.bids, bid_set.mask.available)):
        if not ok:
            continue
        responded.append(i)
        if b < best_bid:
            best, best_bid = i, b
    if best is None:
        raise AuctionFailed("no robot responded within the bid window")
    return AuctionOutcome(best, best_bid, frozenset(responded))


def heuristic_bid(obs: Observation) -> float:
    tel = obs.telemetry
    raw = K_QUEUE * tel.queue + K_SOC * (1.0 - tel.soc) + K_RTT * obs.rtt_host + K_GPU * tel.gpu + K_CPU * tel.cpu
    return clip_bid(raw)


def heuristic_action(obs: Observation, mask) -> RobotAction:
    """Heuristic bid plus the discrete decisions it implies from local state alone."""
    bid = heuristic_bid(obs)
    if obs.is_host:
        mode = 0 if bid < MODE_THRESHOLD else 1  # local / offload
    else:
        mode = 2 if bid < MODE_THRESHOLD else 0  # accept / local
    target = None
    if obs.is_host and mode == 1:
        peers = [(r, i) for i, r in enumerate(obs.rtt_peers) if r is not None and i != obs.roster_slot and mask[i]]
        if peers:
            target = min(peers)[1]
    q = obs.telemetry.queue
    capacity = 2 if q == 0 else (1 if q == 1 else 0)
    return RobotAction(bid=bid, mode=mode, target=target, capacity=capacity)


def heuristic_bidder(observations, mask):
    return [heuristic_action(o, mask) if o is not None else None for o in observations]


def collect_bids(world, stage: StageContext, host: int, bidder_fn: Callable, bid_window_ms: Optional[float] = None,
                 rng=None, t: Optional[float] = None) -> BidSet:
    """Solicit bids for ``stage`` published by ``host``.

    Robots that are offline, unreachable, or whose RTT sample to the host
    exceeds the bid window are masked out. The host answers with zero RTT.
    """
    rng = rng if rng is not None else world.rng_net
    window = world.sim.bid_window_ms if bid_window_ms is None else bid_window_ms
    t = world.clock if t is None else t
    n = world.n_slots
    avail = [False] * n
    rtt_host = [None] * n
    for i in range(n):
        if not world.robots[i].online:
            continue
        if i == host:
            rtt_host[i] = 0.0
            avail[i] = True
            continue
        if not world.reachable(i, host):
            continue
        r = world.links[i][host].sample_rtt(rng)
        if r <= window:
            rtt_host[i] = r
            avail[i] = True
    if not any(avail):
        raise AuctionFailed("all robots masked")
    mask = AvailabilityMask(tuple(avail))
    observations = [None] * n
    for i in range(n):
        if avail[i]:
            observations[i] = build_observation(
                world.telemetry(i, t), world.network(i, rng), stage, i, n, world.scales,
                rtt_host=rtt_host[i], is_host=(i == host),
            )
    actions = bidder_fn(observations, mask)
    bids = [None] * n
    for i in range(n):
        if avail[i]:
            actions[i].bid = clip_bid(actions[i].bid)
            bids[i] = actions[i].bid
    return BidSet(bids=bids, mask=mask, stage=stage, host=host, observations=observations, actions=actions)
