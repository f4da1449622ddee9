"""Scheduler adapters that plug bidders and policies into the simulator."""
from __future__ import annotations

import numpy as np

from .auction import AuctionFailed, collect_bids, heuristic_bidder, select_winner
from .core import RobotAction
from .nn import Actor, squash
from .simworld import Decision, LocalOnly


class AuctionScheduler:
    """Every stage is auctioned; the bidder maps observations to RobotActions."""

    name = "auction"

    def __init__(self, bidder=heuristic_bidder, name=None):
        self.bidder = bidder
        if name:
            self.name = name

    def on_chain_start(self, world, chain, t):
        return 0.0

    def decide(self, world, chain, index, t):
        stage = chain.spec.stages[index]
        try:
            bs = collect_bids(world, stage, chain.host, self.bidder, rng=world.rng_net, t=t)
        except AuctionFailed:
            mask = tuple(i == chain.host for i in range(world.n_slots))
            return Decision(winner=chain.host, mask=mask, auction_failed=True)
        out = select_winner(bs)
        return Decision(winner=out.winner_id, mask=bs.mask.available, observations=bs.observations,
                        actions=bs.actions)


class PolicyBidder:
    """Shared actor evaluated on each responding robot's local observation."""

    def __init__(self, actor: Actor, greedy=True, rng=None):
        self.actor = actor
        self.greedy = greedy
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, observations, mask):
        idx = [i for i, o in enumerate(observations) if o is not None]
        X = np.stack([observations[i].features for i in idx])
        heads, _ = self.actor.forward(X)
        dist = self.actor.bid_dist(heads)
        if self.greedy:
            u = heads["bid"]
            bids = squash(u, self.actor.a_min, self.actor.a_max)
        else:
            bids, u = dist.sample(self.rng)
        logp = dist.log_prob_raw(u)
        modes = heads["mode"].argmax(axis=1)
        caps = heads["capacity"].argmax(axis=1)
        out = [None] * len(observations)
        for k, i in enumerate(idx):
            target = None
            if observations[i].is_host and modes[k] == 1:
                logits = np.where([bool(m) and j != i for j, m in enumerate(mask)], heads["target"][k], -np.inf)
                if np.isfinite(logits).any():
                    target = int(np.argmax(logits))
            out[i] = RobotAction(bid=float(bids[k]), mode=int(modes[k]), target=target, capacity=int(caps[k]),
                                 raw=float(u[k]), logp=float(logp[k]))
        return out


def policy_scheduler(actor: Actor, greedy=True, rng=None, name="rl"):
    return AuctionScheduler(PolicyBidder(actor, greedy=greedy, rng=rng), name=name)


def local_scheduler():
    return LocalOnly()
