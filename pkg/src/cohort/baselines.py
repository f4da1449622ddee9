"""Non-learning comparison schedulers: fully local execution and a per-chain GA."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import RewardWeights
from .simworld import Decision, LocalOnly


def local_baseline(world=None) -> LocalOnly:
    """Every stage runs on the robot that published the chain."""
    return LocalOnly()


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 24
    generations: int = 20
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    elitism_count: int = 2
    tournament_size: int = 3
    fitness_window: int = 1  # chains planned jointly; 1 = myopic per-chain planning

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not (0.0 <= self.crossover_rate <= 1.0 and 0.0 <= self.mutation_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.generations < 0 or self.tournament_size < 1 or self.fitness_window < 1:
            raise ValueError("generations >= 0, tournament_size >= 1, fitness_window >= 1")
        if not 0 <= self.elitism_count <= self.population_size:
            raise ValueError("elitism_count must lie in [0, population_size]")


@dataclass
class GaProblem:
    """Expected-cost view of one chain to be placed, frozen at planning time.

    ``ready`` is when each robot finishes its reserved work (ms, relative to the
    chain start); ``xfer`` the expected host->robot transfer time per stage.
    """

    host: int
    flops: np.ndarray  # (L,) GFLOP
    deadlines: np.ndarray  # (L,) ms
    xfer: np.ndarray  # (L, N) ms, 0 for the host
    rtt: np.ndarray  # (N,) ms, 0 for the host
    throughput: np.ndarray  # (N,) GFLOP/s
    busy_power: np.ndarray  # (N,) W
    ready: np.ndarray  # (N,) ms
    queue: np.ndarray  # (N,)
    online: np.ndarray  # (N,) bool
    contention: float = 0.1
    weights: RewardWeights = RewardWeights()

    @property
    def n_stages(self):
        return len(self.flops)

    @property
    def n_slots(self):
        return len(self.throughput)

    @property
    def allowed(self):
        return np.flatnonzero(self.online)

    @classmethod
    def from_world(cls, world, chain, t: float, weights: Optional[RewardWeights] = None):
        n = world.n_slots
        host = chain.host
        stages = chain.spec.stages
        online = np.array([world.robots[i].online and (i == host or world.reachable(host, i)) for i in range(n)])
        rtt = np.zeros(n)
        bw = np.full(n, np.inf)
        for i in range(n):
            if i != host and online[i]:
                link = world.link(host, i)
                rtt[i] = link.base_rtt
                bw[i] = link.bandwidth
        payload = np.array([s.tensor_bytes for s in stages], dtype=float)
        xfer = payload[:, None] / bw[None, :] + rtt[None, :]
        xfer[:, host] = 0.0
        return cls(
            host=host,
            flops=np.array([s.flops for s in stages], dtype=float),
            deadlines=np.array([s.deadline_ms for s in stages], dtype=float),
            xfer=xfer,
            rtt=rtt,
            throughput=np.array([r.profile.compute_throughput for r in world.robots], dtype=float),
            busy_power=np.array([r.profile.busy_power for r in world.robots], dtype=float),
            ready=np.array([max(0.0, r.busy_until - t) for r in world.robots]),
            queue=np.array([len(r.queue) for r in world.robots], dtype=float),
            online=online,
            contention=world.sim.contention,
            weights=weights if weights is not None else world.cfg.reward,
        )


def ga_fitness(genes: np.ndarray, prob: GaProblem) -> np.ndarray:
    """Predicted shaped reward (minus the FPS term, constant across plans) per chromosome.

    The chain is played forward with expected costs: each stage waits for its
    input transfer and for the winner's reserved work. A stage misses when the
    time from its dispatch to its completion, queueing included, exceeds its budget.
    """
    genes = np.atleast_2d(np.asarray(genes, dtype=int))
    P, L = genes.shape
    w = prob.weights
    ready = np.broadcast_to(prob.ready, (P, prob.n_slots)).copy()
    queue = np.broadcast_to(prob.queue, (P, prob.n_slots)).copy()
    rows = np.arange(P)
    now = np.zeros(P)
    fit = np.zeros(P)
    for k in range(L):
        g = genes[:, k]
        xfer = prob.xfer[k, g]
        proc = prob.flops[k] / prob.throughput[g] * 1000.0 * (1.0 + prob.contention * queue[rows, g])
        end = np.maximum(now + xfer, ready[rows, g]) + proc
        elapsed = end - now
        miss = elapsed > prob.deadlines[k]
        slack = np.maximum(0.0, prob.deadlines[k] - elapsed)
        fit += (-w.lambda_D * miss - w.lambda_E * prob.busy_power[g] * proc / 1000.0
                + w.w_slack * slack / 1000.0 - w.w_rtt * prob.rtt[g] / 1000.0
                - w.w_proc * proc / 1000.0 - w.w_xfer * xfer / 1000.0)
        ready[rows, g] = end
        queue[rows, g] += 1
        now = end
    return fit


def exhaustive_schedule(prob: GaProblem):
    """Best assignment by enumeration; only for small instances."""
    allowed = prob.allowed
    if len(allowed) == 0:
        raise ValueError("no robot online")
    combos = np.array(list(itertools.product(allowed, repeat=prob.n_stages)), dtype=int)
    fit = ga_fitness(combos, prob)
    i = int(np.argmax(fit))
    return combos[i], float(fit[i])


def _tournament(fit, k, size, rng):
    idx = rng.integers(0, len(fit), size=(size, k))
    return idx[np.arange(size), np.argmax(fit[idx], axis=1)]


def ga_schedule(prob: GaProblem, cfg: GaConfig, rng, initial: Optional[np.ndarray] = None):
    """Search stage->robot assignments; returns (genes, fitness).

    ``initial`` rows, when given, replace the first members of the random
    starting population.
    """
    allowed = prob.allowed
    if len(allowed) == 0:
        raise ValueError("no robot online")
    L = prob.n_stages
    P = cfg.population_size
    if len(allowed) == 1:
        genes = np.full(L, allowed[0])
        return genes, float(ga_fitness(genes, prob)[0])
    pop = allowed[rng.integers(0, len(allowed), size=(P, L))]
    if initial is not None:
        initial = np.atleast_2d(np.asarray(initial, dtype=int))[:P]
        pop[: len(initial)] = initial
    fit = ga_fitness(pop, prob)
    n_elite = cfg.elitism_count
    for _ in range(cfg.generations):
        order = np.argsort(-fit, kind="stable")
        elite = pop[order[:n_elite]]
        n_child = P - n_elite
        pa = pop[_tournament(fit, cfg.tournament_size, n_child, rng)]
        pb = pop[_tournament(fit, cfg.tournament_size, n_child, rng)]
        children = pa.copy()
        if L > 1:
            cut = rng.integers(1, L, size=n_child)
            cross = rng.random(n_child) < cfg.crossover_rate
            tail = (np.arange(L)[None, :] >= cut[:, None]) & cross[:, None]
            children[tail] = pb[tail]
        mut = rng.random(children.shape) < cfg.mutation_rate
        children[mut] = allowed[rng.integers(0, len(allowed), size=int(mut.sum()))]
        pop = np.concatenate([elite, children])
        fit = np.concatenate([fit[order[:n_elite]], ga_fitness(children, prob)])
    best = int(np.argmax(fit))
    return pop[best].copy(), float(fit[best])


class GaScheduler:
    """Plans a whole chain at arrival and charges the planning time as latency."""

    name = "ga"

    def __init__(self, cfg: GaConfig = GaConfig(), planning_ms: Optional[float] = None, rng=None):
        self.cfg = cfg
        self.planning_ms = planning_ms
        self.rng = rng

    def on_chain_start(self, world, chain, t):
        rng = self.rng if self.rng is not None else world.rng_sched
        prob = GaProblem.from_world(world, chain, t)
        # always offer the all-local plan so the GA never does worse than it predicts for local
        local = np.full(prob.n_stages, chain.host)
        genes, _ = ga_schedule(prob, self.cfg, rng, initial=local)
        chain.plan = [int(g) for g in genes]
        return world.sim.ga_planning_ms if self.planning_ms is None else self.planning_ms

    def decide(self, world, chain, index, t):
        mask = tuple(r.online for r in world.robots)
        winner = chain.plan[index] if chain.plan is not None else chain.host
        return Decision(winner=winner, mask=mask)
