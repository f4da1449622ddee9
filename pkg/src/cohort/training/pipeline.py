"""Data collection and the three-phase curriculum: imitation, offline AWR, online constrained PPO."""
from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..auction import heuristic_action
from ..config import ScenarioConfig
from ..core import A_MAX, A_MIN, RobotProfile, clip_bid
from ..nn import Actor, AdamState, Checkpoint, Critic, Mlp
from ..schedulers import AuctionScheduler, PolicyBidder
from ..simworld import World
from .dataset import OfflineDataset, build_samples, ct_state_width, dataset_prepare, group_chains
from .gae import compute_gae, nstep_returns
from .rewards import DualVariables, dual_update, make_reward_fn
from .updates import awr_update, bc_update, fit_critic, ppo_update

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    pass


class CapacityError(ValueError):
    pass


# --- collection -----------------------------------------------------------------

class DegradedBidder:
    """Heuristic bidder whose bids are perturbed: Gaussian noise on every bid and,
    with probability ``random_frac``, a bid drawn uniformly from the bid range."""

    def __init__(self, rng, noise_sd: float = 0.0, random_frac: float = 0.0):
        self.rng = rng
        self.noise_sd = noise_sd
        self.random_frac = random_frac

    def __call__(self, observations, mask):
        out = []
        for o in observations:
            if o is None:
                out.append(None)
                continue
            a = heuristic_action(o, mask)
            bid = a.bid
            if self.noise_sd > 0:
                bid += self.noise_sd * self.rng.standard_normal()
            if self.random_frac > 0 and self.rng.random() < self.random_frac:
                bid = self.rng.uniform(A_MIN, A_MAX)
            a.bid = clip_bid(bid)
            out.append(a)
        return out


def collect_records(cfg: ScenarioConfig, seed: int, duration_s: Optional[float] = None, noise_sd: float = 0.0,
                    random_frac: float = 0.0) -> list:
    """Run the auction with a (possibly degraded) heuristic bidder; returns TransitionRecords."""
    if duration_s is not None:
        cfg = cfg.replace(horizon_s=duration_s)
    rng = np.random.default_rng([int(cfg.seed), int(seed), 7])
    bidder = DegradedBidder(rng, noise_sd, random_frac)
    name = "heuristic" if noise_sd == 0 and random_frac == 0 else "degraded"
    world = World(cfg, seed=seed, scheduler=AuctionScheduler(bidder, name=name), reward_fn=make_reward_fn(cfg.reward))
    world.run()
    return world.records


# --- evaluation helpers ---------------------------------------------------------

def action_agreement(actor: Actor, records) -> dict:
    """How often the greedy policy reproduces the recorded decisions.

    ``winner``: the argmin of the policy's greedy bids over the available robots
    equals the recorded winner. ``mode``/``capacity``/``target``: per responding
    robot, the masked argmax equals the recorded label.
    """
    if not records:
        raise ValueError("no records")
    sb = build_samples(records, n_max=len(records[0].mask), a_min=actor.a_min, a_max=actor.a_max)
    heads, _ = actor.forward(sb.X)
    bids = actor.bid_dist(heads).deterministic()
    R = sb.n_records
    best = np.full(R, np.inf)
    arg = np.full(R, -1)
    order = np.lexsort((sb.slot, sb.rec))
    for k in order:
        j = sb.rec[k]
        if bids[k] < best[j]:
            best[j], arg[j] = bids[k], sb.slot[k]
    has = arg >= 0
    out = {"winner": float(np.mean(arg[has] == sb.winner[has])) if has.any() else math.nan}
    for h in ("mode", "capacity", "target"):
        y = getattr(sb, h)
        ok = y >= 0
        if not ok.any():
            out[h] = math.nan
            continue
        logits = heads[h][ok]
        if h == "mode":
            logits = np.where(sb.mode_mask[ok], logits, -np.inf)
        elif h == "target":
            logits = np.where(sb.target_mask[ok], logits, -np.inf)
        out[h] = float(np.mean(np.argmax(logits, axis=1) == y[ok]))
    out["discrete"] = float(np.nanmean([out["mode"], out["capacity"]]))
    return out


def mean_shaped_reward(records) -> float:
    return float(np.mean([r.reward for r in records])) if records else math.nan


# --- curriculum -------------------------------------------------------------------

CURVE_COLUMNS = ["phase", "update_step", "actor_loss", "critic_loss", "mean_reward", "mean_penalized_reward",
                 "miss_rate", "log_sd", "lambda_D"]


@dataclass
class TrainResult:
    checkpoints: dict = field(default_factory=dict)  # phase -> Checkpoint
    curves: list = field(default_factory=list)  # dict rows
    metrics: dict = field(default_factory=dict)

    def curves_csv(self) -> str:
        cols = list(CURVE_COLUMNS)
        for row in self.curves:
            for k in row:
                if k not in cols:
                    cols.append(k)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for row in self.curves:
            w.writerow({k: (repr(round(v, 6)) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


class Trainer:
    """State machine over the phases; each phase refuses to run out of order."""

    def __init__(self, cfg: ScenarioConfig, seed: int = 0, actor: Optional[Actor] = None,
                 critic: Optional[Critic] = None):
        self.cfg = cfg
        self.hp = cfg.training
        self.seed = seed
        self.rng = np.random.default_rng([int(cfg.seed), int(seed), 11])
        self.n_slots = cfg.n_slots
        self.n_max = cfg.sim.max_robots
        from ..core import obs_width

        self.obs_dim = obs_width(self.n_slots)
        self.actor = actor
        self.critic = critic
        self.critic_fitted = critic is not None
        self.dataset: Optional[OfflineDataset] = None
        self.result = TrainResult()
        self.state = "init"

    # -- bookkeeping
    def _checkpoint(self, phase):
        meta = {"phase": phase, "scenario": self.cfg.name, "config_hash": self.cfg.digest(), "seed": self.seed,
                "roster": [asdict(p) for p in self.cfg.roster], "n_max": self.n_max}
        ck = Checkpoint(self.actor.copy(), self.critic.copy() if self.critic is not None else None, meta)
        self.result.checkpoints[phase] = ck
        return ck

    def _curve(self, **row):
        self.result.curves.append(row)

    def load_dataset(self, records):
        self.dataset = dataset_prepare(records, n_slots=self.n_slots)
        return self.dataset

    def _require_data(self):
        if self.dataset is None or self.dataset.empty or not self.dataset.train:
            raise PhaseError("offline phases need a non-empty dataset")

    # -- phase A
    def phase_a(self, epochs: Optional[int] = None, class_weighted: bool = True):
        self._require_data()
        hp = self.hp
        epochs = hp.bc_epochs if epochs is None else epochs
        if self.actor is None:
            self.actor = Actor(self.obs_dim, self.n_slots, rng=self.rng)
        sb = build_samples(self.dataset.records("train"), self.n_max)
        if len(sb) == 0:
            raise PhaseError("dataset has no bidder samples")
        cw = self.dataset.class_weights if class_weighted else None
        adam = AdamState.for_params(self.actor.params, lr=hp.bc_lr)
        val = self.dataset.records("val")
        for ep in range(epochs):
            perm = self.rng.permutation(len(sb))
            losses = [bc_update(self.actor, adam, sb, perm[k:k + hp.bc_batch], cw)
                      for k in range(0, len(sb), hp.bc_batch)]
            row = {"phase": "A", "update_step": ep, "actor_loss": float(np.mean(losses))}
            if val and (ep == epochs - 1 or ep % 10 == 0):
                agr = action_agreement(self.actor, val)
                row.update({f"agree_{k}": v for k, v in agr.items()})
            self._curve(**row)
        self.state = "A"
        self.result.metrics["phase_a_agreement"] = action_agreement(self.actor, val) if val else {}
        return self._checkpoint("A")

    # -- phase B
    def _trajectory_arrays(self, records, rewards_attr="reward"):
        """Records reordered chain by chain, with their sample batch."""
        trs = group_chains(records)
        ordered = [r for t in trs for r in t.records]
        sb = build_samples(ordered, self.n_max)
        return ordered, sb

    def fit_value(self, epochs: Optional[int] = None):
        self._require_data()
        hp = self.hp
        epochs = hp.critic_epochs if epochs is None else epochs
        ordered, sb = self._trajectory_arrays(self.dataset.records("train"))
        if self.critic is None:
            self.critic = Critic(ct_state_width(self.n_max), rng=self.rng)
        targets = chain_returns(sb.reward, sb.done, hp.gamma)
        adam = AdamState.for_params(self.critic.params, lr=hp.lr * 3)
        before, after = fit_critic(self.critic, adam, sb.ct, targets, epochs, hp.minibatch, self.rng)
        self._curve(phase="B-critic", update_step=0, critic_loss=before)
        self._curve(phase="B-critic", update_step=epochs, critic_loss=after)
        self.critic_fitted = True
        self.state = "critic"
        return before, after

    def phase_b(self, epochs: Optional[int] = None):
        if not self.critic_fitted or self.critic is None:
            raise PhaseError("phase B needs a fitted critic")
        if self.actor is None:
            raise PhaseError("phase B starts from a phase A actor")
        self._require_data()
        hp = self.hp
        epochs = hp.awr_epochs if epochs is None else epochs
        ordered, sb = self._trajectory_arrays(self.dataset.records("train"))
        values = self.critic.value(sb.ct)
        adv_rec = gae_by_chain(sb.reward, values, sb.done, hp.gamma, hp.gae_lambda)
        adv_s = adv_rec[sb.rec]
        adam = AdamState.for_params(self.actor.params, lr=hp.lr)
        for ep in range(epochs):
            perm = self.rng.permutation(len(sb))
            losses = [awr_update(self.actor, adam, sb, perm[k:k + hp.bc_batch], adv_s[perm[k:k + hp.bc_batch]],
                                 hp.awr_beta, self.dataset.class_weights)
                      for k in range(0, len(sb), hp.bc_batch)]
            self._curve(phase="B", update_step=ep, actor_loss=float(np.mean(losses)),
                        mean_reward=float(np.mean(sb.reward)))
        self.state = "B"
        return self._checkpoint("B")

    # -- phase C
    def phase_c(self, updates: Optional[int] = None, scenario: Optional[ScenarioConfig] = None):
        if self.actor is None:
            raise PhaseError("phase C needs an actor (train phases A/B or pass a checkpoint)")
        cfg = scenario if scenario is not None else self.cfg
        hp = self.hp
        updates = hp.phase_c_updates if updates is None else updates
        if self.critic is None:
            self.critic = Critic(ct_state_width(self.n_max), rng=self.rng)
        self.actor.log_sd[0] = max(float(self.actor.log_sd[0]), hp.phase_c_init_log_sd)
        duals = DualVariables.zeros(cfg.roster, cfg.duals.power_frac, cfg.duals.miss_rate)
        adam_a = AdamState.for_params(self.actor.params, lr=hp.lr)
        adam_c = AdamState.for_params(self.critic.params, lr=hp.lr)
        bidder = PolicyBidder(self.actor, greedy=False, rng=np.random.default_rng([int(cfg.seed), self.seed, 13]))
        sched = AuctionScheduler(bidder, name="rl")
        reward_fn = make_reward_fn(cfg.reward)
        names = [p.name for p in cfg.roster]
        episode = 0

        # one long world: episodes only restart if the horizon runs out
        horizon = max(cfg.horizon_s, 4.0 * updates * hp.batch_chains / max(self._chain_rate(cfg), 1e-9))
        run_cfg = cfg.replace(horizon_s=horizon)
        warmup_ms = cfg.sim.fps_window_s * 1000.0

        def new_world():
            w = World(run_cfg, seed=10_000 * (self.seed + 1) + episode, scheduler=sched, reward_fn=reward_fn)
            w.duals = duals
            return w

        world = new_world()
        open_chains: dict = {}
        batch: list = []
        n_chains = 0
        step = 0
        while step < updates:
            if not world._events:
                world.finish()
                episode += 1
                open_chains.clear()
                world = new_world()
                continue
            _, recs = world.step(heapq.heappop(world._events))
            for r in recs:
                open_chains.setdefault(r.chain_id, []).append(r)
                if r.done and open_chains[r.chain_id][0].time_ms < warmup_ms:
                    # decided while the FPS window was still filling
                    open_chains.pop(r.chain_id)
                elif r.done:
                    batch.extend(open_chains.pop(r.chain_id))
                    n_chains += 1
            if n_chains < hp.batch_chains:
                continue
            stats = self._ppo_step(batch, duals, adam_a, adam_c)
            power = np.array([np.mean([r.powers[i] for r in batch]) for i in range(len(names))])
            miss = float(np.mean([r.deadline_miss for r in batch]))
            new = dual_update(duals, power, miss, hp.dual_lr)
            duals.lambda_E[:] = new.lambda_E
            duals.lambda_D = new.lambda_D
            row = {"phase": "C", "update_step": step, **stats, "mean_reward": mean_shaped_reward(batch),
                   "mean_penalized_reward": float(np.mean([r.penalized_reward for r in batch])),
                   "miss_rate": miss, "log_sd": float(self.actor.log_sd[0]), "lambda_D": duals.lambda_D}
            for i, nm in enumerate(names):
                host_recs = [r.reward for r in batch if r.robot_id == i]
                row[f"reward_{nm}"] = float(np.mean(host_recs)) if host_recs else ""
                row[f"lambda_E_{nm}"] = float(duals.lambda_E[i])
            self._curve(**row)
            batch, n_chains = [], 0
            step += 1
        self.state = "C"
        self.result.metrics["final_duals"] = {"lambda_E": duals.lambda_E.tolist(), "lambda_D": duals.lambda_D}
        return self._checkpoint("C")

    @staticmethod
    def _chain_rate(cfg):
        return sum(w.frame_rate for w in cfg.workloads)

    def _ppo_step(self, batch, duals, adam_a, adam_c):
        hp = self.hp
        trs = group_chains(batch)
        ordered = [r for t in trs for r in t.records]
        sb = build_samples(ordered, self.n_max)
        keep = np.isfinite(sb.logp)
        if not keep.all():
            raise PhaseError("rollout samples without behaviour log-probs")
        values = self.critic.value(sb.ct)
        adv = gae_by_chain(sb.penalized, values, sb.done, hp.gamma, hp.gae_lambda)
        returns = adv + values
        return ppo_update(self.actor, self.critic, sb, adv, returns, hp, adam_a, adam_c, self.rng)


def chain_returns(rewards, dones, gamma: float) -> np.ndarray:
    """Bootstrapped returns with n = chain length: the discounted sum to the chain's end."""
    T = len(rewards)
    n = max(1, T)
    return nstep_returns(rewards, np.zeros(T + 1), dones, gamma, n=min(n, _max_run(dones)))


def _max_run(dones) -> int:
    longest, cur = 1, 0
    for d in dones:
        cur += 1
        if d:
            longest = max(longest, cur)
            cur = 0
    return max(longest, cur, 1)


def gae_by_chain(rewards, values, dones, gamma, lam) -> np.ndarray:
    """GAE over contiguous chains; the value after each chain's last step is 0."""
    v = np.append(np.asarray(values, dtype=float), 0.0)
    return compute_gae(rewards, v, dones, gamma, lam)


def three_phase_train(cfg: ScenarioConfig, records=None, phases="A,B,C", seed: int = 0,
                      checkpoint: Optional[Checkpoint] = None, updates: Optional[int] = None) -> TrainResult:
    """Run the requested phases in order; A and B need ``records``, C can resume from a checkpoint."""
    wanted = [p.strip().upper() for p in phases.split(",") if p.strip()]
    if not wanted or any(p not in ("A", "B", "C") for p in wanted):
        raise ValueError(f"phases must be a subset of A,B,C, got {phases!r}")
    if wanted != sorted(wanted):
        raise ValueError("phases must be given in order")
    if "".join(wanted) not in "ABC":
        raise ValueError(f"phases must be contiguous (e.g. A+C needs B), got {phases!r}")
    tr = Trainer(cfg, seed=seed,
                 actor=checkpoint.actor.copy() if checkpoint is not None else None,
                 critic=checkpoint.critic.copy() if checkpoint is not None and checkpoint.critic is not None else None)
    if "A" in wanted or "B" in wanted:
        if not records:
            raise PhaseError("phases A and B need an offline dataset")
        tr.load_dataset(records)
    if "A" in wanted:
        tr.phase_a()
    if "B" in wanted:
        tr.fit_value()
        tr.phase_b()
    if "C" in wanted:
        tr.phase_c(updates=updates)
    return tr.result


# --- joining devices ------------------------------------------------------------

def nearest_donor(roster, new_profile: RobotProfile) -> int:
    """Slot whose compute throughput is closest to the newcomer's (ties: lowest slot)."""
    d = [abs(p.compute_throughput - new_profile.compute_throughput) for p in roster]
    return int(np.argmin(d))


def policy_mask_init(actor: Actor, roster, new_profile: RobotProfile, n_max: int = 4):
    """Actor for a roster grown by ``new_profile``; the newcomer reuses its donor's identity.

    Input columns for the new slot's peer RTT start at zero weight, the new
    identity column copies the donor's, and the target head gains a zero column.
    Returns (actor, donor_slot).
    """
    n = actor.n_slots
    if len(roster) != n:
        raise ValueError("roster does not match the actor's slot count")
    if n + 1 > n_max:
        raise CapacityError(f"roster already holds the maximum of {n_max} robots")
    donor = nearest_donor(roster, new_profile)
    from ..core import obs_width

    head = 12  # telemetry + network features
    W0, b0 = actor.net.params[0], actor.net.params[1]
    mid = 7 + 2  # stage one-hot + context
    rows = [W0[:head], W0[head:head + n], np.zeros((1, W0.shape[1])), W0[head + n:head + n + mid],
            W0[head + n + mid:], W0[head + n + mid + donor:head + n + mid + donor + 1]]
    W0n = np.concatenate(rows, axis=0)
    assert W0n.shape[0] == obs_width(n + 1)
    WL, bL = actor.net.params[-2], actor.net.params[-1]
    cut = actor.slices["target"].stop
    WLn = np.concatenate([WL[:, :cut], np.zeros((WL.shape[0], 1)), WL[:, cut:]], axis=1)
    bLn = np.concatenate([bL[:cut], [0.0], bL[cut:]])
    params = [p.copy() for p in actor.net.params]
    params[0], params[-2], params[-1] = W0n, WLn, bLn
    sizes = [obs_width(n + 1), *actor.net.sizes[1:-1], Actor.head_width(n + 1)]
    net = Mlp(sizes, params=params)
    new = Actor(obs_width(n + 1), n + 1, actor.hidden, net=net, log_sd=float(actor.log_sd[0]),
                a_min=actor.a_min, a_max=actor.a_max)
    return new, donor


def adapt_actor(actor: Actor, src_roster, cfg: ScenarioConfig) -> Actor:
    """Grow ``actor`` one slot at a time until it covers ``cfg``'s roster."""
    roster = list(src_roster)
    while actor.n_slots < cfg.n_slots:
        newcomer = cfg.roster[actor.n_slots]
        actor, _ = policy_mask_init(actor, roster, newcomer, cfg.sim.max_robots)
        roster.append(newcomer)
    if actor.n_slots != cfg.n_slots:
        raise CapacityError("checkpoint covers more robots than the scenario")
    return actor
