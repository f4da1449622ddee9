"""Offline dataset: chain trajectories, splits, class weights and array views for training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import CAPACITIES, MODES, STAGE_KINDS, TransitionRecord, obs_width

N_TEL, N_NET, N_STAGE, N_CTX = 8, 4, len(STAGE_KINDS), 2


def relayout(features: np.ndarray, n: int, n_out: int) -> np.ndarray:
    """Re-express observation features built for ``n`` slots in an ``n_out``-slot layout.

    Peer-RTT and identity blocks are zero-padded (or truncated) per slot; every
    other feature keeps its value.
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    if f.shape[1] != obs_width(n):
        raise ValueError(f"expected width {obs_width(n)} for {n} slots, got {f.shape[1]}")
    head = N_TEL + N_NET
    peers = f[:, head:head + n]
    mid = f[:, head + n:head + n + N_STAGE + N_CTX]
    ident = f[:, head + n + N_STAGE + N_CTX:]
    k = min(n, n_out)
    # absent peers read as "unreachable" (1.0), like self
    new_peers = np.ones((f.shape[0], n_out))
    new_peers[:, :k] = peers[:, :k]
    new_ident = np.zeros((f.shape[0], n_out))
    new_ident[:, :k] = ident[:, :k]
    out = np.concatenate([f[:, :head], new_peers, mid, new_ident], axis=1)
    return out if np.ndim(features) > 1 else out[0]


def context_width(n_max: int) -> int:
    return N_STAGE + N_CTX + n_max


def ct_state_width(n_max: int) -> int:
    return n_max * obs_width(n_max) + context_width(n_max)


def build_ct_state(observations, mask, n_max: int, host: int = None) -> np.ndarray:
    """Masked global state: one re-laid-out observation block per slot, zeros where
    unavailable, then the shared stage context and host one-hot."""
    n = len(mask)
    if n > n_max:
        raise ValueError(f"roster of {n} exceeds n_max={n_max}")
    w = obs_width(n_max)
    s = np.zeros(ct_state_width(n_max))
    ctx = None
    for i, (o, m) in enumerate(zip(observations, mask)):
        if not m or o is None:
            continue
        s[i * w:(i + 1) * w] = relayout(o.features, n, n_max)
        if ctx is None:
            ctx = o.features[N_TEL + N_NET + n:N_TEL + N_NET + n + N_STAGE + N_CTX]
    base = n_max * w
    if ctx is not None:
        s[base:base + N_STAGE + N_CTX] = ctx
    if host is not None:
        s[base + N_STAGE + N_CTX + host] = 1.0
    return s


def ct_block(state: np.ndarray, i: int, n_max: int) -> np.ndarray:
    w = obs_width(n_max)
    return state[i * w:(i + 1) * w]


@dataclass
class Trajectory:
    chain_id: str
    host: int
    records: list

    @property
    def start_ms(self):
        return self.records[0].time_ms


def group_chains(records) -> list:
    """Group records into per-chain trajectories ordered by stage index.

    Chains are ordered by the time of their first record.
    """
    by_chain = {}
    for r in records:
        by_chain.setdefault(r.chain_id, []).append(r)
    out = [Trajectory(cid, rs[0].robot_id, sorted(rs, key=lambda r: r.t)) for cid, rs in by_chain.items()]
    out.sort(key=lambda tr: (tr.start_ms, tr.chain_id))
    return out


def is_complete(tr: Trajectory) -> bool:
    ts = [r.t for r in tr.records]
    return ts == list(range(len(ts))) and tr.records[-1].done and not any(r.done for r in tr.records[:-1])


def inverse_frequency(labels, n_classes: int) -> np.ndarray:
    """Class weights proportional to 1 / count, normalized to mean 1 over the labels seen."""
    labels = np.asarray([l for l in labels if l is not None], dtype=int)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    w = np.zeros(n_classes)
    seen = counts > 0
    if not seen.any():
        return np.ones(n_classes)
    w[seen] = 1.0 / counts[seen]
    # scale so a label drawn from the data has expected weight 1
    w *= len(labels) / float(np.sum(w[labels]))
    w[~seen] = 1.0
    return w


@dataclass
class OfflineDataset:
    train: list  # Trajectory
    val: list
    class_weights: dict = field(default_factory=dict)
    n_slots: int = 0

    def __post_init__(self):
        ids_t = {t.chain_id for t in self.train}
        if ids_t & {t.chain_id for t in self.val}:
            raise ValueError("train and val splits overlap")
        for tr in self.train + self.val:
            if not is_complete(tr):
                raise ValueError(f"chain {tr.chain_id} is not a contiguous trajectory ending in done")

    def __len__(self):
        return sum(len(t.records) for t in self.train + self.val)

    @property
    def empty(self):
        return len(self) == 0

    def records(self, split="train"):
        trs = self.train if split == "train" else self.val
        return [r for t in trs for r in t.records]


def dataset_prepare(records, val_frac: float = 0.2, n_slots: int = None) -> OfflineDataset:
    """Drop incomplete chains, split chronologically, compute per-branch class weights."""
    if not 0.0 <= val_frac < 1.0:
        raise ValueError("val_frac must lie in [0, 1)")
    records = list(records)
    if n_slots is None:
        n_slots = len(records[0].mask) if records else 0
    chains = [t for t in group_chains(records) if is_complete(t)]
    # a learning sample needs at least one bidder's observation
    chains = [t for t in chains if all(any(o is not None for o in r.observations) for r in t.records)]
    n_val = int(round(len(chains) * val_frac))
    train, val = chains[:len(chains) - n_val], chains[len(chains) - n_val:]
    acts = [a for t in train for r in t.records for a in r.actions if a is not None]
    weights = {
        "mode": inverse_frequency([a.mode for a in acts], len(MODES)),
        "target": inverse_frequency([a.target for a in acts], max(n_slots, 1)),
        "capacity": inverse_frequency([a.capacity for a in acts], len(CAPACITIES)),
    }
    return OfflineDataset(train=train, val=val, class_weights=weights, n_slots=n_slots)


# --- array views --------------------------------------------------------------

@dataclass
class SampleBatch:
    """Per (record, bidding robot) rows for the shared actor, plus per-record rows for the critic."""

    X: np.ndarray  # (S, obs_dim)
    rec: np.ndarray  # (S,) index into record arrays
    slot: np.ndarray  # (S,)
    mode: np.ndarray  # (S,) label or -1
    mode_mask: np.ndarray  # (S, 3)
    target: np.ndarray  # (S,) label or -1
    target_mask: np.ndarray  # (S, n)
    capacity: np.ndarray  # (S,) label or -1
    u: np.ndarray  # (S,) raw bid
    logp: np.ndarray  # (S,) behaviour log-prob of u (nan when unknown)
    winner: np.ndarray  # (R,)
    record_mask: np.ndarray  # (R, n)
    ct: np.ndarray  # (R, ct_dim)
    reward: np.ndarray  # (R,)
    penalized: np.ndarray  # (R,)
    done: np.ndarray  # (R,)
    host: np.ndarray  # (R,)

    @property
    def n_records(self):
        return len(self.reward)

    def __len__(self):
        return len(self.X)


def mode_mask_for(is_host: bool, any_peer: bool) -> np.ndarray:
    if is_host:
        return np.array([True, any_peer, False])
    return np.array([True, False, True])


def build_samples(records, n_max: int, a_min=0.0, a_max=400.0) -> SampleBatch:
    from ..nn import unsquash

    X, rec, slot, mode, mmask, target, tmask, cap, u, logp = ([] for _ in range(10))
    winner, rmask, ct, rew, pen, done, host = ([] for _ in range(7))
    for j, r in enumerate(records):
        n = len(r.mask)
        peers_ok = [bool(m) for m in r.mask]
        for i, (o, a) in enumerate(zip(r.observations, r.actions)):
            if o is None or a is None or not r.mask[i]:
                continue
            X.append(o.features)
            rec.append(j)
            slot.append(i)
            any_peer = any(peers_ok[k] for k in range(n) if k != i)
            mm = mode_mask_for(o.is_host, any_peer)
            mmask.append(mm)
            mode.append(a.mode if a.mode is not None and mm[a.mode] else -1)
            tm = np.array([peers_ok[k] and k != i for k in range(n)])
            tmask.append(tm)
            target.append(a.target if a.target is not None and tm[a.target] else -1)
            cap.append(a.capacity if a.capacity is not None else -1)
            u.append(a.raw if a.raw is not None else float(unsquash(a.bid, a_min, a_max)))
            logp.append(a.logp if a.logp is not None else np.nan)
        winner.append(r.winner_id)
        rmask.append(r.mask)
        ct.append(build_ct_state(r.observations, r.mask, n_max, host=r.robot_id))
        rew.append(r.reward)
        pen.append(r.penalized_reward)
        done.append(r.done)
        host.append(r.robot_id)
    n = len(records[0].mask) if records else 0
    return SampleBatch(
        X=np.array(X, dtype=float).reshape(len(X), -1),
        rec=np.array(rec, dtype=int),
        slot=np.array(slot, dtype=int),
        mode=np.array(mode, dtype=int),
        mode_mask=np.array(mmask, dtype=bool).reshape(-1, len(MODES)),
        target=np.array(target, dtype=int),
        target_mask=np.array(tmask, dtype=bool).reshape(-1, n),
        capacity=np.array(cap, dtype=int),
        u=np.array(u, dtype=float),
        logp=np.array(logp, dtype=float),
        winner=np.array(winner, dtype=int),
        record_mask=np.array(rmask, dtype=bool).reshape(-1, n),
        ct=np.array(ct, dtype=float).reshape(len(ct), -1),
        reward=np.array(rew, dtype=float),
        penalized=np.array(pen, dtype=float),
        done=np.array(done, dtype=bool),
        host=np.array(host, dtype=int),
    )
