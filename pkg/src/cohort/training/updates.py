"""Losses and gradient steps: behaviour cloning, critic regression, AWR and clipped PPO."""
from __future__ import annotations

import logging
import math

import numpy as np

from ..nn import Actor, AdamState, Critic, MaskedCategorical, adam_step
from .dataset import SampleBatch

log = logging.getLogger(__name__)

DISCRETE_HEADS = ("mode", "target", "capacity")


def _labels(sb: SampleBatch, head):
    if head == "mode":
        return sb.mode, sb.mode_mask
    if head == "target":
        return sb.target, sb.target_mask
    return sb.capacity, None


def weighted_nll(actor: Actor, sb: SampleBatch, idx, sample_w=None, class_weights=None,
                 heads=("mode", "target", "capacity", "bid"), bid_coef=1.0):
    """Mean over samples of sum over heads of -w * log pi(label).

    Heads whose label is missing (-1) for a sample contribute nothing for it.
    Returns (loss, grads aligned with actor.params, per-head mean loss).
    """
    idx = np.asarray(idx, dtype=int)
    B = len(idx)
    if B == 0:
        raise ValueError("empty batch")
    sw = np.ones(B) if sample_w is None else np.asarray(sample_w, dtype=float)
    out, cache = actor.forward(sb.X[idx])
    head_grads = {}
    per_head = {}
    total = 0.0
    for h in heads:
        if h == "bid":
            continue
        labels, masks = _labels(sb, h)
        y = labels[idx]
        ok = y >= 0
        g = np.zeros_like(out[h])
        if ok.any():
            logits = out[h][ok]
            mask = masks[idx][ok] if masks is not None else None
            dist = MaskedCategorical(logits, mask)
            cw = class_weights[h][y[ok]] if class_weights is not None and h in class_weights else 1.0
            w = sw[ok] * cw
            nll = -dist.log_prob(y[ok])
            per_head[h] = float(np.sum(nll) / B)
            total += float(np.sum(w * nll) / B)
            g[ok] = -(w / B)[:, None] * dist.grad_log_prob(y[ok])
        else:
            per_head[h] = 0.0
        head_grads[h] = g
    d_log_sd = 0.0
    if "bid" in heads:
        dist = actor.bid_dist(out)
        lp = dist.log_prob_raw(sb.u[idx])
        per_head["bid"] = float(-np.mean(lp))
        total += float(-bid_coef * np.sum(sw * lp) / B)
        g_mu, g_ls = dist.grad_log_prob(sb.u[idx])
        head_grads["bid"] = -(bid_coef * sw / B) * g_mu
        d_log_sd = float(-np.sum(bid_coef * sw * g_ls) / B)
    grads = actor.backward(cache, head_grads, d_log_sd)
    return total, grads, per_head


def bc_update(actor: Actor, adam: AdamState, sb: SampleBatch, idx, class_weights=None):
    """One Adam step on the masked behaviour-cloning loss; returns the pre-step loss."""
    loss, grads, _ = weighted_nll(actor, sb, idx, class_weights=class_weights)
    adam_step(actor.params, grads, adam)
    actor.bump()
    return loss


def awr_weights(adv, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return np.exp(np.clip(np.asarray(adv, dtype=float), -beta, beta) / beta)


def awr_update(actor: Actor, adam: AdamState, sb: SampleBatch, idx, adv, beta: float, class_weights=None):
    """Advantage-weighted log-likelihood step; ``adv`` is aligned with ``idx``."""
    w = awr_weights(adv, beta)
    loss, grads, _ = weighted_nll(actor, sb, idx, sample_w=w, class_weights=class_weights)
    adam_step(actor.params, grads, adam)
    actor.bump()
    return loss


def critic_loss(critic: Critic, states, targets):
    v, cache = critic.forward(states)
    err = v - targets
    loss = float(np.mean(err ** 2))
    grads = critic.backward(cache, 2.0 * err / len(err))
    return loss, grads


def fit_critic(critic: Critic, adam: AdamState, states, targets, epochs: int, batch: int, rng):
    """Minibatch Adam regression of V(s) onto targets; returns (loss before, loss after)."""
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = len(targets)
    if n == 0:
        raise ValueError("no critic targets")
    before = float(np.mean((critic.value(states) - targets) ** 2))
    for _ in range(epochs):
        perm = rng.permutation(n)
        for k in range(0, n, batch):
            b = perm[k:k + batch]
            _, grads = critic_loss(critic, states[b], targets[b])
            adam_step(critic.params, grads, adam)
            critic.bump()
    after = float(np.mean((critic.value(states) - targets) ** 2))
    return before, after


# --- PPO ----------------------------------------------------------------------

def ppo_surrogate(logp_new, logp_old, adv, clip: float):
    """Per-sample clipped objective and its derivative w.r.t. logp_new."""
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    # the clipped branch is flat: no gradient once the ratio has moved past the
    # clip boundary in the direction the advantage favours
    active = ~(((ratio > 1.0 + clip) & (adv > 0)) | ((ratio < 1.0 - clip) & (adv < 0)))
    d_logp = np.where(active, adv * ratio, 0.0)
    return obj, d_logp, ratio


def ppo_actor_step(actor: Actor, adam: AdamState, sb: SampleBatch, idx, adv, clip: float, ent_coef: float):
    """One minibatch step on the bid head (discrete heads are left untouched).

    Returns a dict of diagnostics; samples with a non-finite ratio are dropped.
    """
    idx = np.asarray(idx, dtype=int)
    out, cache = actor.forward(sb.X[idx])
    dist = actor.bid_dist(out)
    u = sb.u[idx]
    lp = dist.log_prob_raw(u)
    obj, d_logp, ratio = ppo_surrogate(lp, sb.logp[idx], adv, clip)
    ok = np.isfinite(ratio) & np.isfinite(obj)
    if not ok.all():
        log.warning("dropping %d samples with non-finite PPO ratio", int((~ok).sum()))
    B = max(int(ok.sum()), 1)
    d_logp = np.where(ok, d_logp, 0.0)
    g_mu, g_ls = dist.grad_log_prob(u)
    # minimise -(mean surrogate + ent_coef * entropy); d entropy / d log_sd = 1
    head_grads = {"bid": -d_logp * g_mu / B}
    d_log_sd = float(-np.sum(d_logp * g_ls) / B - ent_coef)
    grads = actor.backward(cache, head_grads, d_log_sd)
    adam_step(actor.params, grads, adam)
    actor.bump()
    ent = float(np.mean(dist.entropy_raw()))
    return {
        "actor_loss": float(-np.sum(np.where(ok, obj, 0.0)) / B - ent_coef * ent),
        "clip_frac": float(np.mean(np.abs(ratio[ok] - 1.0) > clip)) if ok.any() else 0.0,
        "entropy": ent,
    }


def ppo_update(actor: Actor, critic: Critic, sb: SampleBatch, adv_rec, returns_rec, hp, adam_a: AdamState,
               adam_c: AdamState, rng):
    """Clipped PPO on the bid head plus critic regression, ``hp.epochs`` passes.

    ``adv_rec``/``returns_rec`` are per record; every bidder in a record shares
    the record's (normalised) advantage.
    """
    adv_rec = np.asarray(adv_rec, dtype=float)
    sd = adv_rec.std()
    adv_n = (adv_rec - adv_rec.mean()) / (sd if sd > 1e-8 else 1.0)
    adv_s = adv_n[sb.rec]
    S = len(sb)
    R = sb.n_records
    stats = {"actor_loss": [], "critic_loss": [], "clip_frac": [], "entropy": []}
    for _ in range(hp.epochs_per_update):
        perm = rng.permutation(S)
        for k in range(0, S, hp.minibatch):
            b = perm[k:k + hp.minibatch]
            st = ppo_actor_step(actor, adam_a, sb, b, adv_s[b], hp.ppo_clip, hp.entropy_coef)
            for key in ("actor_loss", "clip_frac", "entropy"):
                stats[key].append(st[key])
        perm = rng.permutation(R)
        for k in range(0, R, hp.minibatch):
            b = perm[k:k + hp.minibatch]
            loss, grads = critic_loss(critic, sb.ct[b], returns_rec[b])
            adam_step(critic.params, grads, adam_c)
            critic.bump()
            stats["critic_loss"].append(loss)
    return {k: float(np.mean(v)) if v else math.nan for k, v in stats.items()}
