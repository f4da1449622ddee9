"""Generalized advantage estimation and bootstrapped returns."""
from __future__ import annotations

import numpy as np


def compute_gae(rewards, values, dones, gamma: float, lam: float) -> np.ndarray:
    """Recursive GAE over a (possibly multi-episode) trajectory.

    ``values`` has one more entry than ``rewards``: the bootstrap value after the
    last step. ``dones[t]`` cuts both the bootstrap and the recursion after step t.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    T = len(r)
    if v.shape != (T + 1,) or d.shape != (T,):
        raise ValueError(f"need values of length {T + 1} and dones of length {T}")
    if not (0.0 < gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma must lie in (0, 1] and lam in [0, 1]")
    adv = np.zeros(T)
    nonterm = 1.0 - d.astype(float)
    delta = r + gamma * v[1:] * nonterm - v[:-1]
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = delta[t] + gamma * lam * nonterm[t] * acc
        adv[t] = acc
    return adv


def nstep_returns(rewards, values, dones, gamma: float, n: int) -> np.ndarray:
    """R_t = sum_{k<n} gamma^k r_{t+k} + gamma^n V(s_{t+n}), truncated at episode ends.

    ``values`` has length T+1 as for compute_gae; terminal bootstrap is 0.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    T = len(r)
    if v.shape != (T + 1,) or d.shape != (T,):
        raise ValueError(f"need values of length {T + 1} and dones of length {T}")
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.zeros(T)
    for t in range(T):
        g, disc = 0.0, 1.0
        k = t
        cut = False
        while k < T and k - t < n:
            g += disc * r[k]
            disc *= gamma
            if d[k]:
                cut = True
                break
            k += 1
        if not cut:
            g += disc * v[min(k, T)]
        out[t] = g
    return out


def chain_order(chain_ids) -> np.ndarray:
    """Stable permutation that makes each chain's records contiguous."""
    first = {}
    for i, c in enumerate(chain_ids):
        first.setdefault(c, i)
    return np.array(sorted(range(len(chain_ids)), key=lambda i: (first[chain_ids[i]], i)), dtype=int)
