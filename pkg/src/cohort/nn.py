"""Small numpy function-approximation stack.

Fully connected tanh networks with hand-written backprop, Adam, masked
categorical heads and a tanh-squashed Gaussian for bounded bids.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import A_MAX, A_MIN, CAPACITIES, MODES

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cohort-checkpoint"
CHECKPOINT_VERSION = 1


class Mlp:
    """tanh hidden layers, linear output. Parameters live in ``self.params``
    as [W0, b0, W1, b1, ...] with W of shape (fan_in, fan_out)."""

    def __init__(self, sizes, rng=None, params=None, out_scale=1.0):
        self.sizes = list(sizes)
        if params is not None:
            self.params = [np.array(p, dtype=float) for p in params]
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = []
            n_layers = len(sizes) - 1
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                scale = math.sqrt(1.0 / fan_in)
                if i == n_layers - 1:
                    scale *= out_scale
                self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
                self.params.append(np.zeros(fan_out))
        self._check()
        self.version = 0

    def _check(self):
        if len(self.params) != 2 * (len(self.sizes) - 1):
            raise ValueError("parameter list does not match layer sizes")
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out) or self.params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"layer {i} shape mismatch")

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x):
        return forward(self, x)

    def backward(self, cache, grad_out):
        return backward(self, cache, grad_out)

    def copy(self):
        return Mlp(self.sizes, params=[p.copy() for p in self.params])

    def to_dict(self):
        return {
            "sizes": self.sizes,
            "layers": [
                {"shape": list(self.params[2 * i].shape), "W": self.params[2 * i].ravel().tolist(), "b": self.params[2 * i + 1].tolist()}
                for i in range(self.n_layers)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        params = []
        for layer in d["layers"]:
            params.append(np.asarray(layer["W"], dtype=float).reshape(layer["shape"]))
            params.append(np.asarray(layer["b"], dtype=float))
        return cls(d["sizes"], params=params)


@dataclass
class ForwardCache:
    inputs: list  # activation entering each layer
    version: int
    owner: int


def forward(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.sizes[0]:
        raise ValueError(f"input width {x.shape[1]} != network input {net.sizes[0]}")
    inputs = []
    h = x
    for i in range(net.n_layers):
        inputs.append(h)
        z = h @ net.params[2 * i] + net.params[2 * i + 1]
        h = np.tanh(z) if i < net.n_layers - 1 else z
    cache = ForwardCache(inputs=inputs, version=net.version, owner=id(net))
    return (h[0] if squeeze else h), cache


def backward(net: Mlp, cache: ForwardCache, grad_out):
    if cache.owner != id(net) or cache.version != net.version:
        raise ValueError("stale forward cache: parameters changed since forward()")
    g = np.asarray(grad_out, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    grads = [None] * len(net.params)
    for i in reversed(range(net.n_layers)):
        h_in = cache.inputs[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.params[2 * i].T) * (1.0 - h_in ** 2)
    return grads


# --- distributions --------------------------------------------------------


class MaskedCategorical:
    """Batch of categorical distributions with hard masks.

    logits: (B, K); mask: (B, K) bool. Masked entries get probability 0.
    """

    def __init__(self, logits, mask=None):
        logits = np.atleast_2d(np.asarray(logits, dtype=float))
        if mask is None:
            mask = np.ones_like(logits, dtype=bool)
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        if mask.shape != logits.shape:
            raise ValueError("mask shape does not match logits")
        if not mask.any(axis=1).all():
            raise ValueError("every row needs at least one unmasked slot")
        self.mask = mask
        z = np.where(mask, logits, -np.inf)
        zmax = z.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(z - zmax), 0.0)
        s = e.sum(axis=1, keepdims=True)
        self.probs = e / s
        self.log_probs = np.where(mask, z - zmax - np.log(s), -np.inf)

    def log_prob(self, actions):
        actions = np.asarray(actions, dtype=int).reshape(-1)
        rows = np.arange(len(actions))
        if not self.mask[rows, actions].all():
            raise ValueError("log_prob queried for a masked action")
        return self.log_probs[rows, actions]

    def entropy(self):
        plogp = np.where(self.mask, self.probs * np.where(self.mask, self.log_probs, 0.0), 0.0)
        return -plogp.sum(axis=1)

    def sample(self, rng):
        u = rng.random((self.probs.shape[0], 1))
        idx = (np.cumsum(self.probs, axis=1) < u).sum(axis=1)
        return np.minimum(idx, self.probs.shape[1] - 1)

    def mode(self):
        return np.where(self.mask, self.probs, -1.0).argmax(axis=1)

    def grad_log_prob(self, actions):
        """d log p(a) / d logits."""
        actions = np.asarray(actions, dtype=int).reshape(-1)
        g = -self.probs.copy()
        g[np.arange(len(actions)), actions] += 1.0
        return np.where(self.mask, g, 0.0)

    def grad_entropy(self):
        H = self.entropy()[:, None]
        lp = np.where(self.mask, self.log_probs, 0.0)
        return np.where(self.mask, -self.probs * (lp + H), 0.0)


def masked_categorical(logits, mask=None):
    return MaskedCategorical(logits, mask)


def _log_squash_jacobian(u, a_min, a_max):
    # log |d bid / du| with bid = a_min + (a_max - a_min) * (tanh(u) + 1) / 2
    log_1m_tanh2 = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    return math.log((a_max - a_min) / 2.0) + log_1m_tanh2


def squash(u, a_min=A_MIN, a_max=A_MAX):
    return a_min + (a_max - a_min) * (np.tanh(u) + 1.0) / 2.0


def unsquash(bid, a_min=A_MIN, a_max=A_MAX, eps=1e-3):
    y = 2.0 * (np.asarray(bid, dtype=float) - a_min) / (a_max - a_min) - 1.0
    y = np.clip(y, -1.0 + eps, 1.0 - eps)
    return np.arctanh(y)


class SquashedGaussian:
    """Gaussian in pre-squash space, mapped into [a_min, a_max] with tanh."""

    def __init__(self, mean, log_sd, a_min=A_MIN, a_max=A_MAX):
        self.mean = np.asarray(mean, dtype=float)
        self.log_sd = np.broadcast_to(np.asarray(log_sd, dtype=float), self.mean.shape)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_sd))):
            raise ValueError("non-finite mean or log_sd")
        if not (math.isfinite(a_min) and math.isfinite(a_max) and a_min < a_max):
            raise ValueError("bounds must be finite with a_min < a_max")
        self.a_min = a_min
        self.a_max = a_max
        self.sd = np.exp(self.log_sd)

    def sample(self, rng):
        u = self.mean + self.sd * rng.standard_normal(self.mean.shape)
        return squash(u, self.a_min, self.a_max), u

    def deterministic(self):
        return squash(self.mean, self.a_min, self.a_max)

    def log_prob_raw(self, u):
        """Gaussian log density of the pre-squash sample (no Jacobian)."""
        z = (u - self.mean) / self.sd
        return -0.5 * z ** 2 - self.log_sd - 0.5 * math.log(2 * math.pi)

    def log_prob(self, u):
        """Density of the squashed bid, including the change of variables."""
        return self.log_prob_raw(u) - _log_squash_jacobian(u, self.a_min, self.a_max)

    def log_prob_bid(self, bid):
        u = unsquash(bid, self.a_min, self.a_max, eps=1e-12)
        return self.log_prob(u)

    def entropy_raw(self):
        return self.log_sd + 0.5 * math.log(2 * math.pi * math.e)

    def grad_log_prob(self, u):
        """(d/d mean, d/d log_sd) of log_prob; the Jacobian term has no parameter dependence."""
        z = (u - self.mean) / self.sd
        return z / self.sd, z ** 2 - 1.0


def bounded_gaussian(mean, log_sd, bounds=(A_MIN, A_MAX), rng=None):
    dist = SquashedGaussian(mean, log_sd, *bounds)
    rng = rng if rng is not None else np.random.default_rng()
    bid, u = dist.sample(rng)
    return bid, dist.log_prob(u)


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=3e-4, **kw):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params, grads, state: AdamState):
    """In-place Adam update; returns ``params``. Non-finite grads skip the step."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter/gradient shapes do not match")
    if not all(np.all(np.isfinite(g)) for g in grads):
        log.warning("non-finite gradient; Adam step skipped")
        return params
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- actor / critic ----------------------------------------------------------


class Actor:
    """Shared multi-head actor: mode, target, capacity logits plus a bid mean
    from one tanh trunk, and a state-independent bid log-sd."""

    def __init__(self, obs_dim, n_slots, hidden=(64, 64), rng=None, net=None, log_sd=-0.5,
                 a_min=A_MIN, a_max=A_MAX):
        self.obs_dim = obs_dim
        self.n_slots = n_slots
        self.hidden = tuple(hidden)
        self.a_min = a_min
        self.a_max = a_max
        out = self.head_width(n_slots)
        self.net = net if net is not None else Mlp([obs_dim, *hidden, out], rng=rng, out_scale=0.1)
        if self.net.sizes[0] != obs_dim or self.net.sizes[-1] != out:
            raise ValueError("actor network shape does not match obs_dim / n_slots")
        self.log_sd = np.array([float(log_sd)])

    @staticmethod
    def head_width(n_slots):
        return len(MODES) + n_slots + len(CAPACITIES) + 1

    @property
    def slices(self):
        nm, nc = len(MODES), len(CAPACITIES)
        return {
            "mode": slice(0, nm),
            "target": slice(nm, nm + self.n_slots),
            "capacity": slice(nm + self.n_slots, nm + self.n_slots + nc),
            "bid": slice(nm + self.n_slots + nc, nm + self.n_slots + nc + 1),
        }

    @property
    def params(self):
        return self.net.params + [self.log_sd]

    @property
    def version(self):
        return self.net.version

    def bump(self):
        self.net.version += 1

    def forward(self, x):
        out, cache = self.net.forward(np.atleast_2d(x))
        s = self.slices
        heads = {k: out[:, sl] for k, sl in s.items()}
        heads["bid"] = heads["bid"][:, 0]
        return heads, cache

    def backward(self, cache, head_grads, d_log_sd=0.0):
        B = cache.inputs[0].shape[0]
        g = np.zeros((B, self.net.sizes[-1]))
        for k, sl in self.slices.items():
            if k in head_grads and head_grads[k] is not None:
                hg = np.asarray(head_grads[k], dtype=float)
                g[:, sl] = hg.reshape(B, -1)
        grads = self.net.backward(cache, g)
        return grads + [np.array([float(d_log_sd)])]

    def bid_dist(self, heads):
        return SquashedGaussian(heads["bid"], self.log_sd[0], self.a_min, self.a_max)

    def greedy_bids(self, x):
        heads, _ = self.forward(x)
        return squash(heads["bid"], self.a_min, self.a_max)

    def copy(self):
        a = Actor(self.obs_dim, self.n_slots, self.hidden, net=self.net.copy(), log_sd=float(self.log_sd[0]),
                  a_min=self.a_min, a_max=self.a_max)
        return a

    def to_dict(self):
        return {
            "obs_dim": self.obs_dim,
            "n_slots": self.n_slots,
            "hidden": list(self.hidden),
            "log_sd": float(self.log_sd[0]),
            "bounds": [self.a_min, self.a_max],
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        a_min, a_max = d.get("bounds", [A_MIN, A_MAX])
        return cls(d["obs_dim"], d["n_slots"], d["hidden"], net=Mlp.from_dict(d["net"]), log_sd=d["log_sd"],
                   a_min=a_min, a_max=a_max)


class Critic:
    def __init__(self, state_dim, hidden=(128, 128), rng=None, net=None):
        self.state_dim = state_dim
        self.hidden = tuple(hidden)
        self.net = net if net is not None else Mlp([state_dim, *hidden, 1], rng=rng)

    @property
    def params(self):
        return self.net.params

    def bump(self):
        self.net.version += 1

    def value(self, s):
        v, _ = self.net.forward(np.atleast_2d(s))
        return v[:, 0]

    def forward(self, s):
        v, cache = self.net.forward(np.atleast_2d(s))
        return v[:, 0], cache

    def backward(self, cache, dv):
        return self.net.backward(cache, np.asarray(dv, dtype=float)[:, None])

    def copy(self):
        return Critic(self.state_dim, self.hidden, net=self.net.copy())

    def to_dict(self):
        return {"state_dim": self.state_dim, "hidden": list(self.hidden), "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["state_dim"], d["hidden"], net=Mlp.from_dict(d["net"]))


@dataclass
class Checkpoint:
    actor: Actor
    critic: Critic = None
    meta: dict = field(default_factory=dict)

    def save(self, path):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "meta": self.meta,
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict() if self.critic is not None else None,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, separators=(",", ":"))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        critic = Critic.from_dict(doc["critic"]) if doc.get("critic") else None
        return cls(actor=Actor.from_dict(doc["actor"]), critic=critic, meta=doc.get("meta", {}))
