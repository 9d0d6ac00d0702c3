"""Recurrent token policy and the risk-seeking policy-gradient estimator.

The policy is a single-layer LSTM written directly in numpy.  At each
step its input is the concatenated embeddings of the current parent and
sibling tokens (a dedicated id stands for "empty"); its output is a
categorical distribution over the library, restricted by
:func:`~symprecond.expr.constraint_mask`.

Rollouts are run for a whole batch at once.  The forward pass keeps
every intermediate needed for backpropagation through time, so a batch
gradient costs one extra sweep over the stored steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import (MAX_LENGTH, MIN_LENGTH, Expression, Library, TraversalState,
                   constraint_mask, traversal_step)

__all__ = [
    "PolicyModel",
    "Rollouts",
    "empirical_quantile",
    "risk_seeking_weights",
    "risk_seeking_gradient",
    "entropy_gradient",
    "INIT_SCALE",
]

INIT_SCALE = 0.08
PARAM_NAMES = ("emb_parent", "emb_sibling", "W", "b", "W_out", "b_out")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Rollouts:
    """A batch of sampled sequences plus the cached forward pass.

    Arrays are indexed ``[t, i]`` (step, sequence); ``alive[t, i]`` is
    True while sequence ``i`` still emits tokens at step ``t``.
    """

    expressions: list
    log_prob: np.ndarray
    actions: np.ndarray
    alive: np.ndarray
    masks: np.ndarray
    parent_ids: np.ndarray
    sibling_ids: np.ndarray
    cache: dict
    relaxed: np.ndarray

    def __len__(self):
        return len(self.expressions)

    @property
    def lengths(self) -> np.ndarray:
        return self.alive.sum(axis=0)


class PolicyModel:
    """LSTM policy over the tokens of ``library``.

    Parameters
    ----------
    library : Library
        Token set; its order fixes the output layout.
    hidden : int
        LSTM units.
    embed : int
        Embedding width for each of parent and sibling.
    seed : int or None
        Initialization seed; ``None`` gives all-zero parameters (a
        uniform policy over unmasked tokens).
    """

    def __init__(self, library: Library, hidden: int = 32, embed: int = 8,
                 seed: int | None = 0, min_length: int = MIN_LENGTH,
                 max_length: int = MAX_LENGTH):
        self.library = library
        self.tokens = library.tokens
        self.hidden = hidden
        self.embed = embed
        self.min_length = min_length
        self.max_length = max_length
        V, H, E = len(self.tokens), hidden, embed
        shapes = {
            "emb_parent": (V + 1, E),
            "emb_sibling": (V + 1, E),
            "W": (4 * H, 2 * E + H),
            "b": (4 * H,),
            "W_out": (V, H),
            "b_out": (V,),
        }
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in shapes.items():
            if seed is None or name in ("b", "b_out"):
                self.params[name] = np.zeros(shape)
            else:
                self.params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
        self._index = {t: k for k, t in enumerate(self.tokens)}

    @property
    def empty_id(self) -> int:
        return len(self.tokens)

    # -- flat views (checkpoints, finite differences) --

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, flat) -> None:
        pos = 0
        for k in PARAM_NAMES:
            size = self.params[k].size
            self.params[k] = np.asarray(flat[pos:pos + size], dtype=float).reshape(
                self.params[k].shape).copy()
            pos += size

    @staticmethod
    def flatten(grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in PARAM_NAMES])

    # -- forward --

    def _ids(self, state: TraversalState) -> tuple[int, int]:
        p = self.empty_id if state.parent is None else self._index[state.parent]
        s = self.empty_id if state.sibling is None else self._index[state.sibling]
        return p, s

    def rollout(self, n: int, rng: np.random.Generator | None = None,
                forced: list | None = None) -> Rollouts:
        """Sample ``n`` sequences, or replay ``forced`` token sequences.

        When replaying, the given tokens are used instead of sampling, so
        the returned log-probabilities are those of the current
        parameters.
        """
        P = self.params
        V, H = len(self.tokens), self.hidden
        if forced is not None:
            n = len(forced)
            forced_ids = [[self._index[t] for t in seq] for seq in forced]
        states = [TraversalState() for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        h = np.zeros((n, H))
        c = np.zeros((n, H))
        steps = {k: [] for k in ("x", "h_prev", "c_prev", "i", "f", "g", "o",
                                 "c", "tanh_c", "h", "probs")}
        actions, alive, masks, pids, sids, relaxed_steps = [], [], [], [], [], []
        log_prob = np.zeros(n)
        t = 0
        while not done.all():
            ids = np.array([self._ids(s) for s in states])
            pid, sid = ids[:, 0], ids[:, 1]
            x = np.concatenate([P["emb_parent"][pid], P["emb_sibling"][sid]], axis=1)
            z = np.concatenate([x, h], axis=1) @ P["W"].T + P["b"]
            ig = _sigmoid(z[:, :H])
            fg = _sigmoid(z[:, H:2 * H])
            gg = np.tanh(z[:, 2 * H:3 * H])
            og = _sigmoid(z[:, 3 * H:])
            c_new = fg * c + ig * gg
            tanh_c = np.tanh(c_new)
            h_new = og * tanh_c
            logits = h_new @ P["W_out"].T + P["b_out"]
            mask = np.ones((n, V), dtype=bool)
            relaxed = np.zeros(n, dtype=bool)
            for i in np.flatnonzero(~done):
                mask[i], relaxed[i] = constraint_mask(
                    states[i], self.library, self.min_length, self.max_length,
                    return_flag=True)
            logits = np.where(mask, logits, -np.inf)
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            if forced is not None:
                act = np.array([seq[t] if t < len(seq) else 0 for seq in forced_ids])
            else:
                u = rng.random(n)
                cdf = np.cumsum(probs, axis=1)
                act = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), V - 1)
                # never pick a masked token through rounding at the top end
                bad = ~mask[np.arange(n), act]
                for i in np.flatnonzero(bad):
                    act[i] = np.flatnonzero(mask[i])[-1]
            live = ~done
            with np.errstate(divide="ignore"):
                lp = np.log(probs[np.arange(n), act])
            log_prob[live] += lp[live]
            for k, v in (("x", x), ("h_prev", h), ("c_prev", c), ("i", ig), ("f", fg),
                         ("g", gg), ("o", og), ("c", c_new), ("tanh_c", tanh_c),
                         ("h", h_new), ("probs", probs)):
                steps[k].append(v)
            actions.append(act)
            alive.append(live)
            masks.append(mask)
            pids.append(pid)
            sids.append(sid)
            relaxed_steps.append(relaxed & live)
            for i in np.flatnonzero(live):
                states[i] = traversal_step(states[i], self.tokens[act[i]])
                if states[i].complete:
                    done[i] = True
            if forced is not None:
                for i in np.flatnonzero(live):
                    if t + 1 >= len(forced_ids[i]) and not done[i]:
                        raise ValueError(f"forced sequence {i} is incomplete")
            h, c = h_new, c_new
            t += 1
        exprs = [Expression(s.tokens) for s in states]
        cache = {k: np.stack(v) for k, v in steps.items()}
        return Rollouts(exprs, log_prob, np.stack(actions), np.stack(alive),
                        np.stack(masks), np.stack(pids), np.stack(sids), cache,
                        np.stack(relaxed_steps).any(axis=0))

    def sample(self, n: int, rng: np.random.Generator) -> Rollouts:
        return self.rollout(n, rng)

    def log_prob(self, sequences) -> np.ndarray:
        """Log-probability of each token sequence under the current parameters."""
        return self.rollout(0, forced=[tuple(s) for s in sequences]).log_prob

    # -- backward --

    def backward(self, batch: Rollouts, seq_weights, entropy_weight: float = 0.0) -> dict:
        """Gradient of ``sum_i w_i log p(tau_i) + entropy_weight * mean step entropy``.

        The entropy term averages the categorical entropy over every
        live step of every sequence in the batch.
        """
        P = self.params
        H = self.hidden
        C = batch.cache
        T, n = batch.actions.shape
        w = np.asarray(seq_weights, dtype=float)
        alive = batch.alive.astype(float)
        n_steps = alive.sum()
        probs = C["probs"]
        # d objective / d logits for every step
        dlogits = -probs * w[None, :, None]
        dlogits[np.arange(T)[:, None], np.arange(n)[None, :], batch.actions] += w[None, :]
        if entropy_weight:
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(probs > 0, np.log(probs), 0.0)
            ent = -(probs * logp).sum(axis=2, keepdims=True)
            dlogits += (entropy_weight / n_steps) * (-probs * (logp + ent))
        dlogits *= alive[:, :, None]

        g = {k: np.zeros_like(v) for k, v in P.items()}
        g["W_out"] = np.einsum("tnv,tnh->vh", dlogits, C["h"])
        g["b_out"] = dlogits.sum(axis=(0, 1))
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        E = self.embed
        Wx = P["W"]
        for t in range(T - 1, -1, -1):
            dh = dlogits[t] @ P["W_out"] + dh_next
            o, tc = C["o"][t], C["tanh_c"][t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            i_, f_, g_ = C["i"][t], C["f"][t], C["g"][t]
            dz = np.concatenate([
                dc * g_ * i_ * (1.0 - i_),
                dc * C["c_prev"][t] * f_ * (1.0 - f_),
                dc * i_ * (1.0 - g_ * g_),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            inp = np.concatenate([C["x"][t], C["h_prev"][t]], axis=1)
            g["W"] += dz.T @ inp
            g["b"] += dz.sum(axis=0)
            dinp = dz @ Wx
            np.add.at(g["emb_parent"], batch.parent_ids[t], dinp[:, :E])
            np.add.at(g["emb_sibling"], batch.sibling_ids[t], dinp[:, E:2 * E])
            dh_next = dinp[:, 2 * E:]
            dc_next = dc * f_
        return g

    def mean_entropy(self, batch: Rollouts) -> float:
        probs = batch.cache["probs"]
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(probs > 0, np.log(probs), 0.0)
        ent = -(probs * logp).sum(axis=2)
        return float((ent * batch.alive).sum() / batch.alive.sum())

    # -- serialization --

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "n_vars": self.library.n_vars,
            "use_const": self.library.use_const,
            "hidden": self.hidden,
            "embed": self.embed,
            "min_length": self.min_length,
            "max_length": self.max_length,
            "params": {k: self.params[k].tolist() for k in PARAM_NAMES},
        }

    @classmethod
    def from_json(cls, obj) -> "PolicyModel":
        lib = Library(obj["n_vars"], obj.get("use_const", True))
        m = cls(lib, obj["hidden"], obj["embed"], None, obj["min_length"], obj["max_length"])
        for k in PARAM_NAMES:
            m.params[k] = np.asarray(obj["params"][k], dtype=float)
        return m


# -- estimators -------------------------------------------------------------


def empirical_quantile(rewards, eps: float) -> float:
    """The ``(1 - eps)`` order statistic: 1-based index ``ceil((1 - eps) N)``.

    >>> empirical_quantile([0.1 * k for k in range(1, 11)], 0.2)
    0.8
    """
    r = np.sort(np.asarray(rewards, dtype=float))
    if not len(r):
        raise ValueError("empty reward vector")
    # round first so that e.g. 0.95 * 1000 is exactly 950
    k = math.ceil(round((1.0 - eps) * len(r), 9))
    return float(r[min(max(k, 1), len(r)) - 1])


def risk_seeking_weights(rewards, eps: float, quantile: float | None = None) -> np.ndarray:
    """Per-sequence factors ``(R - Q) 1[R > Q] / (eps N)``."""
    r = np.asarray(rewards, dtype=float)
    q = empirical_quantile(r, eps) if quantile is None else quantile
    return np.where(r > q, r - q, 0.0) / (eps * len(r))


def risk_seeking_gradient(model: PolicyModel, batch: Rollouts, rewards, eps: float,
                          quantile: float | None = None) -> dict:
    """Monte Carlo estimate of the gradient of the risk-seeking objective."""
    return model.backward(batch, risk_seeking_weights(rewards, eps, quantile), 0.0)


def entropy_gradient(model: PolicyModel, batch: Rollouts, weight: float) -> dict:
    """Gradient of ``weight`` times the mean per-step entropy of the batch."""
    return model.backward(batch, np.zeros(len(batch)), weight)
