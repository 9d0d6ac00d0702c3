"""Risk-seeking policy-gradient search for a parameter formula.

Each iteration samples a batch of expressions, fits their constants,
scores them on the training rows, and moves the policy toward the
batch's top ``eps`` fraction, plus an entropy bonus.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .expr import (Expression, Library, check_constraints, eval_batch, from_json,
                   nrmse, optimize_constants, reward, serialize, to_json)
from .policy import PolicyModel, empirical_quantile, risk_seeking_weights

__all__ = ["TrainConfig", "TrainTrace", "TrainResult", "train", "PRESETS",
           "save_checkpoint", "load_checkpoint"]

log = logging.getLogger(__name__)

# reward treated as an exact fit (NRMSE below about 1e-12)
EXACT_REWARD = 1.0 - 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    total_samples: int = 2_000_000
    eps: float = 0.05
    learning_rate: float = 0.0005
    entropy_weight: float = 0.03
    seed: int = 0
    hidden: int = 32
    embed: int = 8
    min_length: int = 4
    max_length: int = 64
    # "sgd": theta += lr * g, as written; "adam": same step size, Adam moments
    optimizer: str = "sgd"
    # "all" fits constants of every sample; "elite" only of the top 2*eps share
    const_opt: str = "all"
    const_max_iter: int = 200
    # stop as soon as the best reward reaches this (None: use the full budget)
    stop_reward: float | None = EXACT_REWARD

    def __post_init__(self):
        if self.batch_size < 1 or self.total_samples < self.batch_size:
            raise ValueError("need 1 <= batch_size <= total_samples")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.const_opt not in ("all", "elite"):
            raise ValueError(f"unknown const_opt {self.const_opt!r}")

    @property
    def iterations(self) -> int:
        return self.total_samples // self.batch_size

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        return cls(**obj)


PRESETS = {
    "paper": TrainConfig(),
    "desk": TrainConfig(batch_size=200, total_samples=100_000, optimizer="adam"),
}


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    FIELDS = ("iter", "best_R", "mean_R", "quantile", "best_expr_infix")

    def append(self, it, best_r, mean_r, q, best_infix):
        self.rows.append((it, best_r, mean_r, q, best_infix))

    def best_rewards(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for it, b, m, q, s in self.rows:
                w.writerow([it, repr(b), repr(m), repr(q), s])

    @classmethod
    def read_csv(cls, path) -> "TrainTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls([(int(a), float(b), float(c), float(d), e) for a, b, c, d, e in rows])


@dataclass
class TrainResult:
    best: Expression
    best_reward: float
    test_reward: float | None
    test_nrmse: float | None
    trace: TrainTrace
    model: PolicyModel
    samples: int
    seconds: float
    # sampling generator state after the last batch, for checkpoints
    rng_state: dict | None = None


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, g):
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


class _Scorer:
    """Fits constants and scores expressions, caching by token sequence."""

    def __init__(self, X, y, max_iter):
        self.X, self.y, self.max_iter = X, y, max_iter
        self.cache: dict[tuple, tuple[float, Expression]] = {}

    def raw(self, e: Expression) -> float:
        return reward(e, self.X, self.y)

    def fitted(self, e: Expression) -> tuple[float, Expression]:
        hit = self.cache.get(e.tokens)
        if hit is None:
            try:
                fit = optimize_constants(e, self.X, self.y, self.max_iter)
                hit = (reward(fit, self.X, self.y), fit)
            except (ValueError, ArithmeticError) as exc:
                log.debug("scoring %s failed: %s", e.tokens, exc)
                hit = (0.0, e)
            self.cache[e.tokens] = hit
        return hit


def train(X, y, cfg: TrainConfig | None = None, X_test=None, y_test=None,
          callback=None) -> TrainResult:
    """Search for an expression mapping rows of ``X`` to ``y``.

    Parameters
    ----------
    X, y : array_like
        Training features ``(n, d)`` and targets ``(n,)``.
    cfg : TrainConfig
        Batch size, budget, risk factor and optimizer settings.
    X_test, y_test : array_like, optional
        Held-out rows on which the final best expression is scored.
    callback : callable, optional
        Called as ``callback(iteration, trace_row)`` after every batch.
    """
    cfg = cfg or PRESETS["desk"]
    t0 = time.perf_counter()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) != len(y) or len(y) < 2:
        raise ValueError("need at least two matching rows")
    lib = Library(X.shape[1])
    model = PolicyModel(lib, cfg.hidden, cfg.embed, cfg.seed, cfg.min_length, cfg.max_length)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    scorer = _Scorer(X, y, cfg.const_max_iter)
    adam = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    trace = TrainTrace()
    best_r, best_e = -1.0, None
    samples = 0
    for it in range(cfg.iterations):
        batch = model.sample(cfg.batch_size, rng)
        samples += len(batch)
        rewards, fitted = _score_batch(batch.expressions, scorer, cfg)
        q = empirical_quantile(rewards, cfg.eps)
        k = int(np.argmax(rewards))
        if rewards[k] > best_r:
            best_r, best_e = float(rewards[k]), fitted[k]
        w = risk_seeking_weights(rewards, cfg.eps, q)
        g = model.flatten(model.backward(batch, w, cfg.entropy_weight))
        step = adam.step(g) if adam else cfg.learning_rate * g
        model.set_flat(model.get_flat() + step)
        trace.append(it, best_r, float(np.mean(rewards)), q, serialize(best_e))
        if callback is not None:
            callback(it, trace.rows[-1])
        if cfg.stop_reward is not None and best_r >= cfg.stop_reward:
            break
    bad = check_constraints(best_e, cfg.min_length, cfg.max_length)
    if bad:
        raise AssertionError(f"best expression breaks sampling rules: {bad}")
    test_r = test_err = None
    if X_test is not None and len(y_test) >= 2:
        test_r = reward(best_e, X_test, y_test)
        test_err = nrmse(y_test, eval_batch(best_e, X_test))
    return TrainResult(best_e, best_r, test_r, test_err, trace, model, samples,
                       time.perf_counter() - t0, rng.bit_generator.state)


def _score_batch(exprs, scorer: _Scorer, cfg: TrainConfig):
    n = len(exprs)
    rewards = np.zeros(n)
    fitted = list(exprs)
    if cfg.const_opt == "all":
        todo = range(n)
    else:
        raw = np.array([scorer.raw(e) for e in exprs])
        rewards[:] = raw
        cut = empirical_quantile(raw, min(1.0, 2 * cfg.eps))
        todo = [i for i in range(n) if raw[i] >= cut or exprs[i].tokens in scorer.cache]
    for i in todo:
        rewards[i], fitted[i] = scorer.fitted(exprs[i])
    return rewards, fitted


def save_checkpoint(path, result: TrainResult, cfg: TrainConfig, extra=None) -> None:
    obj = {
        "config": cfg.to_json(),
        "expression": to_json(result.best),
        "best_reward": result.best_reward,
        "test_reward": result.test_reward,
        "test_nrmse": None if result.test_nrmse is None or not math.isfinite(result.test_nrmse)
        else result.test_nrmse,
        "samples": result.samples,
        "model": result.model.to_json(),
        "rng_state": result.rng_state,
    }
    if extra:
        obj.update(extra)
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Expression, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    return from_json(obj["expression"]), obj
