"""Behavior cloning on raw observations and discrete batch-constrained Q-learning on latents."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .cohort import N_ACTIONS, Cohort
from .errors import ConfigError, DivergenceError
from .layers import MLP, BatchNorm1d, Linear, Module
from .numerics import Adam, Tensor, no_grad
from .training import Transitions

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-6


# ------------------------------------------------------------ behavior cloning


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 5000
    lr: float = 1e-4
    weight_decay: float = 0.1
    batch_size: int = 128
    seed: int = 1234

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid behavior-cloning config {self}")


class BehaviorPolicy(Module):
    """(obs, 128) -> BN -> ReLU -> (128, 128) -> BN -> ReLU -> (128, 25) logits.

    The output layer starts at zero, so the untrained policy is uniform.
    """

    kind = "bc"

    def __init__(self, obs_dim: int = 38, hidden: int = 128, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(obs_dim, hidden, rng)
        self.bn1 = BatchNorm1d(hidden)
        self.fc2 = Linear(hidden, hidden, rng)
        self.bn2 = BatchNorm1d(hidden)
        self.fc3 = Linear(hidden, N_ACTIONS, rng)
        self.fc3.W.data[...] = 0.0
        self.config = {"obs_dim": obs_dim, "hidden": hidden}

    def train_mode(self, on: bool = True) -> None:
        self.bn1.training = self.bn2.training = on

    def __call__(self, obs) -> Tensor:
        h = nx.relu(self.bn1(self.fc1(obs)))
        h = nx.relu(self.bn2(self.fc2(h)))
        return self.fc3(h)


def bc_dataset(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """Stacked raw (invariant ⊕ variant) observations and the logged actions."""
    obs = np.concatenate([t.observations() for t in cohort.trajectories])
    actions = np.concatenate([t.actions for t in cohort.trajectories]).astype(np.int64)
    return obs, actions


def train_behavior_cloning(obs: np.ndarray, actions: np.ndarray, config: BcConfig = BcConfig(),
                           on_epoch: Callable[[int, float], None] | None = None) -> BehaviorPolicy:
    """Cross-entropy with Adam (coupled L2 weight decay); returns the model in eval mode."""
    config.validate()
    obs = np.asarray(obs, dtype=float)
    actions = np.asarray(actions, dtype=np.int64)
    if len(np.unique(actions)) < 2:
        warnings.warn("behavior cloning on single-class data", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng([config.seed, 23])
    model = BehaviorPolicy(obs.shape[1], rng=rng)
    opt = Adam(model.params(), lr=config.lr, weight_decay=config.weight_decay)
    model.train_mode(True)
    n = len(obs)
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch, 29]).permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            if len(idx) < 2:  # batch statistics need two rows
                continue
            opt.zero_grad()
            loss = nx.cross_entropy(model(obs[idx]), actions[idx])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"behavior cloning loss is not finite at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    model.train_mode(False)
    return model


def bc_logits(model: BehaviorPolicy, obs: np.ndarray) -> np.ndarray:
    with no_grad():
        return model(np.atleast_2d(obs)).data


def floor_probs(p: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Add ``floor`` to every entry and renormalize, keeping all ratios finite."""
    return (p + floor) / (1.0 + N_ACTIONS * floor)


def bc_probs(obs: np.ndarray, model: BehaviorPolicy, floor: float = PROB_FLOOR) -> np.ndarray:
    """Behavior-policy distribution(s); a single observation gives a single row."""
    single = np.ndim(obs) == 1
    p = nx.softmax(bc_logits(model, obs)).data
    p = floor_probs(p, floor)
    return p[0] if single else p


def bc_accuracy(model: BehaviorPolicy, obs: np.ndarray, actions: np.ndarray) -> float:
    return float(np.mean(bc_logits(model, obs).argmax(axis=1) == actions))


# ---------------------------------------------------------------------- dBCQ


@dataclass(frozen=True)
class DbcqConfig:
    threshold: float = 0.3
    gamma: float = 0.99
    polyak: float = 0.01
    target_update_freq: int = 1
    lr: float = 1e-3
    iterations: int = 1_000_000
    eval_period: int = 500
    batch_size: int = 128
    hidden: int = 64
    huber_delta: float = 1.0
    seed: int = 1234

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("dBCQ threshold must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("discount must lie in (0, 1]")
        if not 0.0 < self.polyak <= 1.0 or self.target_update_freq < 1:
            raise ConfigError("polyak must lie in (0, 1] and target_update_freq >= 1")
        if self.iterations < 1 or self.eval_period < 1 or self.batch_size < 1:
            raise ConfigError("iterations, eval_period and batch_size must be positive")


DESK_DBCQ_ITERATIONS = 50_000


class DbcqAgent(Module):
    """Online Q-network, its Polyak-averaged target, and a latent behavior classifier."""

    kind = "dbcq"

    def __init__(self, latent_dim: int = 64, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q = MLP((latent_dim, hidden, hidden, N_ACTIONS), rng)
        self.q_target = MLP((latent_dim, hidden, hidden, N_ACTIONS), rng)
        self.q_target.copy_from(self.q)
        self.behavior = MLP((latent_dim, hidden, hidden, N_ACTIONS), rng)
        self.config = {"latent_dim": latent_dim, "hidden": hidden}

    def q_values(self, s: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.q(np.atleast_2d(s)).data

    def behavior_probs(self, s: np.ndarray) -> np.ndarray:
        with no_grad():
            return nx.softmax(self.behavior(np.atleast_2d(s))).data

    def eligible(self, s: np.ndarray, threshold: float) -> np.ndarray:
        return eligible_mask(self.behavior_probs(s), threshold)

    def act(self, s: np.ndarray, threshold: float) -> np.ndarray:
        return select_actions(self.q_values(s), self.behavior_probs(s), threshold)


def eligible_mask(behavior_probs: np.ndarray, threshold: float) -> np.ndarray:
    """Actions whose probability is at least ``threshold`` times the most likely one."""
    p = np.asarray(behavior_probs, dtype=float)
    return p / p.max(axis=-1, keepdims=True) >= threshold


def select_actions(q_values: np.ndarray, behavior_probs: np.ndarray, threshold: float) -> np.ndarray:
    """Row-wise constrained argmax; ties resolve to the lowest action index."""
    mask = eligible_mask(behavior_probs, threshold)
    return np.where(mask, np.asarray(q_values, dtype=float), -np.inf).argmax(axis=-1)


def dbcq_select_action(q_values: np.ndarray, behavior_probs: np.ndarray, threshold: float) -> int:
    return int(select_actions(np.asarray(q_values)[None], np.asarray(behavior_probs)[None], threshold)[0])


def bellman_targets(agent: DbcqAgent, r: np.ndarray, s_next: np.ndarray, done: np.ndarray,
                    config: DbcqConfig) -> np.ndarray:
    """y = r + (1 - done) * gamma * Q_target(s', a'), a' from the constrained online argmax."""
    a_next = agent.act(s_next, config.threshold)
    with no_grad():
        q_t = agent.q_target(s_next).data[np.arange(len(a_next)), a_next]
    return r + (1.0 - done.astype(float)) * config.gamma * q_t


class DbcqTrainer:
    """Owns the optimizers so that consecutive steps share Adam state."""

    def __init__(self, agent: DbcqAgent, config: DbcqConfig):
        config.validate()
        self.agent = agent
        self.config = config
        self.q_opt = Adam(agent.q.params(), lr=config.lr)
        self.b_opt = Adam(agent.behavior.params(), lr=config.lr)
        self.steps = 0

    def step(self, batch: Transitions) -> float:
        cfg, agent = self.config, self.agent
        y = bellman_targets(agent, batch.r, batch.s_next, batch.done, cfg)

        self.q_opt.zero_grad()
        q_sa = nx.pick(agent.q(batch.s), batch.a)
        td = nx.mean(nx.huber(q_sa - y, cfg.huber_delta))
        td_value = td.item()
        if not math.isfinite(td_value):
            raise DivergenceError(f"non-finite TD loss at step {self.steps}")
        td.backward()
        self.q_opt.step()

        self.b_opt.zero_grad()
        nx.cross_entropy(agent.behavior(batch.s), batch.a).backward()
        self.b_opt.step()

        self.steps += 1
        if self.steps % cfg.target_update_freq == 0:
            polyak_update(agent.q_target, agent.q, cfg.polyak)
        return td_value


def polyak_update(target: Module, online: Module, rate: float) -> None:
    for pt, po in zip(target.params(), online.params()):
        pt.data *= 1.0 - rate
        pt.data += rate * po.data


def dbcq_train_step(batch: Transitions, agent: DbcqAgent, config: DbcqConfig,
                    trainer: DbcqTrainer | None = None) -> float:
    """One update of Q, the behavior head and the target network; returns the TD loss."""
    trainer = trainer or DbcqTrainer(agent, config)
    return trainer.step(batch)


@dataclass
class DbcqResult:
    agent: DbcqAgent
    eval_iterations: list[int] = field(default_factory=list)
    eval_scores: list[float] = field(default_factory=list)
    td_losses: list[tuple[int, float]] = field(default_factory=list)


def sample_batch(pool: Transitions, rng: np.random.Generator, size: int) -> Transitions:
    idx = rng.integers(0, len(pool), size=size)
    return Transitions(pool.s[idx], pool.a[idx], pool.r[idx], pool.s_next[idx], pool.done[idx])


def dbcq_train(pool: Transitions, config: DbcqConfig,
               evaluator: Callable[[DbcqAgent], float] | None = None,
               td_log_every: int | None = None) -> DbcqResult:
    """Uniform-with-replacement minibatches; ``evaluator`` runs every ``eval_period`` iterations."""
    config.validate()
    rng = np.random.default_rng([config.seed, 31])
    agent = DbcqAgent(pool.s.shape[1], config.hidden, rng)
    trainer = DbcqTrainer(agent, config)
    result = DbcqResult(agent)
    td_log_every = td_log_every or config.eval_period
    window = []
    for it in range(1, config.iterations + 1):
        window.append(trainer.step(sample_batch(pool, rng, config.batch_size)))
        if it % td_log_every == 0:
            result.td_losses.append((it, float(np.mean(window))))
            window = []
        if evaluator is not None and it % config.eval_period == 0:
            score = float(evaluator(agent))
            result.eval_iterations.append(it)
            result.eval_scores.append(score)
            log.info("iteration %d wis %.4f", it, score)
    return result
