"""Off-policy evaluation with weighted importance sampling, and curve post-processing."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import N_ACTIONS, Cohort
from .errors import ConfigError, DataError, NumericError
from .policy import BehaviorPolicy, DbcqAgent, bc_probs, eligible_mask
from .training import LatentDataset

log = logging.getLogger(__name__)

MEAN_TRAJECTORY_LENGTH = 13.3
RATIO_CLIP = (1e-4, 1e4)


@dataclass(frozen=True)
class EvalTrajectory:
    pi_e: np.ndarray  # evaluated-policy probability of each logged action
    pi_b: np.ndarray  # behavior probability of each logged action
    actions: np.ndarray
    reward: float

    @property
    def T(self) -> int:
        return len(self.actions)


def soften_policy(q_values: np.ndarray, eligible: np.ndarray, epsilon: float = 0.01) -> np.ndarray:
    """1 - epsilon on the best eligible action, epsilon / 24 on each of the others.

    Accepts a single row or a (n, 25) matrix.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError("epsilon must lie in [0, 1)")
    q = np.atleast_2d(np.asarray(q_values, dtype=float))
    mask = np.atleast_2d(np.asarray(eligible, dtype=bool))
    chosen = np.where(mask, q, -np.inf).argmax(axis=1)
    p = np.full(q.shape, epsilon / (N_ACTIONS - 1))
    p[np.arange(len(q)), chosen] = 1.0 - epsilon
    return p[0] if np.ndim(q_values) == 1 else p


def trajectory_weights(trajs: Sequence[EvalTrajectory], clip=RATIO_CLIP) -> np.ndarray:
    """Product of per-step ratios pi_e / pi_b, each clipped to ``clip``; computed in log space."""
    logs = np.empty(len(trajs))
    clipped = 0
    for n, tr in enumerate(trajs):
        if np.any(tr.pi_b <= 0):
            raise DataError("behavior probability must be positive")
        ratio = tr.pi_e / tr.pi_b
        if clip is not None:
            lo, hi = clip
            clipped += int(np.sum((ratio < lo) | (ratio > hi)))
            ratio = np.clip(ratio, lo, hi)
        logs[n] = np.sum(np.log(ratio))
    if clipped:
        log.debug("ratio clipping active on %d steps", clipped)
    return logs


def wis(trajs: Sequence[EvalTrajectory], gamma: float = 1.0, clip=RATIO_CLIP,
        discounted: bool = True) -> float:
    """Self-normalized importance-weighted mean of the (discounted) terminal returns."""
    if not trajs:
        raise DataError("WIS needs at least one trajectory")
    with np.errstate(divide="ignore"):
        log_w = trajectory_weights(trajs, clip)
    finite = log_w[np.isfinite(log_w)]
    if len(finite) == 0:
        raise NumericError("degenerate weights")
    # rescaling by the largest weight cancels in the ratio
    w = np.exp(log_w - finite.max())
    total = w.sum()
    if not total > 0:
        raise NumericError("degenerate weights")
    T = np.array([tr.T for tr in trajs])
    r = np.array([tr.reward for tr in trajs], dtype=float)
    G = r * (gamma ** (T - 1) if discounted else 1.0)
    return float(np.dot(w, G) / total)


def ema(series: Sequence[float], alpha: float = 0.1) -> list[float]:
    """s_0 = x_0; s_t = alpha * x_t + (1 - alpha) * s_{t-1}."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("alpha must lie in (0, 1]")
    if len(series) == 0:
        raise DataError("EMA of an empty series")
    out = [float(series[0])]
    for x in series[1:]:
        out.append(alpha * float(x) + (1.0 - alpha) * out[-1])
    return out


def aggregate_seeds(curves: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and population standard deviation across seeds."""
    if not curves:
        raise DataError("no curves to aggregate")
    lengths = {len(c) for c in curves}
    if len(lengths) != 1:
        raise DataError(f"ragged curves: lengths {sorted(lengths)}")
    arr = np.asarray(curves, dtype=float)
    return arr.mean(axis=0), arr.std(axis=0)


def normalize_loss(avg_trajectory_loss: float, obs_dim: int,
                   mean_length: float = MEAN_TRAJECTORY_LENGTH) -> float:
    """Average trajectory loss -> average loss per predicted feature per step."""
    if obs_dim <= 0:
        raise ConfigError("obs_dim must be positive")
    return avg_trajectory_loss / (mean_length * obs_dim)


# ------------------------------------------------------------------ evaluator


@dataclass(frozen=True)
class WisConfig:
    epsilon: float = 0.01
    gamma: float = 0.99
    discounted: bool = True
    clip: tuple[float, float] | None = RATIO_CLIP


class WisEvaluator:
    """Scores policies on a fixed test set.

    Behavior probabilities come from the cloned clinician policy on raw
    observations and are computed once; the evaluated policy acts on the
    aligned latent states.
    """

    def __init__(self, latents: LatentDataset, raw: Cohort, bc_model: BehaviorPolicy,
                 config: WisConfig = WisConfig(), threshold: float = 0.3):
        if [t.id for t in latents.trajectories] != raw.ids:
            raise DataError("latent and raw test sets are not aligned")
        for lt, rt in zip(latents.trajectories, raw.trajectories):
            if lt.T != rt.T or not np.array_equal(lt.actions, rt.actions):
                raise DataError(f"trajectory {rt.id}: latent and raw steps are not aligned")
        self.latents = latents
        self.config = config
        self.threshold = threshold
        self.lengths = np.array([t.T for t in raw.trajectories])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.actions = np.concatenate([t.actions for t in raw.trajectories]).astype(np.int64)
        self.rewards = np.array([t.reward for t in raw.trajectories], dtype=float)
        self.states = np.concatenate([t.latents for t in latents.trajectories])
        obs = np.concatenate([t.observations() for t in raw.trajectories])
        self.pi_b_full = bc_probs(obs, bc_model)
        self.pi_b = self.pi_b_full[np.arange(len(self.actions)), self.actions]

    def trajectories(self, pi_e_full: np.ndarray) -> list[EvalTrajectory]:
        pi_e = pi_e_full[np.arange(len(self.actions)), self.actions]
        return [
            EvalTrajectory(pi_e[a:b], self.pi_b[a:b], self.actions[a:b], self.rewards[n])
            for n, (a, b) in enumerate(zip(self.offsets[:-1], self.offsets[1:]))
        ]

    def score_probs(self, pi_e_full: np.ndarray) -> float:
        c = self.config
        return wis(self.trajectories(pi_e_full), c.gamma, c.clip, c.discounted)

    def policy_probs(self, agent: DbcqAgent) -> np.ndarray:
        q = agent.q_values(self.states)
        mask = eligible_mask(agent.behavior_probs(self.states), self.threshold)
        return soften_policy(q, mask, self.config.epsilon)

    def __call__(self, agent: DbcqAgent) -> float:
        return self.score_probs(self.policy_probs(agent))

    def uniform_score(self) -> float:
        return self.score_probs(np.full((len(self.actions), N_ACTIONS), 1.0 / N_ACTIONS))

    def behavior_score(self) -> float:
        return self.score_probs(self.pi_b_full)


def wis_evaluator(agent: DbcqAgent, bc_model: BehaviorPolicy, latents: LatentDataset, raw: Cohort,
                  config: WisConfig = WisConfig(), threshold: float = 0.3) -> float:
    return WisEvaluator(latents, raw, bc_model, config, threshold)(agent)


# ----------------------------------------------------------------- curves


@dataclass
class EvalCurve:
    iterations: list[int]
    per_seed: dict[int, list[float]] = field(default_factory=dict)
    alpha: float = 0.1

    def smoothed(self) -> dict[int, list[float]]:
        return {s: ema(v, self.alpha) for s, v in self.per_seed.items()}

    def mean_std(self) -> tuple[np.ndarray, np.ndarray]:
        return aggregate_seeds([self.smoothed()[s] for s in sorted(self.per_seed)])

    def to_csv(self) -> str:
        """``iteration, mean, std, seed_<k>...``; mean/std over EMA-smoothed series."""
        seeds = sorted(self.per_seed)
        mean, std = self.mean_std()
        smooth = self.smoothed()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "mean", "std", *(f"seed_{s}" for s in seeds)])
        for i, it in enumerate(self.iterations):
            w.writerow([it, repr(float(mean[i])), repr(float(std[i])),
                        *(repr(float(smooth[s][i])) for s in seeds)])
        return buf.getvalue()


def read_curve_csv(text: str) -> tuple[list[int], np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[:3] != ["iteration", "mean", "std"]:
        raise DataError("not a curve CSV: expected iteration, mean, std columns")
    cols = list(zip(*body)) if body else [[] for _ in header]
    its = [int(x) for x in cols[0]]
    seeds = {h: np.array(cols[k], dtype=float) for k, h in enumerate(header) if h.startswith("seed_")}
    return its, np.array(cols[1], dtype=float), np.array(cols[2], dtype=float), seeds


def plot_curves_svg(curves: dict[str, str], path, title: str = "WIS") -> None:
    """Mean line with a shaded ±1 std band per labelled curve CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "sepsis-rl"
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, text in curves.items():
        its, mean, std, _ = read_curve_csv(text)
        ax.plot(its, mean, label=label)
        ax.fill_between(its, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("training iteration")
    ax.set_ylabel("WIS (EMA α=0.1, mean ± population std over seeds)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
