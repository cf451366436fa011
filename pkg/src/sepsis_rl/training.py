"""Representation learning: encoder + decoder trained to predict the next time-variant features."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cohort import Cohort, FeatureSchema, Trajectory, make_batches
from .encoders import (
    LATENT_DIM,
    AEEncoder,
    Decoder,
    GNNEncoder,
    SnapshotBatch,
    make_encoder,
    one_hot_rows,
    previous_actions_onehot,
)
from .errors import ConfigError, DataError, DivergenceError
from .layers import Module
from .numerics import Adam, Tensor

log = logging.getLogger(__name__)

ENCODER_VARIANTS = ("ae", "sage", "gatv2")


@dataclass(frozen=True)
class ReprTrainConfig:
    variant: str = "sage"
    epochs: int | None = None  # None: 600 for ae, 200 for gnn
    lr: float | None = None  # None: 5e-4 for ae, 1e-3 for gnn
    batch_size: int = 128
    validation_period: int = 10
    action_injection: bool = True
    seed: int = 1234
    f_out: int | None = None
    n_conv: int | None = None
    latent_dim: int = LATENT_DIM

    def resolved(self) -> "ReprTrainConfig":
        if self.variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        ae = self.variant == "ae"
        cfg = replace(
            self,
            epochs=self.epochs if self.epochs is not None else (600 if ae else 200),
            lr=self.lr if self.lr is not None else (5e-4 if ae else 1e-3),
            f_out=None if ae else (self.f_out or 64),
            n_conv=None if ae else (self.n_conv or (2 if self.variant == "sage" else 1)),
        )
        if cfg.epochs <= 0 or cfg.batch_size < 1 or cfg.validation_period < 1:
            raise ConfigError("epochs, batch_size and validation_period must be positive")
        if cfg.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        return cfg

    @property
    def mode(self) -> str:
        return "ae" if self.variant == "ae" else "gnn"


@dataclass
class LossCurve:
    train: list[tuple[int, float]] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)

    def smoothed_val(self, window: int = 10) -> list[float]:
        """Trailing running average over up to ``window`` validation points."""
        vals = [v for _, v in self.val]
        return [float(np.mean(vals[max(0, i - window + 1) : i + 1])) for i in range(len(vals))]

    def to_jsonl(self) -> str:
        rows = [{"phase": "train", "epoch": e, "loss": v} for e, v in self.train]
        rows += [{"phase": "val", "epoch": e, "loss": v} for e, v in self.val]
        rows.sort(key=lambda r: (r["epoch"], r["phase"] != "train"))
        return "".join(json.dumps(r) + "\n" for r in rows)


@dataclass
class TrainResult:
    encoder: Module
    decoder: Decoder
    best_encoder_state: dict
    best_decoder_state: dict
    best_epoch: int
    best_val_loss: float
    curve: LossCurve
    config: ReprTrainConfig

    def best_models(self) -> tuple[Module, Decoder]:
        enc, dec = build_models(self.config, *self._dims())
        enc.load_state_dict(self.best_encoder_state)
        dec.load_state_dict(self.best_decoder_state)
        return enc, dec

    def _dims(self):
        c = self.encoder.config
        if c["variant"] == "ae":
            return c["obs_dim"], 0, self.decoder.config["obs_dim"]
        return c["n_invariant"], c["n_variant"], self.decoder.config["obs_dim"]


def build_models(config: ReprTrainConfig, n_invariant: int, n_variant: int, obs_dim: int,
                 seed: int | None = None) -> tuple[Module, Decoder]:
    """Fresh encoder/decoder pair; weights drawn from a generator seeded by ``seed``."""
    config = config.resolved()
    rng = np.random.default_rng([config.seed if seed is None else seed, 17])
    enc = make_encoder(config.variant, n_invariant, n_variant, rng, config.f_out, config.n_conv,
                       config.latent_dim)
    dec = Decoder(obs_dim, config.latent_dim, rng, config.action_injection)
    return enc, dec


# --------------------------------------------------------------- batch loss


def encode_steps(encoder: Module, trajs: Sequence[Trajectory], last: bool = False) -> Tensor:
    """Latents for steps 1..T-1 of each trajectory (1..T when ``last``), stacked in order."""
    if isinstance(encoder, GNNEncoder):
        prefixes = [range(1, t.T + (1 if last else 0)) for t in trajs]
        return encoder(SnapshotBatch.from_trajectories(trajs, prefixes))
    if isinstance(encoder, AEEncoder):
        stop = 0 if last else -1
        obs = np.concatenate([t.observations()[: t.T + stop] for t in trajs])
        prev = np.concatenate([previous_actions_onehot(t)[: t.T + stop] for t in trajs])
        return encoder(obs, prev)
    raise ConfigError(f"unsupported encoder {type(encoder).__name__}")


def batch_loss(encoder: Module, decoder: Decoder, trajs: Sequence[Trajectory],
               schema: FeatureSchema) -> Tensor:
    """Sum over trajectories of the per-step next-feature losses.

    Step t predicts c_{t+1}; the final step has no target and is skipped.
    """
    usable = [t for t in trajs if t.T >= 2]
    if not usable:
        raise DataError("batch has no trajectory with a next step to predict")
    cols = schema.target_indices()
    latent = encode_steps(encoder, usable)
    next_actions = one_hot_rows(np.concatenate([t.actions[:-1] for t in usable]))
    targets = np.concatenate([t.steps[1:, cols] for t in usable])
    pred = decoder(latent, next_actions if decoder.action_injection else None)
    return nx.gaussian_nll_unit_var(pred, targets)


def evaluate_loss(encoder, decoder, cohort: Cohort, schema: FeatureSchema, batch_size: int = 128) -> float:
    """Average trajectory loss over fixed-order batches (no shuffling, no gradients)."""
    trajs = list(cohort.trajectories)
    losses = []
    for i in range(0, len(trajs), batch_size):
        chunk = trajs[i : i + batch_size]
        losses.append(batch_loss(encoder, decoder, chunk, schema).item() / len(chunk))
    return float(np.mean(losses))


# -------------------------------------------------------------------- train


def train_autoencoder(train: Cohort, val: Cohort, config: ReprTrainConfig,
                      encoder: Module | None = None, decoder: Decoder | None = None) -> TrainResult:
    """Adam on the mean trajectory loss of each batch; validation every ``validation_period`` epochs.

    The reported unit is the average trajectory loss: each batch loss (sum of
    trajectory losses) divided by the batch's actual size, averaged over batches.
    Validation also runs once before the first update (epoch 0).
    """
    config = config.resolved()
    schema = train.schema.with_mode(config.mode)
    ni, nv = len(train.schema.invariant_names), len(train.schema.variant_names)
    if encoder is None or decoder is None:
        encoder, decoder = build_models(config, ni, nv, schema.obs_dim)
    params = encoder.params() + decoder.params()
    opt = Adam(params, lr=config.lr)
    curve = LossCurve()

    def validate(epoch):
        v = evaluate_loss(encoder, decoder, val, schema, config.batch_size)
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        curve.val.append((epoch, v))
        return v

    best_val = validate(0)
    best_epoch = 0
    best_enc, best_dec = encoder.state_dict(), decoder.state_dict()
    for epoch in range(1, config.epochs + 1):
        batch_means = []
        for k, batch in enumerate(make_batches(train, config.batch_size, config.seed, epoch)):
            opt.zero_grad()
            loss = batch_loss(encoder, decoder, batch.trajectories, schema)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {k} "
                                      f"(lr={config.lr}, variant={config.variant})")
            (loss / len(batch)).backward()
            opt.step()
            batch_means.append(value / len(batch))
        curve.train.append((epoch, float(np.mean(batch_means))))
        if epoch % config.validation_period == 0 or epoch == config.epochs:
            v = validate(epoch)
            if v < best_val:
                best_val, best_epoch = v, epoch
                best_enc, best_dec = encoder.state_dict(), decoder.state_dict()
            log.info("epoch %d train %.4f val %.4f", epoch, curve.train[-1][1], v)
    return TrainResult(encoder, decoder, best_enc, best_dec, best_epoch, best_val, curve, config)


# -------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    best: ReprTrainConfig
    runs: list[tuple[ReprTrainConfig, TrainResult]]

    def summary_rows(self) -> list[dict]:
        rows = []
        for cfg, res in self.runs:
            rows.append({
                "variant": cfg.variant, "f_out": cfg.f_out, "n_conv": cfg.n_conv,
                "final_train_loss": res.curve.train[-1][1],
                "final_val_loss": res.curve.val[-1][1],
                "final_smoothed_val_loss": res.curve.smoothed_val()[-1],
                "best_epoch": res.best_epoch,
                "selected": cfg == self.best,
            })
        return rows


def run_sweep(grid: Sequence[tuple[int, int]], base: ReprTrainConfig, train: Cohort, val: Cohort) -> SweepResult:
    """Train one model per (f_out, n_conv); the lowest final smoothed validation loss wins.

    Ties go to the smaller f_out, then the smaller n_conv.
    """
    if not grid:
        raise ConfigError("empty sweep grid")
    runs = []
    for f_out, n_conv in grid:
        cfg = replace(base, f_out=f_out, n_conv=n_conv).resolved()
        runs.append((cfg, train_autoencoder(train, val, cfg)))
    best_cfg, _ = min(runs, key=lambda r: (r[1].curve.smoothed_val()[-1], r[0].f_out, r[0].n_conv))
    return SweepResult(best_cfg, runs)


# ---------------------------------------------------------------- encoding


@dataclass
class LatentTrajectory:
    id: str
    latents: np.ndarray  # (T, l)
    actions: np.ndarray  # (T,)
    reward: int

    @property
    def T(self) -> int:
        return len(self.actions)

    def rewards(self) -> np.ndarray:
        r = np.zeros(self.T)
        r[-1] = self.reward
        return r

    def dones(self) -> np.ndarray:
        d = np.zeros(self.T, dtype=bool)
        d[-1] = True
        return d


@dataclass
class Transitions:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.a)


@dataclass
class LatentDataset:
    trajectories: list[LatentTrajectory]

    def __len__(self) -> int:
        return len(self.trajectories)

    def transitions(self) -> Transitions:
        """(l_t, a_t, r_t, l_{t+1}, done); the terminal transition repeats l_T as next state."""
        s, a, r, s2, d = [], [], [], [], []
        for tr in self.trajectories:
            s.append(tr.latents)
            a.append(tr.actions)
            r.append(tr.rewards())
            s2.append(np.concatenate([tr.latents[1:], tr.latents[-1:]]))
            d.append(tr.dones())
        return Transitions(np.concatenate(s), np.concatenate(a).astype(np.int64), np.concatenate(r),
                           np.concatenate(s2), np.concatenate(d))

    def merged(self, other: "LatentDataset") -> "LatentDataset":
        return LatentDataset(self.trajectories + other.trajectories)


def encode_dataset(cohort: Cohort, encoder: Module, chunk: int = 128) -> LatentDataset:
    """Encode every step of every trajectory: snapshot g_t (GNN) or (o_t, a_{t-1}) (AE)."""
    expected = (len(cohort.schema.invariant_names), len(cohort.schema.variant_names))
    cfg = encoder.config
    if isinstance(encoder, GNNEncoder) and (cfg["n_invariant"], cfg["n_variant"]) != expected:
        raise DataError(f"encoder expects {cfg['n_invariant']}+{cfg['n_variant']} features, cohort has {expected}")
    if isinstance(encoder, AEEncoder) and cfg["obs_dim"] != sum(expected):
        raise DataError(f"encoder expects {cfg['obs_dim']} features, cohort has {sum(expected)}")
    out = []
    trajs = list(cohort.trajectories)
    for i in range(0, len(trajs), chunk):
        part = trajs[i : i + chunk]
        lat = encode_steps(encoder, part, last=True).data
        offsets = np.cumsum([0] + [t.T for t in part])
        for k, t in enumerate(part):
            out.append(LatentTrajectory(t.id, lat[offsets[k] : offsets[k + 1]].copy(), t.actions.copy(), t.reward))
    return LatentDataset(out)


def untrained_encoder(variant: str, cohort: Cohort, seed: int, **kw) -> Module:
    """Randomly initialized encoder for policy training without representation learning."""
    cfg = ReprTrainConfig(variant=variant, seed=seed, **kw)
    enc, _ = build_models(cfg, len(cohort.schema.invariant_names), len(cohort.schema.variant_names),
                          cohort.schema.with_mode(cfg.mode).obs_dim)
    return enc
