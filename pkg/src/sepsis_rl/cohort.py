"""Patient trajectories: data model, CSV I/O, synthetic cohorts, splits, batches."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

N_ACTIONS = 25
MAX_STEPS = 20
WEIGHT_FEATURE = "Weight_kg"

DEFAULT_INVARIANT = ("gender", "age", "re_admission", "mechvent")

# 34 of the 43 candidate time-variant measurements. Both dose channels are kept
# because they carry the treatment history; the hepatic panel, BUN/creatinine and
# the cumulative in/out totals are left out.
DEFAULT_VARIANT = (
    "max_dose_vaso", "Weight_kg", "GCS", "HR", "SysBP", "MeanBP", "DiaBP", "RR",
    "Temp_C", "FiO2_1", "Potassium", "Sodium", "Chloride", "Glucose", "Magnesium",
    "Calcium", "Hb", "WBC_count", "Platelets_count", "PTT", "PT", "Arterial_pH",
    "paO2", "paCO2", "Arterial_BE", "HCO3", "Arterial_lactate", "SOFA", "SIRS",
    "Shock_Index", "PaO2_FiO2", "cumulated_balance", "SpO2", "input_4hourly",
)

# the full candidate list, for building custom schemas
ALL_VARIANT = DEFAULT_VARIANT[:-1] + (
    "BUN", "Creatinine", "SGOT", "SGPT", "Total_bili", "INR",
    "input_total", "input_4hourly", "output_total", "output_4hourly",
)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names split into time-invariant and time-variant groups.

    Trajectories are always stored in the ``gnn`` layout, where body weight is
    time-variant. The ``ae`` view moves weight into the invariant group, which
    only changes what the decoder has to predict.
    """

    invariant_names: tuple[str, ...] = DEFAULT_INVARIANT
    variant_names: tuple[str, ...] = DEFAULT_VARIANT
    encoder_mode: str = "gnn"

    def __post_init__(self):
        if self.encoder_mode not in ("gnn", "ae"):
            raise ConfigError(f"encoder_mode must be 'gnn' or 'ae', got {self.encoder_mode!r}")
        overlap = set(self.invariant_names) & set(self.variant_names)
        if overlap:
            raise ConfigError(f"feature names in both groups: {sorted(overlap)}")
        if len(set(self.invariant_names)) != len(self.invariant_names) or len(
            set(self.variant_names)
        ) != len(self.variant_names):
            raise ConfigError("duplicate feature names")

    @classmethod
    def default(cls, mode: str = "gnn") -> "FeatureSchema":
        return cls().with_mode(mode)

    @property
    def n_features(self) -> int:
        return len(self.invariant_names) + len(self.variant_names)

    def storage(self) -> "FeatureSchema":
        """The gnn-layout schema that trajectories are stored in."""
        if self.encoder_mode == "gnn":
            return self
        inv = tuple(n for n in self.invariant_names if n != WEIGHT_FEATURE)
        return FeatureSchema(inv, (*self.variant_names[:self._weight_slot], WEIGHT_FEATURE,
                                   *self.variant_names[self._weight_slot:]), "gnn")

    @property
    def _weight_slot(self) -> int:
        # position weight takes in the gnn-layout variant list
        order = [n for n in DEFAULT_VARIANT if n == WEIGHT_FEATURE or n in self.variant_names]
        return order.index(WEIGHT_FEATURE) if WEIGHT_FEATURE in order else 0

    def with_mode(self, mode: str) -> "FeatureSchema":
        base = self.storage()
        if mode == "gnn":
            return base
        if mode != "ae":
            raise ConfigError(f"unknown encoder mode {mode!r}")
        if WEIGHT_FEATURE not in base.variant_names:
            raise ConfigError(f"ae mode needs a {WEIGHT_FEATURE} feature")
        return FeatureSchema(
            (*base.invariant_names, WEIGHT_FEATURE),
            tuple(n for n in base.variant_names if n != WEIGHT_FEATURE),
            "ae",
        )

    def target_indices(self) -> np.ndarray:
        """Columns of the stored variant matrix that the decoder predicts."""
        stored = self.storage().variant_names
        return np.array([stored.index(n) for n in self.variant_names], dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        """Decoder output width: 34 for gnn, 33 for ae with the default names."""
        return len(self.variant_names)

    def csv_columns(self) -> list[str]:
        s = self.storage()
        return ["traj_id", "step", *s.invariant_names, *s.variant_names, "action", "reward"]

    def fingerprint(self) -> str:
        s = self.storage()
        text = "|".join(s.invariant_names) + "#" + "|".join(s.variant_names)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Trajectory:
    id: str
    invariant_obs: np.ndarray  # (|I|,)
    steps: np.ndarray  # (T, |T|) time-variant observations
    actions: np.ndarray  # (T,) ints in [0, 24]
    reward: int  # +1 survived, -1 died

    def __post_init__(self):
        T = len(self.steps)
        if not 1 <= T <= MAX_STEPS:
            raise DataError(f"trajectory {self.id}: length {T} outside [1, {MAX_STEPS}]")
        if len(self.actions) != T:
            raise DataError(f"trajectory {self.id}: {len(self.actions)} actions for {T} steps")
        if np.any((self.actions < 0) | (self.actions >= N_ACTIONS)):
            raise DataError(f"trajectory {self.id}: action outside [0, 24]")
        if self.reward not in (1, -1):
            raise DataError(f"trajectory {self.id}: reward must be +1 or -1")

    @property
    def T(self) -> int:
        return len(self.steps)

    def observations(self) -> np.ndarray:
        """(T, |I| + |T|) raw observation per step: invariant block then variant block."""
        inv = np.broadcast_to(self.invariant_obs, (self.T, len(self.invariant_obs)))
        return np.concatenate([inv, self.steps], axis=1)

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.id == other.id
            and self.reward == other.reward
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.invariant_obs, other.invariant_obs)
            and np.array_equal(self.steps, other.steps)
        )


@dataclass(frozen=True)
class QuartileEdges:
    """Three strictly increasing dose boundaries per drug."""

    vaso: tuple[float, float, float]
    fluid: tuple[float, float, float]

    def __post_init__(self):
        for name, e in (("vaso", self.vaso), ("fluid", self.fluid)):
            if len(e) != 3 or not (e[0] < e[1] < e[2]):
                raise DataError(f"{name} quartile edges must be 3 strictly increasing values, got {e}")


DEFAULT_EDGES = QuartileEdges((0.08, 0.22, 0.45), (50.0, 180.0, 530.0))


@dataclass(frozen=True)
class Cohort:
    schema: FeatureSchema
    trajectories: tuple[Trajectory, ...]
    quartile_edges: QuartileEdges = DEFAULT_EDGES

    def __post_init__(self):
        object.__setattr__(self, "schema", self.schema.storage())
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        ids = [t.id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise DataError("trajectory ids are not unique")
        ni, nv = len(self.schema.invariant_names), len(self.schema.variant_names)
        for t in self.trajectories:
            if t.invariant_obs.shape != (ni,) or t.steps.shape[1:] != (nv,):
                raise DataError(f"trajectory {t.id} does not conform to the schema")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def subset(self, trajectories: Iterable[Trajectory]) -> "Cohort":
        return replace(self, trajectories=tuple(trajectories))

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.trajectories]


@dataclass(frozen=True)
class Batch:
    trajectories: tuple[Trajectory, ...]

    def __len__(self) -> int:
        return len(self.trajectories)


# ---------------------------------------------------------------------- CSV


def _fmt(x: float) -> str:
    return repr(float(x))


def save_csv(cohort: Cohort, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cohort.schema.csv_columns())
        for traj in cohort.trajectories:
            inv = [_fmt(v) for v in traj.invariant_obs]
            for t in range(traj.T):
                reward = str(traj.reward) if t == traj.T - 1 else ""
                w.writerow([traj.id, t, *inv, *(_fmt(v) for v in traj.steps[t]),
                            int(traj.actions[t]), reward])


def load_csv(path, schema: FeatureSchema | None = None,
             edges: QuartileEdges = DEFAULT_EDGES) -> Cohort:
    """Read a cohort; every problem is reported with its line number."""
    schema = (schema or FeatureSchema()).storage()
    expected = schema.csv_columns()
    ni, nv = len(schema.invariant_names), len(schema.variant_names)
    rows: dict[str, list[tuple[int, int, list[str]]]] = {}

    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        unknown = [h for h in header if h not in expected]
        if unknown:
            raise DataError(f"{path}: line 1: unknown column(s) {unknown}")
        if header != expected:
            missing = [h for h in expected if h not in header]
            raise DataError(f"{path}: line 1: header does not match schema"
                            + (f" (missing {missing})" if missing else " (column order)"))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}: line {lineno}: malformed row "
                                f"({len(row)} fields, expected {len(expected)})")
            try:
                step = int(row[1])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: step {row[1]!r} is not an integer") from None
            rows.setdefault(row[0], []).append((step, lineno, row))

    trajectories = []
    for tid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        steps = [e[0] for e in entries]
        if steps != list(range(len(steps))):
            raise DataError(f"{path}: line {entries[0][1]}: trajectory {tid}: "
                            f"non-contiguous steps {steps}")
        if len(steps) > MAX_STEPS:
            raise DataError(f"{path}: trajectory {tid}: more than {MAX_STEPS} steps")
        inv = None
        variant, actions = [], []
        reward = None
        for i, (_, lineno, row) in enumerate(entries):
            try:
                values = [float(v) for v in row[2 : 2 + ni + nv]]
            except ValueError:
                raise DataError(f"{path}: line {lineno}: missing or non-numeric feature value") from None
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}: line {lineno}: non-finite feature value")
            row_inv = values[:ni]
            if inv is None:
                inv = row_inv
            elif row_inv != inv:
                raise DataError(f"{path}: line {lineno}: time-invariant features change within "
                                f"trajectory {tid}")
            variant.append(values[ni:])
            try:
                a = int(row[2 + ni + nv])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: action {row[2 + ni + nv]!r} is not an integer") from None
            if not 0 <= a < N_ACTIONS:
                raise DataError(f"{path}: line {lineno}: action {a} out of [0, 24]")
            actions.append(a)
            r = row[-1].strip()
            last = i == len(entries) - 1
            if last:
                if r not in ("1", "-1", "+1", "1.0", "-1.0"):
                    raise DataError(f"{path}: line {lineno}: reward must be +1 or -1, got {r!r}")
                reward = int(float(r))
            elif r:
                raise DataError(f"{path}: line {lineno}: reward given before the final step")
        trajectories.append(Trajectory(tid, np.array(inv), np.array(variant),
                                       np.array(actions, dtype=np.int64), reward))
    if not trajectories:
        raise DataError(f"{path}: no data rows")
    return Cohort(schema, trajectories, edges)


# ------------------------------------------------------------------ actions


def _drug_bin(dose: float, edges: Sequence[float]) -> int:
    if dose < 0:
        raise DataError(f"negative dose {dose}")
    if dose == 0:
        return 0
    # a dose sitting exactly on an edge falls in the lower bin
    return 1 + int(np.searchsorted(np.asarray(edges), dose, side="left"))


def discretize_actions(vaso_dose: float, fluid_dose: float, edges: QuartileEdges) -> int:
    """Joint action index 5 * vaso_bin + fluid_bin."""
    return 5 * _drug_bin(vaso_dose, edges.vaso) + _drug_bin(fluid_dose, edges.fluid)


def decode_action(a: int) -> tuple[int, int]:
    """(vaso_bin, fluid_bin) for an action index."""
    return divmod(int(a), 5)


def quartile_edges(vaso_doses: np.ndarray, fluid_doses: np.ndarray) -> QuartileEdges:
    """Quartile boundaries over the nonzero doses of each drug (training data only)."""
    def edges(d):
        nz = np.asarray(d, dtype=float)
        nz = nz[nz > 0]
        if len(nz) < 4:
            raise DataError("need at least 4 nonzero doses to compute quartiles")
        return tuple(float(q) for q in np.quantile(nz, [0.25, 0.5, 0.75]))

    return QuartileEdges(edges(vaso_doses), edges(fluid_doses))


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic cohort generator.

    ``dynamics_seed`` fixes the planted structure (feature loadings, the best
    action per physiological quadrant); the sampling seed passed to
    :func:`generate_synthetic` draws the patients.
    """

    n_traj: int = 2000
    mortality_rate: float = 0.06
    mean_length: float = 13.3
    min_length: int = 2
    max_length: int = MAX_STEPS
    dynamics_seed: int = 0
    treatment_effect: float = 2.0  # health gained per step by the best action
    clinician_sharpness: float = 3.0  # higher: clinician concentrates on near-best actions
    mortality_scale: float = 0.5  # slope of death risk in final health
    obs_noise: float = 0.3

    def validate(self) -> None:
        if self.n_traj < 1:
            raise ConfigError("n_traj must be >= 1")
        if not 0.0 < self.mortality_rate < 1.0:
            raise ConfigError("mortality_rate must lie in (0, 1)")
        if not 2 <= self.min_length <= self.max_length <= MAX_STEPS:
            raise ConfigError("need 2 <= min_length <= max_length <= 20")
        if not self.min_length <= self.mean_length <= self.max_length:
            raise ConfigError("mean_length must lie within [min_length, max_length]")
        if self.mortality_scale <= 0 or self.obs_noise < 0:
            raise ConfigError("mortality_scale must be > 0 and obs_noise >= 0")


@dataclass(frozen=True)
class Dynamics:
    """The planted generative structure shared by every cohort of one dynamics seed."""

    best_actions: np.ndarray  # (4,) best joint action per (z1 > 0, z2 > 0) quadrant
    loadings: np.ndarray  # (n_variant, 4) feature response to the latent state
    action_response: np.ndarray  # (n_variant, 2) response to (vaso_bin, fluid_bin) of the last action
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, schema: FeatureSchema) -> "Dynamics":
        rng = np.random.default_rng([seed, 7])
        names = schema.storage().variant_names
        nv = len(names)
        # distinct best actions, all with some vasopressor or fluid
        best = rng.choice(np.arange(1, N_ACTIONS), size=4, replace=False)
        loadings = rng.normal(0.0, 0.4, size=(nv, 4))
        # make the health axis and the two decision axes plainly visible
        for k, name in enumerate(names):
            if name in ("SOFA", "Arterial_lactate", "Shock_Index"):
                loadings[k, 0] = -1.5
            elif name in ("MeanBP", "GCS", "PaO2_FiO2"):
                loadings[k, 0] = 1.5
            elif name in ("HR", "Temp_C", "WBC_count"):
                loadings[k, 1] = 1.5
            elif name in ("Sodium", "Glucose", "Arterial_pH"):
                loadings[k, 2] = 1.5
        response = rng.normal(0.0, 0.3, size=(nv, 2))
        for k, name in enumerate(names):
            if name in ("MeanBP", "SysBP", "DiaBP"):
                response[k] = (0.6, 0.2)
            elif name == "cumulated_balance":
                response[k] = (0.0, 1.0)
            elif name in ("max_dose_vaso", "input_4hourly", WEIGHT_FEATURE):
                response[k] = 0.0
        feature_mean = rng.uniform(10.0, 120.0, size=nv)
        feature_scale = rng.uniform(1.0, 15.0, size=nv)
        return cls(best, loadings, response, feature_mean, feature_scale)

    def best_action(self, z: np.ndarray) -> np.ndarray:
        """Planted optimal action for latent states z[..., 4]."""
        quadrant = 2 * (z[..., 1] > 0).astype(int) + (z[..., 2] > 0).astype(int)
        return self.best_actions[quadrant]


def action_distance(a, b) -> np.ndarray:
    va, fa = np.divmod(np.asarray(a), 5)
    vb, fb = np.divmod(np.asarray(b), 5)
    return np.abs(va - vb) + np.abs(fa - fb)


def treatment_effect(a, best, scale: float) -> np.ndarray:
    """Health increment: +scale for the best action, shrinking with dose distance."""
    return scale * (1.0 - action_distance(a, best) / 2.0)


def clinician_probs(best: np.ndarray, sharpness: float) -> np.ndarray:
    """Logged-policy distribution (n, 25), concentrated around the best action."""
    d = action_distance(np.arange(N_ACTIONS)[None, :], np.asarray(best)[:, None])
    logits = -sharpness * d
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _sample_lengths(rng, cfg: SyntheticConfig, n: int) -> np.ndarray:
    span = cfg.max_length - cfg.min_length
    if span == 0:
        return np.full(n, cfg.min_length)
    p = (cfg.mean_length - cfg.min_length) / span
    return cfg.min_length + rng.binomial(span, p, size=n)


def _sample_dose(rng, bin_: int, edges: Sequence[float]) -> float:
    if bin_ == 0:
        return 0.0
    lo = 0.0 if bin_ == 1 else edges[bin_ - 2]
    hi = edges[bin_ - 1] if bin_ <= 3 else 2.0 * edges[2]
    # half-open (lo, hi]: stays strictly above the lower edge
    return float(hi - rng.uniform(0.0, 1.0) * (hi - lo) * 0.999)


def _calibrate_threshold(health: np.ndarray, rate: float, scale: float) -> float:
    """Find c so that mean sigmoid((c - h) / scale) == rate (bisection)."""
    lo, hi = health.min() - 50 * scale, health.max() + 50 * scale
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p = 1.0 / (1.0 + np.exp(-(mid - health) / scale))
        if p.mean() < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(config: SyntheticConfig, seed: int,
                       schema: FeatureSchema | None = None,
                       edges: QuartileEdges = DEFAULT_EDGES) -> Cohort:
    """Simulate a cohort with linear-Gaussian latent dynamics and a planted optimum.

    The latent state has four coordinates: health, two decision axes whose sign
    quadrant determines the best action, and a nuisance axis. Every observed
    time-variant feature is a noisy linear read-out of the latent state plus a
    response to the previous action; the two dose features record the previous
    action's doses. Death risk is logistic in the final health, with the offset
    solved so the expected mortality equals ``config.mortality_rate``.
    """
    config.validate()
    schema = (schema or FeatureSchema()).storage()
    dyn = Dynamics.from_seed(config.dynamics_seed, schema)
    rng = np.random.default_rng([seed, 11])
    names = schema.variant_names
    idx = {n: k for k, n in enumerate(names)}
    n = config.n_traj
    lengths = _sample_lengths(rng, config, n)

    inv_names = schema.invariant_names
    trajs_raw = []
    final_health = np.empty(n)
    for i in range(n):
        T = int(lengths[i])
        inv = np.zeros(len(inv_names))
        for k, name in enumerate(inv_names):
            if name == "age":
                inv[k] = float(np.clip(rng.normal(64.0, 15.0), 18.0, 95.0))
            elif name in ("gender", "re_admission", "mechvent"):
                inv[k] = float(rng.random() < (0.45 if name == "gender" else 0.3))
            else:
                inv[k] = float(rng.normal())
        frailty = 0.0
        if "mechvent" in inv_names:
            frailty -= 0.5 * inv[inv_names.index("mechvent")]
        if "age" in inv_names:
            frailty -= 0.02 * (inv[inv_names.index("age")] - 64.0)
        weight = float(rng.normal(78.0, 14.0))

        z = np.array([rng.normal(frailty, 1.0), rng.normal(), rng.normal(), rng.normal()])
        steps = np.empty((T, len(names)))
        actions = np.empty(T, dtype=np.int64)
        prev_bins = (0, 0)
        prev_doses = (0.0, 0.0)
        balance = 0.0
        for t in range(T):
            x = dyn.loadings @ z + dyn.action_response @ np.array(prev_bins, dtype=float)
            x = x + config.obs_noise * rng.normal(size=len(names))
            obs = dyn.feature_mean + dyn.feature_scale * x
            if "max_dose_vaso" in idx:
                obs[idx["max_dose_vaso"]] = prev_doses[0]
            if "input_4hourly" in idx:
                obs[idx["input_4hourly"]] = prev_doses[1]
            if "cumulated_balance" in idx:
                obs[idx["cumulated_balance"]] = balance
            if WEIGHT_FEATURE in idx:
                obs[idx[WEIGHT_FEATURE]] = weight + 0.1 * t + rng.normal(0.0, 0.2)
            steps[t] = obs

            best = dyn.best_action(z)
            p = clinician_probs(np.array([best]), config.clinician_sharpness)[0]
            a = int(rng.choice(N_ACTIONS, p=p))
            actions[t] = a
            vb, fb = decode_action(a)
            prev_bins = (vb, fb)
            prev_doses = (_sample_dose(rng, vb, edges.vaso), _sample_dose(rng, fb, edges.fluid))
            balance += prev_doses[1] - 120.0

            z = np.array([
                0.95 * z[0] + float(treatment_effect(a, best, config.treatment_effect))
                + 0.3 * rng.normal(),
                0.9 * z[1] + 0.35 * rng.normal(),
                0.9 * z[2] + 0.35 * rng.normal(),
                0.8 * z[3] + 0.5 * rng.normal(),
            ])
        final_health[i] = z[0]
        trajs_raw.append((inv, steps, actions))

    c = _calibrate_threshold(final_health, config.mortality_rate, config.mortality_scale)
    p_death = 1.0 / (1.0 + np.exp(-(c - final_health) / config.mortality_scale))
    died = rng.random(n) < p_death
    width = len(str(n - 1))
    trajectories = [
        Trajectory(f"p{i:0{width}d}", inv, steps, actions, -1 if died[i] else 1)
        for i, (inv, steps, actions) in enumerate(trajs_raw)
    ]
    return Cohort(schema, trajectories, edges)


# --------------------------------------------------------- filtering / stats


def filter_short(cohort: Cohort) -> tuple[Cohort, int]:
    """Drop single-step trajectories; returns the cohort and how many were removed."""
    kept = [t for t in cohort.trajectories if t.T >= 2]
    removed = len(cohort) - len(kept)
    if removed:
        log.info("removed %d single-step trajectories", removed)
    return cohort.subset(kept), removed


@dataclass(frozen=True)
class CohortStats:
    n: int
    mortality: float
    mean_length: float
    median_length: float

    def as_dict(self) -> dict:
        return {"n": self.n, "mortality": self.mortality, "mean_length": self.mean_length,
                "median_length": self.median_length}


def cohort_stats(cohort: Cohort) -> CohortStats:
    if len(cohort) == 0:
        raise DataError("statistics of an empty cohort")
    lengths = np.array([t.T for t in cohort.trajectories], dtype=float)
    deaths = sum(t.reward == -1 for t in cohort.trajectories)
    return CohortStats(len(cohort), deaths / len(cohort), float(lengths.mean()),
                       float(np.median(lengths)))


# ------------------------------------------------------------------ splits


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    short = total - sum(counts)
    # ties go to the earlier split
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts


def stratified_split(cohort: Cohort, fractions=(0.70, 0.15, 0.15),
                     seed: int = 0) -> tuple[Cohort, Cohort, Cohort]:
    """Partition into train/val/test, keeping the death ratio in every split."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")
    n = len(cohort)
    sizes = _largest_remainder(n, fractions)
    dead = [t for t in cohort.trajectories if t.reward == -1]
    alive = [t for t in cohort.trajectories if t.reward == 1]
    n_dead = _largest_remainder(len(dead), fractions)
    n_alive = [s - d for s, d in zip(sizes, n_dead)]
    if min(n_dead) < 1 or min(n_alive) < 1:
        raise DataError("cohort too small to stratify: every split needs at least one "
                        "trajectory of each outcome")
    rng = np.random.default_rng([seed, 3])
    dead = [dead[i] for i in rng.permutation(len(dead))]
    alive = [alive[i] for i in rng.permutation(len(alive))]

    parts = []
    d0 = a0 = 0
    for nd, na in zip(n_dead, n_alive):
        chosen = {t.id for t in dead[d0 : d0 + nd]} | {t.id for t in alive[a0 : a0 + na]}
        d0, a0 = d0 + nd, a0 + na
        # preserve cohort order inside each split
        parts.append(cohort.subset(t for t in cohort.trajectories if t.id in chosen))
    return tuple(parts)


def make_batches(split: Cohort | Sequence[Trajectory], b: int = 128, seed: int = 0,
                 epoch: int = 0) -> list[Batch]:
    """Shuffle and chunk a split; the permutation depends only on (seed, epoch)."""
    trajs = list(split.trajectories if isinstance(split, Cohort) else split)
    if b < 1:
        raise ConfigError("batch size must be >= 1")
    if not trajs:
        raise DataError("cannot batch an empty split")
    perm = np.random.default_rng([seed, epoch, 5]).permutation(len(trajs))
    ordered = [trajs[i] for i in perm]
    return [Batch(tuple(ordered[i : i + b])) for i in range(0, len(ordered), b)]


# ---------------------------------------------------------- standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring with statistics from the training split."""

    inv_mean: np.ndarray
    inv_std: np.ndarray
    var_mean: np.ndarray
    var_std: np.ndarray

    @classmethod
    def fit(cls, cohort: Cohort) -> "Standardizer":
        inv = np.stack([t.invariant_obs for t in cohort.trajectories])
        var = np.concatenate([t.steps for t in cohort.trajectories])

        def std(x):
            s = x.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        return cls(inv.mean(axis=0), std(inv), var.mean(axis=0), std(var))

    def transform(self, cohort: Cohort) -> Cohort:
        return cohort.subset(
            Trajectory(t.id, (t.invariant_obs - self.inv_mean) / self.inv_std,
                       (t.steps - self.var_mean) / self.var_std, t.actions, t.reward)
            for t in cohort.trajectories
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("inv_mean", "inv_std", "var_mean", "var_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("inv_mean", "inv_std", "var_mean", "var_std")))
