"""Run configuration: TOML file, CLI overrides, desk-scale defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .cohort import FeatureSchema, SyntheticConfig
from .errors import ConfigError
from .evaluation import WisConfig
from .policy import DESK_DBCQ_ITERATIONS, BcConfig, DbcqConfig
from .training import ENCODER_VARIANTS, ReprTrainConfig

DEFAULT_SEEDS = (1234, 2020, 2025)
DESK_REPR_EPOCHS = 50
DESK_BC_EPOCHS = 20
SAGE_GRID = ((64, 2), (64, 3), (128, 2), (128, 3))


@dataclass(frozen=True)
class RunConfig:
    out: str = "runs/default"
    data: str | None = None  # CSV to ingest; None means generate
    cohort: SyntheticConfig = SyntheticConfig()
    cohort_seed: int = 1234
    split_seed: int = 1234
    schema: FeatureSchema = FeatureSchema()
    encoder: str = "sage"
    untrained_encoder: bool = False
    repr: ReprTrainConfig = ReprTrainConfig()
    sweep: tuple[tuple[int, int], ...] = ()
    bc: BcConfig = BcConfig()
    dbcq: DbcqConfig = DbcqConfig()
    wis: WisConfig = WisConfig()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    desk_scale: bool = False

    def validate(self) -> "RunConfig":
        if self.encoder not in ENCODER_VARIANTS:
            raise ConfigError(f"encoder must be one of {ENCODER_VARIANTS}, got {self.encoder!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.data is not None and not Path(self.data).is_file():
            raise ConfigError(f"data file {self.data} does not exist")
        self.cohort.validate()
        self.repr.resolved()
        self.bc.validate()
        self.dbcq.validate()
        return self

    def effective(self) -> "RunConfig":
        """Apply desk-scale overrides and tie the encoder variant into the training config."""
        cfg = replace(self, repr=replace(self.repr, variant=self.encoder))
        if cfg.desk_scale:
            cfg = replace(
                cfg,
                repr=replace(cfg.repr, epochs=DESK_REPR_EPOCHS),
                bc=replace(cfg.bc, epochs=DESK_BC_EPOCHS),
                dbcq=replace(cfg.dbcq, iterations=DESK_DBCQ_ITERATIONS),
            )
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = {"invariant": list(self.schema.invariant_names),
                       "variant": list(self.schema.variant_names)}
        return d


_SECTIONS = {
    "cohort": SyntheticConfig,
    "repr": ReprTrainConfig,
    "bc": BcConfig,
    "dbcq": DbcqConfig,
    "wis": WisConfig,
}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {sorted(unknown)}")
    if "clip" in values and values["clip"] is not None:
        values = {**values, "clip": tuple(values["clip"])}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kw: dict = {}
    run = raw.pop("run", {})
    paths = raw.pop("paths", {})
    enc = raw.pop("encoder", {})
    schema = raw.pop("schema", None)
    for key in set(paths) - {"out", "data"}:
        raise ConfigError(f"[paths]: unknown key {key!r}")
    if "out" in paths:
        kw["out"] = paths["out"]
    if paths.get("data"):
        kw["data"] = paths["data"]
    for key in set(run) - {"seeds", "desk_scale", "cohort_seed", "split_seed"}:
        raise ConfigError(f"[run]: unknown key {key!r}")
    if "seeds" in run:
        kw["seeds"] = tuple(int(s) for s in run["seeds"])
    for key in ("desk_scale", "cohort_seed", "split_seed"):
        if key in run:
            kw[key] = run[key]
    for key in set(enc) - {"variant", "untrained", "sweep"}:
        raise ConfigError(f"[encoder]: unknown key {key!r}")
    if "variant" in enc:
        kw["encoder"] = enc["variant"]
    if "untrained" in enc:
        kw["untrained_encoder"] = bool(enc["untrained"])
    if "sweep" in enc:
        kw["sweep"] = tuple((int(a), int(b)) for a, b in enc["sweep"])
    if schema is not None:
        kw["schema"] = FeatureSchema(tuple(schema["invariant"]), tuple(schema["variant"]))
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _build(cls, raw.pop(name), name)
    if raw:
        raise ConfigError(f"unknown section(s) {sorted(raw)}")
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw)
