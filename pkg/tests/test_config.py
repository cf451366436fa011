from pathlib import Path

import pytest

from sepsis_rl.config import DESK_BC_EPOCHS, DESK_REPR_EPOCHS, DEFAULT_SEEDS, RunConfig, from_dict, load_config
from sepsis_rl.errors import ConfigError

DOCS = Path(__file__).resolve().parents[1] / "docs"


def test_defaults():
    cfg = RunConfig().validate()
    assert cfg.seeds == DEFAULT_SEEDS == (1234, 2020, 2025)
    assert (cfg.dbcq.threshold, cfg.dbcq.gamma, cfg.dbcq.polyak, cfg.dbcq.lr) == (0.3, 0.99, 0.01, 1e-3)
    assert (cfg.bc.epochs, cfg.bc.lr, cfg.bc.weight_decay) == (5000, 1e-4, 0.1)


def test_desk_scale_overrides():
    eff = RunConfig(desk_scale=True, encoder="gatv2").effective()
    assert eff.repr.epochs == DESK_REPR_EPOCHS and eff.repr.variant == "gatv2"
    assert eff.bc.epochs == DESK_BC_EPOCHS and eff.dbcq.iterations == 50_000


def test_shipped_example_config_parses():
    cfg = load_config(DOCS / "config.example.toml").validate()
    assert cfg.encoder == "sage" and cfg.seeds == DEFAULT_SEEDS


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"dbcq": {"tau": 0.3}})
    with pytest.raises(ConfigError, match="unknown section"):
        from_dict({"optimizer": {}})


def test_validation_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(seeds=()).validate()
    with pytest.raises(ConfigError):
        RunConfig(encoder="gcn").validate()
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig(data=str(tmp_path / "missing.csv")).validate()
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nseeds = 1")
    with pytest.raises(ConfigError):
        load_config(bad)
