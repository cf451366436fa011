from dataclasses import replace

import numpy as np
import pytest

from sepsis_rl.cohort import Cohort, FeatureSchema, Standardizer, Trajectory, stratified_split
from sepsis_rl.encoders import GNNEncoder
from sepsis_rl.errors import ConfigError, DataError
from sepsis_rl.training import (
    LatentDataset,
    ReprTrainConfig,
    build_models,
    encode_dataset,
    encode_steps,
    evaluate_loss,
    run_sweep,
    train_autoencoder,
    untrained_encoder,
)

from conftest import random_cohort, random_trajectory


def constant_cohort(rng, n=60):
    trajs = []
    for i in range(n):
        T = int(rng.integers(3, 8))
        row = rng.normal(size=34)
        trajs.append(Trajectory(f"c{i:03d}", rng.normal(size=4), np.tile(row, (T, 1)),
                                rng.integers(0, 25, size=T), -1 if i % 8 == 0 else 1))
    return Cohort(FeatureSchema(), tuple(trajs))


@pytest.fixture(scope="module")
def tiny_split():
    cohort = random_cohort(np.random.default_rng(11), 60, lengths=(2, 6), deaths=12)
    train, val, _ = stratified_split(cohort, seed=0)
    return train, val


def test_config_defaults_per_variant():
    ae = ReprTrainConfig("ae").resolved()
    sage = ReprTrainConfig("sage").resolved()
    gat = ReprTrainConfig("gatv2").resolved()
    assert (ae.epochs, ae.lr) == (600, 5e-4)
    assert (sage.epochs, sage.lr, sage.f_out, sage.n_conv) == (200, 1e-3, 64, 2)
    assert (gat.f_out, gat.n_conv) == (64, 1)
    with pytest.raises(ConfigError):
        ReprTrainConfig("gcn").resolved()


def test_lr_zero_leaves_parameters(tiny_split):
    train, val = tiny_split
    cfg = ReprTrainConfig("sage", epochs=2, lr=0.0, f_out=8, n_conv=1, latent_dim=8)
    enc, dec = build_models(cfg, 4, 34, 34)
    before = [p.data.copy() for p in enc.params() + dec.params()]
    train_autoencoder(train, val, cfg, enc, dec)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, enc.params() + dec.params()))


def test_constant_dynamics_are_learned():
    rng = np.random.default_rng(4)
    train, val, _ = stratified_split(constant_cohort(rng, 400), seed=1)
    res = train_autoencoder(train, val, ReprTrainConfig("ae", epochs=50, lr=1e-3, batch_size=32))
    first, last = res.curve.val[0][1], res.curve.val[-1][1]
    assert last < 0.5 * first


def test_validation_schedule_and_best_checkpoint(tiny_split):
    train, val = tiny_split
    res = train_autoencoder(train, val, ReprTrainConfig("ae", epochs=25, validation_period=10, seed=2))
    assert [e for e, _ in res.curve.val] == [0, 10, 20, 25]
    assert len(res.curve.train) == 25
    assert res.best_val_loss == min(v for _, v in res.curve.val)
    enc, dec = res.best_models()
    again = evaluate_loss(enc, dec, val, train.schema.with_mode("ae"))
    assert again == pytest.approx(res.best_val_loss, rel=1e-12)


def test_loss_jsonl_is_deterministic(tiny_split):
    train, val = tiny_split
    cfg = ReprTrainConfig("gatv2", epochs=3, f_out=8, latent_dim=8, seed=5)
    a = train_autoencoder(train, val, cfg).curve.to_jsonl()
    b = train_autoencoder(train, val, cfg).curve.to_jsonl()
    assert a == b and a.count("\n") == 3 + 2


def test_injection_does_not_hurt_on_action_driven_data(small_synthetic):
    train, val, _ = stratified_split(small_synthetic, seed=0)
    std = Standardizer.fit(train)
    train, val = std.transform(train), std.transform(val)
    base = ReprTrainConfig("ae", epochs=20, lr=2e-3, seed=1)
    with_inj = train_autoencoder(train, val, base).curve.val[-1][1]
    without = train_autoencoder(train, val, replace(base, action_injection=False)).curve.val[-1][1]
    assert with_inj <= without


# ----------------------------------------------------------------- sweeps


def test_sweep_of_one(tiny_split):
    train, val = tiny_split
    res = run_sweep([(8, 1)], ReprTrainConfig("sage", epochs=1, latent_dim=8), train, val)
    assert (res.best.f_out, res.best.n_conv) == (8, 1)


def test_default_sage_grid_runs_four_models(tiny_split):
    train, val = tiny_split
    grid = [(64, 2), (64, 3), (128, 2), (128, 3)]
    res = run_sweep(grid, ReprTrainConfig("sage", epochs=1), train, val)
    rows = res.summary_rows()
    assert len(rows) == 4 and sum(r["selected"] for r in rows) == 1
    best = min(rows, key=lambda r: (r["final_smoothed_val_loss"], r["f_out"], r["n_conv"]))
    assert best["selected"]


def test_sweep_tie_break_prefers_small_configs(tiny_split, monkeypatch):
    train, val = tiny_split
    import sepsis_rl.training as tr

    real = tr.train_autoencoder

    def constant_loss(t, v, cfg, *a, **k):
        res = real(t, v, replace(cfg, epochs=1))
        res.curve.val = [(0, 1.0)]
        return res

    monkeypatch.setattr(tr, "train_autoencoder", constant_loss)
    res = run_sweep([(16, 3), (8, 2), (16, 1), (8, 1)], ReprTrainConfig("sage", latent_dim=4), train, val)
    assert (res.best.f_out, res.best.n_conv) == (8, 1)


# --------------------------------------------------------------- encoding


def test_latent_counts_and_transitions(tiny_split):
    train, _ = tiny_split
    enc = untrained_encoder("sage", train, seed=3)
    ds = encode_dataset(train, enc)
    assert all(lt.latents.shape == (t.T, 64) for lt, t in zip(ds.trajectories, train.trajectories))
    tr = ds.transitions()
    total = sum(t.T for t in train.trajectories)
    assert len(tr) == total
    assert int(tr.done.sum()) == len(train)
    # terminal rows carry the outcome and repeat the final latent
    np.testing.assert_array_equal(tr.r[tr.done], [t.reward for t in train.trajectories])
    np.testing.assert_array_equal(tr.s_next[tr.done], tr.s[tr.done])
    assert not tr.r[~tr.done].any()


def test_encoding_is_deterministic(tiny_split):
    train, _ = tiny_split
    for variant in ("ae", "sage", "gatv2"):
        enc = untrained_encoder(variant, train, seed=9)
        a = encode_dataset(train, enc, chunk=7)
        b = encode_dataset(train, enc, chunk=50)
        for x, y in zip(a.trajectories, b.trajectories):
            np.testing.assert_allclose(x.latents, y.latents, atol=1e-12, rtol=0)
        c = encode_dataset(train, enc, chunk=7)
        assert all(np.array_equal(x.latents, y.latents) for x, y in zip(a.trajectories, c.trajectories))


def _perturbed_first_step(traj):
    steps = traj.steps.copy()
    steps[0] += 1.0
    return Trajectory(traj.id, traj.invariant_obs, steps, traj.actions, traj.reward)


def test_history_sensitivity(rng):
    traj = random_trajectory(rng, 6)
    other = _perturbed_first_step(traj)
    cohort = Cohort(FeatureSchema(), (traj,))
    for variant, changes in (("ae", False), ("sage", True), ("gatv2", True)):
        enc = untrained_encoder(variant, cohort, seed=1)
        l5 = encode_steps(enc, [traj], last=True).data[4]
        l5_p = encode_steps(enc, [other], last=True).data[4]
        if changes:
            assert np.linalg.norm(l5 - l5_p) > 0
        else:
            assert np.array_equal(l5, l5_p)


def test_encoder_dimension_mismatch(tiny_split):
    train, _ = tiny_split
    enc = GNNEncoder(5, 33, rng=np.random.default_rng(0))
    with pytest.raises(DataError):
        encode_dataset(train, enc)


def test_latent_dataset_merge(tiny_split):
    train, val = tiny_split
    enc = untrained_encoder("ae", train, seed=0)
    merged = encode_dataset(train, enc).merged(encode_dataset(val, enc))
    assert len(merged) == len(train) + len(val)
    assert isinstance(merged, LatentDataset)
