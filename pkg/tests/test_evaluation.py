import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sepsis_rl.errors import ConfigError, DataError, NumericError
from sepsis_rl.evaluation import (
    EvalCurve,
    EvalTrajectory,
    aggregate_seeds,
    ema,
    normalize_loss,
    plot_curves_svg,
    read_curve_csv,
    soften_policy,
    wis,
)


def traj(pi_e, pi_b, reward, actions=None):
    pi_e, pi_b = np.asarray(pi_e, float), np.asarray(pi_b, float)
    return EvalTrajectory(pi_e, pi_b, np.zeros(len(pi_e), dtype=int) if actions is None else actions, reward)


# -------------------------------------------------------------- softening


def test_soften_epsilon_zero_is_one_hot(rng):
    q = rng.normal(size=25)
    p = soften_policy(q, np.ones(25, bool), 0.0)
    assert p[q.argmax()] == 1.0 and p.sum() == 1.0


def test_soften_arithmetic_and_mask(rng):
    q = rng.normal(size=(10, 25))
    mask = rng.random((10, 25)) < 0.5
    mask[:, 0] = True
    p = soften_policy(q, mask, 0.24)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    chosen = np.where(mask, q, -np.inf).argmax(1)
    assert np.allclose(p[np.arange(10), chosen], 0.76)
    others = np.ones((10, 25), bool)
    others[np.arange(10), chosen] = False
    np.testing.assert_allclose(p[others], 0.01)
    with pytest.raises(ConfigError):
        soften_policy(q, mask, 1.0)


# --------------------------------------------------------------------- WIS


def test_identity_ratios_give_mean_return():
    trajs = [traj([0.3, 0.2], [0.3, 0.2], r) for r in (1, -1, 1, 1)]
    assert wis(trajs, gamma=1.0) == 0.5


def test_single_trajectory_is_its_return():
    assert wis([traj([0.9, 0.01, 0.5], [0.1, 0.2, 0.3], -1)], gamma=1.0) == -1.0


def test_two_trajectory_hand_value():
    trajs = [traj([0.5], [0.25], 1), traj([0.25], [0.5], -1)]
    assert wis(trajs, gamma=1.0) == pytest.approx(0.6, abs=1e-15)


def test_discounting_uses_terminal_step():
    trajs = [traj([0.5] * 3, [0.5] * 3, 1)]
    assert wis(trajs, gamma=0.9) == pytest.approx(0.81, abs=1e-15)
    assert wis(trajs, gamma=0.9, discounted=False) == 1.0


def test_pi_e_equal_pi_b_is_mean_discounted_return(rng):
    trajs, returns = [], []
    for _ in range(200):
        T = int(rng.integers(2, 21))
        p = rng.uniform(0.01, 1.0, T)
        r = int(rng.choice([-1, 1]))
        trajs.append(traj(p, p, r))
        returns.append(r * 0.99 ** (T - 1))
    assert abs(wis(trajs, gamma=0.99) - np.mean(returns)) < 1e-12


def test_uniform_policy_on_action_independent_outcomes():
    rng = np.random.default_rng(8)
    trajs, rewards = [], []
    for _ in range(2000):
        T = int(rng.integers(2, 21))
        pi_b = rng.dirichlet(np.full(25, 30.0), size=T)
        a = np.array([rng.choice(25, p=row) for row in pi_b])
        r = -1 if rng.random() < 0.06 else 1
        trajs.append(traj(np.full(T, 1 / 25), pi_b[np.arange(T), a], r, a))
        rewards.append(r)
    assert abs(wis(trajs, gamma=1.0) - np.mean(rewards)) <= 0.05


def test_ratio_clipping_bounds_each_step():
    # unclipped ratio 1e6 would dominate; clipped at 1e4 per step
    trajs = [traj([1.0], [1e-6], 1), traj([1.0], [1.0], -1)]
    expected = (1e4 - 1) / (1e4 + 1)
    assert wis(trajs, gamma=1.0) == pytest.approx(expected, abs=1e-12)


def test_long_trajectories_do_not_overflow():
    trajs = [traj([1.0] * 20, [1e-4] * 20, 1), traj([1.0] * 20, [2e-4] * 20, -1)]
    assert np.isfinite(wis(trajs, gamma=1.0))


def test_degenerate_weights():
    with pytest.raises(NumericError, match="degenerate weights"):
        wis([traj([0.0], [0.5], 1), traj([0.0], [0.5], -1)], gamma=1.0, clip=None)
    with pytest.raises(DataError):
        wis([])


# ------------------------------------------------------------------ curves


def test_ema_cases():
    assert ema([2.0, 2.0, 2.0]) == [2.0, 2.0, 2.0]
    assert ema([1.0, 5.0, -3.0], alpha=1.0) == [1.0, 5.0, -3.0]
    assert ema([0.0, 1.0], alpha=0.1) == pytest.approx([0.0, 0.1], abs=1e-15)
    with pytest.raises(ConfigError):
        ema([1.0], alpha=0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_ema_stays_within_range(xs):
    s = ema(xs)
    assert min(xs) - 1e-9 <= min(s) and max(s) <= max(xs) + 1e-9


def test_aggregate_cases(rng):
    mean, std = aggregate_seeds([[1.0, 2.0], [1.0, 2.0]])
    assert not std.any()
    mean, std = aggregate_seeds([[0.0, 0.0], [2.0, 2.0]])
    np.testing.assert_array_equal(mean, [1, 1])
    np.testing.assert_array_equal(std, [1, 1])
    curves = rng.normal(size=(3, 7))
    mean, std = aggregate_seeds(curves.tolist())
    for i in range(7):
        col = curves[:, i]
        m = sum(col) / 3
        assert abs(mean[i] - m) < 1e-12
        assert abs(std[i] - np.sqrt(sum((c - m) ** 2 for c in col) / 3)) < 1e-12
    with pytest.raises(DataError):
        aggregate_seeds([[1.0], [1.0, 2.0]])


@pytest.mark.parametrize("loss,dim,expected", [(15.44, 33, 0.035179), (15.91, 34, 0.035184), (15.75, 34, 0.034830)])
def test_loss_normalization(loss, dim, expected):
    assert abs(normalize_loss(loss, dim) - expected) < 1e-6


def test_curve_csv_shape_and_plot_purity(tmp_path, rng):
    its = list(range(500, 5001, 500))
    curve = EvalCurve(its, {s: rng.normal(size=10).tolist() for s in (1234, 2020, 2025)})
    text = curve.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "iteration,mean,std,seed_1234,seed_2020,seed_2025"
    assert len(lines) == 11
    got_its, mean, std, seeds = read_curve_csv(text)
    assert got_its == its and len(seeds) == 3 and np.all(std >= 0)
    (tmp_path / "curve.csv").write_text(text)
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    plot_curves_svg({"sage": text}, a)
    plot_curves_svg({"sage": (tmp_path / "curve.csv").read_text()}, b)
    assert a.read_bytes() == b.read_bytes()
