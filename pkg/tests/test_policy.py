import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sepsis_rl import numerics as nx
from sepsis_rl.errors import ConfigError
from sepsis_rl.layers import MLP
from sepsis_rl.policy import (
    PROB_FLOOR,
    BcConfig,
    BehaviorPolicy,
    DbcqAgent,
    DbcqConfig,
    DbcqTrainer,
    bc_accuracy,
    bc_logits,
    bc_probs,
    bellman_targets,
    dbcq_select_action,
    dbcq_train,
    eligible_mask,
    polyak_update,
    select_actions,
    train_behavior_cloning,
)
from sepsis_rl.training import Transitions


def prototype_data(n, rng, protos):
    a = rng.integers(0, 25, n)
    x = protos[a] + rng.normal(size=(n, protos.shape[1]))
    # nearest prototype, written as an affine argmax rule
    return x, (x @ protos.T - 0.5 * (protos**2).sum(1)).argmax(1)


# --------------------------------------------------------- behavior cloning


def test_untrained_policy_is_uniform(rng):
    model = BehaviorPolicy(38, rng=rng)
    x = rng.normal(size=(64, 38))
    loss = nx.cross_entropy(model(x), rng.integers(0, 25, 64)).item()
    assert abs(loss - np.log(25)) < 1e-12


def test_bc_learns_separable_rule():
    rng = np.random.default_rng(0)
    protos = rng.normal(size=(25, 38)) * 0.8
    x, y = prototype_data(3000, rng, protos)
    xt, yt = prototype_data(1000, np.random.default_rng(1), protos)
    model = train_behavior_cloning(x, y, BcConfig(epochs=10, lr=1e-3))
    assert bc_accuracy(model, xt, yt) >= 0.9


def test_bc_random_labels_chance_accuracy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2000, 38))
    model = train_behavior_cloning(x, rng.integers(0, 25, 2000), BcConfig(epochs=2, lr=1e-3))
    xt = rng.normal(size=(10_000, 38))
    assert abs(bc_accuracy(model, xt, rng.integers(0, 25, 10_000)) - 1 / 25) <= 0.02


def test_bc_probabilities_floor_and_argmax(rng):
    model = train_behavior_cloning(rng.normal(size=(200, 38)), rng.integers(0, 25, 200), BcConfig(epochs=1))
    obs = rng.normal(size=(50, 38))
    p = bc_probs(obs, model)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert p.min() >= PROB_FLOOR / (1 + 25 * PROB_FLOOR) - 1e-18
    np.testing.assert_array_equal(p.argmax(1), bc_logits(model, obs).argmax(1))
    assert bc_probs(obs[0], model).shape == (25,)


def test_bc_single_class_warns(rng):
    with pytest.warns(RuntimeWarning):
        train_behavior_cloning(rng.normal(size=(10, 38)), np.zeros(10, dtype=int), BcConfig(epochs=1))


def test_bc_eval_mode_is_batch_independent(rng):
    model = train_behavior_cloning(rng.normal(size=(100, 38)), rng.integers(0, 25, 100), BcConfig(epochs=1))
    obs = rng.normal(size=(10, 38))
    np.testing.assert_allclose(bc_logits(model, obs)[:1], bc_logits(model, obs[:1]), atol=1e-12)


# ---------------------------------------------------------------- selection


def test_threshold_zero_is_argmax(rng):
    q = rng.normal(size=(100, 25))
    p = rng.dirichlet(np.ones(25), size=100)
    np.testing.assert_array_equal(select_actions(q, p, 0.0), q.argmax(1))


def test_uniform_behavior_is_argmax(rng):
    q = rng.normal(size=(50, 25))
    for tau in (0.3, 1.0):
        np.testing.assert_array_equal(select_actions(q, np.full((50, 25), 0.04), tau), q.argmax(1))


def test_best_q_ineligible_falls_back():
    q = np.zeros(25)
    q[3], q[7], q[9] = 10.0, 5.0, 6.0
    p = np.full(25, 0.01)
    p[7] = 1.0
    p[3] = 0.1  # ratio 0.1 < 0.3
    p[9] = 0.2  # ratio 0.2 < 0.3
    a = dbcq_select_action(q, p, 0.3)
    eligible = [k for k in range(25) if p[k] / p.max() >= 0.3]
    assert a == max(eligible, key=lambda k: q[k]) == 7


@settings(max_examples=200)
@given(arrays(np.float64, 25, elements=st.floats(-10, 10)),
       arrays(np.float64, 25, elements=st.floats(1e-6, 1.0)),
       st.sampled_from([0.0, 0.3, 1.0]))
def test_selection_matches_enumeration(q, p, tau):
    p = p / p.sum()
    a = dbcq_select_action(q, p, tau)
    eligible = [k for k in range(25) if p[k] / p.max() >= tau]
    best = max(q[k] for k in eligible)
    assert a in eligible and q[a] == best
    assert a == min(k for k in eligible if q[k] == best)


def test_ties_resolve_to_lowest_index():
    assert dbcq_select_action(np.ones(25), np.full(25, 0.04), 0.3) == 0


# ----------------------------------------------------------------- targets


def _constant_mlp(value, latent=4):
    mlp = MLP((latent, 3, 3, 25), np.random.default_rng(0))
    for p in mlp.params():
        p.data[...] = 0.0
    mlp.layers[-1].b.data[...] = value
    return mlp


def test_done_target_is_reward(rng):
    agent = DbcqAgent(4, 8, rng)
    y = bellman_targets(agent, np.array([1.0, -1.0]), rng.normal(size=(2, 4)), np.array([True, True]), DbcqConfig())
    np.testing.assert_array_equal(y, [1.0, -1.0])


def test_nonterminal_target_arithmetic(rng):
    agent = DbcqAgent(4, 8, rng)
    agent.q_target = _constant_mlp(1.0)
    y = bellman_targets(agent, np.zeros(1), rng.normal(size=(1, 4)), np.array([False]), DbcqConfig(gamma=0.99))
    assert y[0] == pytest.approx(0.99, abs=1e-15)


def test_unconstrained_step_is_double_dqn_on_two_state_toy():
    rng = np.random.default_rng(5)
    agent = DbcqAgent(2, 6, rng)
    agent.behavior = _constant_mlp(0.0, latent=2)  # uniform behavior head
    cfg = DbcqConfig(threshold=0.0, gamma=0.9, polyak=1.0)
    s = np.eye(2)
    batch = Transitions(s, np.array([4, 11]), np.array([0.5, -1.0]), s[::-1].copy(), np.array([False, True]))
    q_online_next = agent.q_values(batch.s_next)
    q_target_next = agent.q_target(batch.s_next).data
    a_star = q_online_next[0].argmax()
    expected_y = np.array([0.5 + 0.9 * q_target_next[0, a_star], -1.0])
    np.testing.assert_allclose(bellman_targets(agent, batch.r, batch.s_next, batch.done, cfg), expected_y,
                               atol=1e-15)
    q_sa = agent.q_values(s)[[0, 1], batch.a]
    diff = q_sa - expected_y
    hub = np.where(np.abs(diff) <= 1, 0.5 * diff**2, np.abs(diff) - 0.5)
    td = DbcqTrainer(agent, cfg).step(batch)
    assert td == pytest.approx(hub.mean(), abs=1e-14)
    # polyak rate 1 copies the online network after the update
    for pt, po in zip(agent.q_target.params(), agent.q.params()):
        np.testing.assert_array_equal(pt.data, po.data)


def test_polyak_converges_geometrically(rng):
    online = MLP((3, 4, 2), rng)
    target = MLP((3, 4, 2), rng)
    gap0 = sum(np.abs(a.data - b.data).sum() for a, b in zip(target.params(), online.params()))
    for _ in range(100):
        polyak_update(target, online, 0.05)
    gap = sum(np.abs(a.data - b.data).sum() for a, b in zip(target.params(), online.params()))
    assert gap == pytest.approx(gap0 * 0.95**100, rel=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError):
        DbcqConfig(threshold=1.5).validate()
    with pytest.raises(ConfigError):
        DbcqConfig(polyak=0.0).validate()


# ------------------------------------------------------------------ training


def _bandit_pool(n, rng):
    """One-step episodes; the best action is set by the sign quadrant of s[:2]."""
    s = rng.normal(size=(n, 4))
    best = 6 * (s[:, 0] > 0) + 12 * (s[:, 1] > 0)
    explore = rng.random(n) < 0.5
    a = np.where(explore, rng.integers(0, 25, n), best)
    r = np.where(a == best, 1.0, -1.0)
    return Transitions(s, a.astype(np.int64), r, s.copy(), np.ones(n, dtype=bool)), best


def test_evaluation_schedule_counts():
    rng = np.random.default_rng(1)
    pool, _ = _bandit_pool(200, rng)
    cfg = DbcqConfig(iterations=5000, eval_period=500, batch_size=4, hidden=4)
    res = dbcq_train(pool, cfg, evaluator=lambda agent: 0.0)
    assert res.eval_iterations == list(range(500, 5001, 500))


def test_training_is_deterministic():
    pool, _ = _bandit_pool(300, np.random.default_rng(2))
    cfg = DbcqConfig(iterations=300, eval_period=100, batch_size=16, hidden=8, seed=7)
    score = lambda agent: float(agent.q_values(pool.s[:20]).sum())  # noqa: E731
    a, b = dbcq_train(pool, cfg, score), dbcq_train(pool, cfg, score)
    assert a.eval_scores == b.eval_scores and a.td_losses == b.td_losses


def test_recovers_planted_best_action():
    rng = np.random.default_rng(3)
    pool, _ = _bandit_pool(4000, rng)
    res = dbcq_train(pool, DbcqConfig(iterations=3000, batch_size=64, hidden=32, lr=3e-3, seed=1))
    test_pool, best = _bandit_pool(1000, np.random.default_rng(4))
    chosen = res.agent.act(test_pool.s, 0.3)
    assert np.mean(chosen == best) >= 0.8


def test_eligible_mask_threshold_one_keeps_modes():
    p = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(eligible_mask(p, 1.0), [[True, True, False], [False, False, True]])
