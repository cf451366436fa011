import math
from dataclasses import replace

import numpy as np
import pytest

from sepsis_rl import numerics as nx
from sepsis_rl.cohort import FeatureSchema
from sepsis_rl.encoders import (
    AEEncoder,
    Decoder,
    EdgeSet,
    Gatv2Relation,
    GNNEncoder,
    HeteroLayer,
    SageRelation,
    SnapshotBatch,
    attention_coefficients,
    make_encoder,
    previous_actions_onehot,
)
from sepsis_rl.errors import ConfigError, DataError
from sepsis_rl.numerics import Tensor
from sepsis_rl.trajgraph import (
    ACTION,
    PATIENT_TO_TIMESTEP,
    RELATIONS,
    TIMESTEP_TO_PATIENT,
    build_trajectory_graph,
    snapshot,
)

from conftest import random_trajectory

leaky = lambda x: np.where(x > 0, x, 0.2 * x)  # noqa: E731
relu = lambda x: np.maximum(x, 0.0)  # noqa: E731


def dense_mlp(x, mlp):
    h = x
    for i, layer in enumerate(mlp.layers):
        h = h @ layer.W.data + layer.b.data
        if i < len(mlp.layers) - 1:
            h = relu(h)
    return h


def zero_params(module):
    for p in module.params():
        p.data[...] = 0.0


def one_snapshot_batch(traj, t):
    return SnapshotBatch.from_trajectories([traj], [[t]])


# --------------------------------------------------------------------- AE


def test_ae_shape_and_oracle(rng):
    enc = AEEncoder(38, rng=rng)
    obs = rng.normal(size=(3, 38))
    prev = np.eye(25)[[0, 4, 9]]
    out = enc(obs, prev).data
    assert out.shape == (3, 64)
    np.testing.assert_allclose(out, dense_mlp(np.concatenate([obs, prev], 1), enc.mlp), atol=1e-12, rtol=0)


def test_ae_zero_weights_zero_latent(rng):
    enc = AEEncoder(38, rng=rng)
    zero_params(enc)
    assert not enc(rng.normal(size=(2, 38)), np.zeros((2, 25))).data.any()


def test_previous_action_is_zero_at_first_step(rng):
    traj = random_trajectory(rng, 4)
    prev = previous_actions_onehot(traj)
    assert not prev[0].any()
    assert [int(np.argmax(r)) for r in prev[1:]] == list(traj.actions[:3])


# ---------------------------------------------------------------- decoder


def test_decoder_dimensions_per_mode(rng):
    for mode, dim in (("gnn", 34), ("ae", 33)):
        dec = Decoder(FeatureSchema.default(mode).obs_dim, rng=rng)
        assert dec(rng.normal(size=(2, 64)), np.eye(25)[:2]).shape == (2, dim)


def test_decoder_zero_and_oracle(rng):
    dec = Decoder(34, rng=rng)
    z = rng.normal(size=(3, 64))
    a = np.eye(25)[[1, 2, 3]]
    np.testing.assert_allclose(dec(z, a).data, dense_mlp(np.concatenate([z, a], 1), dec.mlp), atol=1e-12, rtol=0)
    zero_params(dec)
    assert not dec(z, a).data.any()


def test_decoder_without_injection_ignores_action(rng):
    dec = Decoder(34, rng=rng, action_injection=False)
    assert dec.mlp.sizes[0] == 64
    assert dec(rng.normal(size=(1, 64))).shape == (1, 34)


# ------------------------------------------------------------- relations


def one_dim_edges(n_src):
    return EdgeSet(np.arange(n_src), np.zeros(n_src, dtype=np.int64), np.zeros((n_src, 1)))


def test_sage_neighbor_free_node_is_relu_of_self(rng):
    rel = SageRelation(3, 3, rng)
    rel.W_self.data[...] = np.eye(3)
    h = np.array([[1.0, -2.0, 0.5]])
    empty = EdgeSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 1)))
    out = nx.relu(rel(Tensor(np.zeros((0, 3))), Tensor(h), empty)).data
    np.testing.assert_array_equal(out, relu(h))


def test_sage_mean_of_two_neighbors(rng):
    rel = SageRelation(1, 1, rng)
    rel.W_neigh.data[...] = 1.0
    rel.W_self.data[...] = 0.0
    out = rel(Tensor(np.array([[2.0], [4.0]])), Tensor(np.zeros((1, 1))), one_dim_edges(2))
    assert out.data.tolist() == [[3.0]]


def _gat_1d(rng, att):
    rel = Gatv2Relation(1, 1, 1, rng)
    rel.W_s.data[...] = 1.0
    rel.W_t.data[...] = 0.0
    rel.W_e.data[...] = 0.0
    rel.W_root.data[...] = 0.0
    rel.att.data[...] = att
    return rel


def test_gatv2_equal_attention_is_mean(rng):
    rel = _gat_1d(rng, 0.0)
    out = rel(Tensor(np.array([[2.0], [4.0]])), Tensor(np.zeros((1, 1))), one_dim_edges(2))
    assert out.data.tolist() == [[3.0]]


def test_gatv2_weighted_average(rng):
    # scores 2a and 4a; a = ln(3)/2 gives weights 0.25 and 0.75
    rel = _gat_1d(rng, math.log(3) / 2)
    alpha = attention_coefficients(np.zeros(1), np.array([[2.0], [4.0]]), np.zeros((2, 1)), rel)
    np.testing.assert_allclose(alpha, [0.25, 0.75], atol=1e-15)
    out = rel(Tensor(np.array([[2.0], [4.0]])), Tensor(np.zeros((1, 1))), one_dim_edges(2))
    np.testing.assert_allclose(out.data, [[3.5]], atol=1e-14)


def test_attention_single_and_identical_neighbors(rng):
    rel = Gatv2Relation(4, 5, 25, rng)
    h = rng.normal(size=4)
    assert attention_coefficients(h, rng.normal(size=(1, 4)), np.eye(25)[:1], rel).tolist() == [1.0]
    nb = np.tile(rng.normal(size=4), (3, 1))
    e = np.tile(np.eye(25)[7], (3, 1))
    np.testing.assert_allclose(attention_coefficients(h, nb, e, rel), np.full(3, 1 / 3), atol=1e-15)


def test_attention_direct_oracle(rng):
    rel = Gatv2Relation(4, 5, 25, rng)
    h_t = rng.normal(size=4)
    nb = rng.normal(size=(3, 4))
    e = np.eye(25)[[2, 9, 11]]
    scores = np.array([rel.att.data @ leaky(nb[k] @ rel.W_s.data + h_t @ rel.W_t.data + e[k] @ rel.W_e.data)
                       for k in range(3)])
    expected = np.exp(scores - scores.max()) / np.exp(scores - scores.max()).sum()
    np.testing.assert_allclose(attention_coefficients(h_t, nb, e, rel), expected, atol=1e-12, rtol=0)


def test_attention_empty_neighborhood(rng):
    with pytest.raises(DataError):
        attention_coefficients(np.zeros(4), np.zeros((0, 4)), np.zeros((0, 25)), Gatv2Relation(4, 5, 25, rng))


def test_hetero_layer_rejects_unknown_edge_type(rng):
    traj = random_trajectory(rng, 3)
    b = one_snapshot_batch(traj, 2)
    layer = HeteroLayer("sage", 8, 8, rng)
    h = {"patient": Tensor(rng.normal(size=(1, 8))), "timestep": Tensor(rng.normal(size=(2, 8)))}
    with pytest.raises(DataError):
        layer(h, {**b.edges, "mystery": b.edges[ACTION]})
    with pytest.raises(DataError):
        layer(h, {k: v for k, v in b.edges.items() if k != ACTION})
    with pytest.raises(ConfigError):
        HeteroLayer("gcn", 8, 8, rng)


# -------------------------------------------------------------- GNN encoder


@pytest.mark.parametrize("variant", ["sage", "gatv2"])
def test_gnn_output_length(variant, rng):
    traj = random_trajectory(rng, 20)
    enc = make_encoder(variant, 4, 34, rng)
    for t in (1, 20):
        assert enc(one_snapshot_batch(traj, t)).shape == (1, 64)


def dense_gnn(enc, traj, t):
    """Per-node loop over an explicit adjacency; no scatter ops."""
    hp = traj.invariant_obs[None] @ enc.proj_patient.W.data + enc.proj_patient.b.data
    hs = traj.steps[:t] @ enc.proj_timestep.W.data + enc.proj_timestep.b.data
    for conv in enc.convs:
        new_p = np.zeros_like(hp)
        new_s = np.zeros_like(hs)
        for _, rel, _ in RELATIONS:
            m = conv.relations[rel]
            if rel == ACTION:
                src, dst = hs, hs
                pairs = [(k, k + 1, np.eye(25)[traj.actions[k]]) for k in range(t - 1)]
            elif rel == PATIENT_TO_TIMESTEP:
                src, dst = hp, hs
                pairs = [(0, k, np.ones(1)) for k in range(t)]
            else:
                src, dst = hs, hp
                pairs = [(k, 0, np.ones(1)) for k in range(t)]
            out = np.zeros((len(dst), hp.shape[1]))
            for v in range(len(dst)):
                nb = [(u, e) for u, w, e in pairs if w == v]
                if conv.variant == "sage":
                    mean = np.mean([src[u] for u, _ in nb], axis=0) if nb else np.zeros(src.shape[1])
                    out[v] = mean @ m.W_neigh.data + m.bias.data + dst[v] @ m.W_self.data
                else:
                    acc = np.zeros(hp.shape[1])
                    if nb:
                        s = np.array([m.att.data @ leaky(src[u] @ m.W_s.data + dst[v] @ m.W_t.data + e @ m.W_e.data)
                                      for u, e in nb])
                        a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
                        acc = sum(a[k] * (src[u] @ m.W_s.data) for k, (u, _) in enumerate(nb))
                    out[v] = acc + m.bias.data + dst[v] @ m.W_root.data
            if rel == TIMESTEP_TO_PATIENT:
                new_p += out
            else:
                new_s += out
        hp, hs = relu(new_p), relu(new_s)
    pooled = hp + hs.mean(axis=0)
    return pooled @ enc.head.W.data + enc.head.b.data


@pytest.mark.parametrize("variant,n_conv", [("sage", 2), ("gatv2", 1), ("gatv2", 2)])
def test_gnn_matches_dense_message_passing(variant, n_conv, rng):
    traj = random_trajectory(rng, 6)
    enc = GNNEncoder(4, 34, variant, f_out=8, n_conv=n_conv, latent_dim=5, rng=rng)
    for p in enc.params():
        p.data[...] = rng.uniform(-0.3, 0.3, size=p.data.shape)  # small nonzero biases too
    for t in (1, 2, 4):
        got = enc(one_snapshot_batch(traj, t)).data[0]
        np.testing.assert_allclose(got, dense_gnn(enc, traj, t)[0], atol=1e-10, rtol=0)


@pytest.mark.parametrize("variant", ["sage", "gatv2"])
def test_gnn_storage_order_invariance(variant, rng):
    traj = random_trajectory(rng, 8)
    enc = make_encoder(variant, 4, 34, rng)
    snap = snapshot(build_trajectory_graph(traj), 6)
    ref = enc(SnapshotBatch.from_snapshots([snap])).data
    for k in range(5):
        perm = np.random.default_rng(k)
        nodes = tuple(snap.nodes[i] for i in perm.permutation(len(snap.nodes)))
        edges = tuple(snap.edges[i] for i in perm.permutation(len(snap.edges)))
        shuffled = replace(snap, nodes=nodes, edges=edges)
        assert np.array_equal(enc(SnapshotBatch.from_snapshots([shuffled])).data, ref)
    # the vectorized trajectory path packs the same canonical batch
    assert np.array_equal(enc(one_snapshot_batch(traj, 6)).data, ref)


def test_batched_encoding_equals_one_at_a_time(rng):
    trajs = [random_trajectory(rng, T, f"p{T}") for T in (2, 5, 9)]
    enc = make_encoder("sage", 4, 34, rng)
    batched = enc(SnapshotBatch.from_trajectories(trajs)).data
    single = np.concatenate([enc(SnapshotBatch.from_trajectories([t])).data for t in trajs])
    np.testing.assert_allclose(batched, single, atol=1e-12, rtol=0)


def test_make_encoder_defaults(rng):
    assert make_encoder("sage", 4, 34, rng).config["n_conv"] == 2
    assert make_encoder("gatv2", 4, 34, rng).config["n_conv"] == 1
    assert make_encoder("ae", 5, 33, rng).config["obs_dim"] == 38
    with pytest.raises(ConfigError):
        make_encoder("gcn", 4, 34, rng)
