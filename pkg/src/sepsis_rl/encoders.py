"""State encoders (MLP, heterogeneous SAGE, heterogeneous GATv2) and the next-state decoder.

GNN encoders consume a :class:`SnapshotBatch`: many snapshots packed into one
disjoint graph. Node and edge arrays are kept in a canonical order (snapshot,
then time), so the encoding does not depend on how a snapshot stored its
nodes or edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cohort import N_ACTIONS, Trajectory
from .errors import ConfigError, DataError, DimensionError
from .layers import MLP, Linear, Module
from .numerics import Param, Tensor
from .trajgraph import (
    ACTION,
    EDGE_DIMS,
    PATIENT,
    PATIENT_TO_TIMESTEP,
    RELATIONS,
    TERMINAL,
    TIMESTEP,
    TIMESTEP_TO_PATIENT,
    GraphSnapshot,
    validate_graph,
)

LATENT_DIM = 64
LEAKY_SLOPE = 0.2


# ------------------------------------------------------------- batch layout


@dataclass
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    attrs: np.ndarray  # (E, edge_dim)


@dataclass
class SnapshotBatch:
    """A disjoint union of snapshots; snapshot k owns patient node k."""

    patient_x: np.ndarray  # (P, |I|)
    timestep_x: np.ndarray  # (N, |T|)
    timestep_graph: np.ndarray  # (N,) snapshot index per timestep node
    edges: dict[str, EdgeSet]

    @property
    def n_graphs(self) -> int:
        return len(self.patient_x)

    def n_nodes(self, type_: str) -> int:
        return len(self.patient_x) if type_ == PATIENT else len(self.timestep_x)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], prefixes: Sequence[Sequence[int]] | None = None,
                          mask_actions: bool = False) -> "SnapshotBatch":
        """Pack snapshots g_t of each trajectory (default: every t in 1..T).

        ``prefixes[i]`` lists the t values wanted for ``trajs[i]``.
        """
        pat, ts_x, ts_graph = [], [], []
        act_src, act_dst, act_a, pt_dst = [], [], [], []
        g = 0
        n_ts = 0
        for i, traj in enumerate(trajs):
            ts = range(1, traj.T + 1) if prefixes is None else prefixes[i]
            for t in ts:
                if not 1 <= t <= traj.T:
                    raise DataError(f"snapshot t={t} outside 1..{traj.T}")
                pat.append(traj.invariant_obs)
                ts_x.append(traj.steps[:t])
                ts_graph.append(np.full(t, g))
                idx = n_ts + np.arange(t)
                pt_dst.append(idx)
                act_src.append(idx[:-1])
                act_dst.append(idx[1:])
                act_a.append(traj.actions[: t - 1])
                n_ts += t
                g += 1
        if g == 0:
            raise DataError("empty snapshot batch")
        ts_graph = np.concatenate(ts_graph)
        pt_dst = np.concatenate(pt_dst)
        act_a = np.concatenate(act_a).astype(np.int64)
        act_attr = np.zeros((len(act_a), N_ACTIONS))
        if not mask_actions:
            act_attr[np.arange(len(act_a)), act_a] = 1.0
        unit = np.ones((n_ts, 1))
        edges = {
            ACTION: EdgeSet(np.concatenate(act_src), np.concatenate(act_dst), act_attr),
            PATIENT_TO_TIMESTEP: EdgeSet(ts_graph.copy(), pt_dst, unit),
            TIMESTEP_TO_PATIENT: EdgeSet(pt_dst.copy(), ts_graph.copy(), unit.copy()),
        }
        return cls(np.stack(pat), np.concatenate(ts_x), ts_graph, edges)

    @classmethod
    def from_snapshots(cls, snaps: Sequence[GraphSnapshot]) -> "SnapshotBatch":
        """Pack snapshot objects, canonicalizing node and edge order."""
        pat, ts_x, ts_graph = [], [], []
        rel_rows: dict[str, list] = {r: [] for _, r, _ in RELATIONS}
        n_ts = 0
        for g, snap in enumerate(snaps):
            problems = validate_graph(snap)
            if problems:
                raise DataError(f"invalid snapshot: {problems}")
            patient = snap.nodes_of(PATIENT)[0]
            timesteps = sorted(snap.nodes_of(TIMESTEP), key=lambda n: n.time)
            local = {n.id: n_ts + k for k, n in enumerate(timesteps)}
            order = {n.id: n.time for n in timesteps}
            local[patient.id] = g
            pat.append(patient.features)
            ts_x.extend(n.features for n in timesteps)
            ts_graph.extend([g] * len(timesteps))
            for _, rel, _ in RELATIONS:
                edges = [e for e in snap.edges if e.type == rel]
                edges.sort(key=lambda e: (order.get(e.dst, -1), order.get(e.src, -1)))
                rel_rows[rel].extend((local[e.src], local[e.dst], e.attrs) for e in edges)
            n_ts += len(timesteps)
        edge_sets = {}
        for _, rel, _ in RELATIONS:
            rows = rel_rows[rel]
            dim = EDGE_DIMS[rel]
            if rel == TIMESTEP_TO_PATIENT:
                rows.sort(key=lambda r: (r[1], r[0]))
            edge_sets[rel] = EdgeSet(
                np.array([r[0] for r in rows], dtype=np.int64),
                np.array([r[1] for r in rows], dtype=np.int64),
                np.array([r[2] for r in rows]).reshape(len(rows), dim),
            )
        return cls(np.stack(pat), np.array(ts_x), np.array(ts_graph, dtype=np.int64), edge_sets)


# ------------------------------------------------------------ relation convs


class SageRelation(Module):
    """Mean-aggregating relation: W_neigh · mean(h_u) + b + W_self · h_v."""

    def __init__(self, d_in: int, f_out: int, rng: np.random.Generator):
        self.W_self = Param(nx.glorot_uniform(rng, d_in, f_out))
        self.W_neigh = Param(nx.glorot_uniform(rng, d_in, f_out))
        self.bias = Param(np.zeros(f_out))

    def __call__(self, h_src: Tensor, h_dst: Tensor, edges: EdgeSet) -> Tensor:
        n_dst = h_dst.shape[0]
        neigh = nx.segment_mean(nx.take_rows(h_src, edges.src), edges.dst, n_dst)
        return nx.linear(neigh, self.W_neigh, self.bias) + nx.matmul(h_dst, self.W_self)


class Gatv2Relation(Module):
    """Attention-weighted relation with edge attributes (single head).

    score_uv = a . LeakyReLU(W_s h_u + W_t h_v + W_e e_uv), normalized by a
    softmax over v's incoming edges of this relation. A root term W_root h_v
    keeps the target's own features.
    """

    def __init__(self, d_in: int, f_out: int, edge_dim: int, rng: np.random.Generator):
        self.W_s = Param(nx.glorot_uniform(rng, d_in, f_out))
        self.W_t = Param(nx.glorot_uniform(rng, d_in, f_out))
        self.W_e = Param(nx.glorot_uniform(rng, edge_dim, f_out))
        self.att = Param(nx.glorot_uniform(rng, f_out, 1)[:, 0])
        self.W_root = Param(nx.glorot_uniform(rng, d_in, f_out))
        self.bias = Param(np.zeros(f_out))

    def coefficients(self, h_src: Tensor, h_dst: Tensor, edges: EdgeSet) -> tuple[Tensor, Tensor]:
        xs = nx.matmul(h_src, self.W_s)
        xt = nx.matmul(h_dst, self.W_t)
        pre = nx.take_rows(xs, edges.src) + nx.take_rows(xt, edges.dst) + nx.matmul(Tensor(edges.attrs), self.W_e)
        scores = nx.matmul(nx.leaky_relu(pre, LEAKY_SLOPE), self.att)
        return nx.segment_softmax(scores, edges.dst, h_dst.shape[0]), xs

    def __call__(self, h_src: Tensor, h_dst: Tensor, edges: EdgeSet) -> Tensor:
        alpha, xs = self.coefficients(h_src, h_dst, edges)
        msg = nx.segment_sum(nx.scale_rows(nx.take_rows(xs, edges.src), alpha), edges.dst, h_dst.shape[0])
        return msg + self.bias + nx.matmul(h_dst, self.W_root)


def attention_coefficients(h_target: np.ndarray, h_neighbors: np.ndarray, edge_attrs: np.ndarray,
                           rel: Gatv2Relation) -> np.ndarray:
    """Attention weights of one target over its same-relation neighbors."""
    h_neighbors = np.atleast_2d(h_neighbors)
    if len(h_neighbors) == 0:
        raise DataError("attention over an empty neighborhood")
    k = len(h_neighbors)
    edges = EdgeSet(np.arange(k), np.zeros(k, dtype=np.int64), np.atleast_2d(edge_attrs).reshape(k, -1))
    alpha, _ = rel.coefficients(Tensor(h_neighbors), Tensor(np.atleast_2d(h_target)), edges)
    return alpha.data


class HeteroLayer(Module):
    """One heterogeneous conv: per-relation messages summed per target type, then ReLU."""

    def __init__(self, variant: str, d_in: int, f_out: int, rng: np.random.Generator):
        if variant == "sage":
            self.relations = {r: SageRelation(d_in, f_out, rng) for _, r, _ in RELATIONS}
        elif variant == "gatv2":
            self.relations = {r: Gatv2Relation(d_in, f_out, EDGE_DIMS[r], rng) for _, r, _ in RELATIONS}
        else:
            raise ConfigError(f"unknown conv variant {variant!r}")
        self.variant = variant

    def __call__(self, h: dict[str, Tensor], edges: dict[str, EdgeSet]) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for src_t, rel, dst_t in RELATIONS:
            if rel not in edges:
                raise DataError(f"missing edge type {rel}")
            m = self.relations[rel](h[src_t], h[dst_t], edges[rel])
            out[dst_t] = m if dst_t not in out else out[dst_t] + m
        unknown = set(edges) - set(self.relations)
        if unknown:
            raise DataError(f"unknown edge type(s) {sorted(unknown)}")
        return {k: nx.relu(v) for k, v in out.items()}


def hetero_conv_layer(node_features: dict[str, np.ndarray], edges: dict[str, EdgeSet],
                      layer: HeteroLayer) -> dict[str, np.ndarray]:
    out = layer({k: Tensor(v) for k, v in node_features.items()}, edges)
    return {k: v.data for k, v in out.items()}


# ------------------------------------------------------------------ encoders


class GNNEncoder(Module):
    """Input projections -> n_conv hetero layers -> per-type mean pool -> sum -> linear."""

    kind = "gnn"

    def __init__(self, n_invariant: int, n_variant: int, variant: str = "sage", f_out: int = 64,
                 n_conv: int = 2, latent_dim: int = LATENT_DIM, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if n_conv < 1 or f_out < 1:
            raise ConfigError("n_conv and f_out must be positive")
        self.proj_patient = Linear(n_invariant, f_out, rng)
        self.proj_timestep = Linear(n_variant, f_out, rng)
        self.convs = [HeteroLayer(variant, f_out, f_out, rng) for _ in range(n_conv)]
        self.head = Linear(f_out, latent_dim, rng)
        self.variant = variant
        self.config = {"variant": variant, "f_out": f_out, "n_conv": n_conv, "latent_dim": latent_dim,
                       "n_invariant": n_invariant, "n_variant": n_variant}

    def __call__(self, batch: SnapshotBatch) -> Tensor:
        h = {PATIENT: self.proj_patient(Tensor(batch.patient_x)),
             TIMESTEP: self.proj_timestep(Tensor(batch.timestep_x))}
        for conv in self.convs:
            h = conv(h, batch.edges)
        pooled = h[PATIENT] + nx.segment_mean(h[TIMESTEP], batch.timestep_graph, batch.n_graphs)
        return self.head(pooled)


class AEEncoder(Module):
    """MLP over the current observation concatenated with the previous action."""

    kind = "ae"

    def __init__(self, obs_dim: int, latent_dim: int = LATENT_DIM, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = MLP((obs_dim + N_ACTIONS, 64, 128, latent_dim), rng)
        self.config = {"variant": "ae", "obs_dim": obs_dim, "latent_dim": latent_dim}

    def __call__(self, obs, prev_action_onehot) -> Tensor:
        obs = nx.as_tensor(obs)
        prev = nx.as_tensor(prev_action_onehot)
        if obs.shape[-1] + prev.shape[-1] != self.mlp.sizes[0] or prev.shape[-1] != N_ACTIONS:
            raise DimensionError(f"ae_encode: inputs {obs.shape} + {prev.shape} vs width {self.mlp.sizes[0]}")
        return self.mlp(nx.concat([obs, prev], axis=-1))


class Decoder(Module):
    """(latent ⊕ next action) -> 64 -> 128 -> obs_dim, read as a Gaussian mean."""

    kind = "decoder"

    def __init__(self, obs_dim: int, latent_dim: int = LATENT_DIM, rng: np.random.Generator | None = None,
                 action_injection: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        width = latent_dim + (N_ACTIONS if action_injection else 0)
        self.mlp = MLP((width, 64, 128, obs_dim), rng)
        self.action_injection = action_injection
        self.config = {"obs_dim": obs_dim, "latent_dim": latent_dim, "action_injection": action_injection}

    def __call__(self, latent, next_action_onehot=None) -> Tensor:
        latent = nx.as_tensor(latent)
        if self.action_injection:
            if next_action_onehot is None:
                raise DimensionError("decoder expects the next action")
            a = nx.as_tensor(next_action_onehot)
            if a.shape[-1] != N_ACTIONS:
                raise DimensionError("next action must be a one-hot of length 25")
            return self.mlp(nx.concat([latent, a], axis=-1))
        return self.mlp(latent)


def one_hot_rows(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((len(actions), N_ACTIONS))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def previous_actions_onehot(traj: Trajectory) -> np.ndarray:
    """(T, 25): the action before each step; all zeros at the first step."""
    out = np.zeros((traj.T, N_ACTIONS))
    if traj.T > 1:
        out[np.arange(1, traj.T), traj.actions[:-1]] = 1.0
    return out


def make_encoder(variant: str, n_invariant: int, n_variant: int, rng: np.random.Generator,
                 f_out: int | None = None, n_conv: int | None = None,
                 latent_dim: int = LATENT_DIM) -> Module:
    """Build an encoder with the selected-hyperparameter defaults per variant."""
    if variant == "ae":
        return AEEncoder(n_invariant + n_variant, latent_dim, rng)
    if variant == "sage":
        return GNNEncoder(n_invariant, n_variant, "sage", f_out or 64, n_conv or 2, latent_dim, rng)
    if variant == "gatv2":
        return GNNEncoder(n_invariant, n_variant, "gatv2", f_out or 64, n_conv or 1, latent_dim, rng)
    raise ConfigError(f"unknown encoder {variant!r}; expected ae, sage or gatv2")
