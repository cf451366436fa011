"""Heterogeneous trajectory graphs and their prefix snapshots.

Node types: ``patient`` (time-invariant features), ``timestep`` (time-variant
features), ``terminal`` (reward). Edge types:

* ``action``: timestep t -> timestep t+1, attribute one_hot(action taken at t)
* ``patient_to_timestep`` / ``timestep_to_patient``: weight 1 in both directions
* ``terminal``: last timestep -> terminal node, no attributes
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import N_ACTIONS, FeatureSchema, Trajectory
from .errors import DataError

PATIENT, TIMESTEP, TERMINAL = "patient", "timestep", "terminal"
ACTION = "action"
PATIENT_TO_TIMESTEP = "patient_to_timestep"
TIMESTEP_TO_PATIENT = "timestep_to_patient"
TO_TERMINAL = "terminal"

# relations fed to the encoder, as (source type, relation, target type)
RELATIONS = (
    (TIMESTEP, ACTION, TIMESTEP),
    (PATIENT, PATIENT_TO_TIMESTEP, TIMESTEP),
    (TIMESTEP, TIMESTEP_TO_PATIENT, PATIENT),
)
EDGE_DIMS = {ACTION: N_ACTIONS, PATIENT_TO_TIMESTEP: 1, TIMESTEP_TO_PATIENT: 1}


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    type: str
    features: np.ndarray
    time: int = -1  # step index for timestep nodes


@dataclass(frozen=True, eq=False)
class Edge:
    src: str
    dst: str
    type: str
    attrs: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True, eq=False)
class TrajectoryGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    trajectory_id: str = ""

    def nodes_of(self, type_: str) -> list[Node]:
        return [n for n in self.nodes if n.type == type_]

    def edges_of(self, type_: str) -> list[Edge]:
        return [e for e in self.edges if e.type == type_]


@dataclass(frozen=True, eq=False)
class GraphSnapshot(TrajectoryGraph):
    t: int = 1  # number of timesteps included


def one_hot_action(a: int) -> np.ndarray:
    if not 0 <= int(a) < N_ACTIONS or int(a) != a:
        raise DataError(f"action {a} outside [0, 24]")
    v = np.zeros(N_ACTIONS)
    v[int(a)] = 1.0
    return v


def _ts_id(t: int) -> str:
    return f"ts{t}"


def build_trajectory_graph(traj: Trajectory, schema: FeatureSchema | None = None) -> TrajectoryGraph:
    schema = (schema or FeatureSchema()).storage()
    if traj.invariant_obs.shape != (len(schema.invariant_names),) or \
            traj.steps.shape[1] != len(schema.variant_names):
        raise DataError(f"trajectory {traj.id} does not match the feature schema")
    nodes = [Node("patient", PATIENT, traj.invariant_obs)]
    nodes += [Node(_ts_id(t), TIMESTEP, traj.steps[t], t) for t in range(traj.T)]
    nodes.append(Node("terminal", TERMINAL, np.array([float(traj.reward)])))
    unit = np.ones(1)
    edges = []
    for t in range(traj.T):
        edges.append(Edge("patient", _ts_id(t), PATIENT_TO_TIMESTEP, unit))
        edges.append(Edge(_ts_id(t), "patient", TIMESTEP_TO_PATIENT, unit))
    for t in range(traj.T - 1):
        edges.append(Edge(_ts_id(t), _ts_id(t + 1), ACTION, one_hot_action(traj.actions[t])))
    edges.append(Edge(_ts_id(traj.T - 1), "terminal", TO_TERMINAL))
    return TrajectoryGraph(tuple(nodes), tuple(edges), traj.id)


def snapshot(graph: TrajectoryGraph, t: int) -> GraphSnapshot:
    """Prefix subgraph g_t: the patient node and timesteps 1..t (no terminal)."""
    keep = {n.id for n in graph.nodes if n.type == PATIENT or (n.type == TIMESTEP and n.time < t)}
    nodes = tuple(n for n in graph.nodes if n.id in keep)
    edges = tuple(e for e in graph.edges if e.src in keep and e.dst in keep)
    return GraphSnapshot(nodes, edges, graph.trajectory_id, t)


def snapshots(graph: TrajectoryGraph) -> list[GraphSnapshot]:
    T = len(graph.nodes_of(TIMESTEP))
    return [snapshot(graph, t) for t in range(1, T + 1)]


def validate_graph(g: TrajectoryGraph) -> list[str]:
    """Every violated invariant, as short tags with detail; empty means valid."""
    problems: list[str] = []
    is_snap = isinstance(g, GraphSnapshot)
    by_id = {}
    for n in g.nodes:
        if n.id in by_id:
            problems.append(f"duplicate-node: {n.id}")
        by_id[n.id] = n
    patients = g.nodes_of(PATIENT)
    timesteps = sorted(g.nodes_of(TIMESTEP), key=lambda n: n.time)
    terminals = g.nodes_of(TERMINAL)
    T = len(timesteps)
    if len(patients) != 1:
        problems.append(f"patient-count: {len(patients)} patient nodes")
    if is_snap:
        if terminals:
            problems.append("terminal-in-snapshot")
        if g.t < 1 or T != g.t:
            problems.append(f"snapshot-size: t={g.t} with {T} timestep nodes")
    elif len(terminals) != 1:
        problems.append(f"terminal-count: {len(terminals)} terminal nodes")
    if [n.time for n in timesteps] != list(range(T)):
        problems.append("timestep-times: not 0..T-1")

    for e in g.edges:
        if e.src not in by_id or e.dst not in by_id:
            problems.append(f"dangling-edge: {e.src}->{e.dst}")
    known = {e for e in g.edges if e.src in by_id and e.dst in by_id}

    def typed(t):
        return [e for e in known if e.type == t]

    for e in known:
        if e.type not in (ACTION, PATIENT_TO_TIMESTEP, TIMESTEP_TO_PATIENT, TO_TERMINAL):
            problems.append(f"unknown-edge-type: {e.type}")

    pt, tp = typed(PATIENT_TO_TIMESTEP), typed(TIMESTEP_TO_PATIENT)
    pt_ok = all(by_id[e.src].type == PATIENT and by_id[e.dst].type == TIMESTEP for e in pt)
    tp_ok = all(by_id[e.src].type == TIMESTEP and by_id[e.dst].type == PATIENT for e in tp)
    if not (pt_ok and tp_ok):
        problems.append("patient-edge-endpoints")
    if sorted(e.dst for e in pt) != sorted(n.id for n in timesteps) or \
            sorted(e.src for e in tp) != sorted(n.id for n in timesteps):
        problems.append(f"patient-edge-count: {len(pt) + len(tp)} for {T} timesteps")
    if any(e.attrs.shape != (1,) or e.attrs[0] != 1.0 for e in pt + tp):
        problems.append("patient-edge-weight")

    actions = typed(ACTION)
    if len(actions) != max(T - 1, 0):
        problems.append(f"action-edge-count: {len(actions)} for {T} timesteps")
    for e in actions:
        a, b = by_id[e.src], by_id[e.dst]
        if a.type != TIMESTEP or b.type != TIMESTEP or b.time != a.time + 1:
            problems.append(f"non-path action edges: {e.src}->{e.dst}")
            break
    if len({e.src for e in actions}) != len(actions):
        problems.append("non-path action edges: repeated source")
    for e in actions:
        if e.attrs.shape != (N_ACTIONS,) or e.attrs.sum() != 1.0 or set(np.unique(e.attrs)) - {0.0, 1.0}:
            problems.append(f"action-attribute: {e.src}->{e.dst} is not a one-hot of length 25")
            break

    term_edges = typed(TO_TERMINAL)
    if is_snap:
        if term_edges:
            problems.append("terminal-edge-in-snapshot")
    else:
        last = timesteps[-1].id if timesteps else None
        if len(term_edges) != 1 or term_edges[0].src != last or \
                by_id[term_edges[0].dst].type != TERMINAL:
            problems.append("terminal-edge: must join the last timestep to the terminal node")
        elif term_edges[0].attrs.size:
            problems.append("terminal-edge-attributes")
        if terminals and terminals[0].features.tolist() not in ([1.0], [-1.0]):
            problems.append("terminal-reward")
    return problems


def to_edge_list(g: TrajectoryGraph) -> str:
    """Plain-text dump for inspection (not a stable format)."""
    fmt = lambda v: " ".join(f"{x:.6g}" for x in v)  # noqa: E731
    lines = [f"node {n.id} {n.type} {fmt(n.features)}".rstrip() for n in g.nodes]
    lines += [f"edge {e.src} {e.dst} {e.type} {fmt(e.attrs)}".rstrip() for e in g.edges]
    return "\n".join(lines) + "\n"
