"""Spatio-temporal scene graphs and their recurrent edge encodings."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Config
from .diffkernel import ops
from .diffkernel.layers import LSTMCell, LSTMState, Module
from .diffkernel.tape import Tensor
from .errors import ConfigurationError, InputError, ReencodeRequired

NEIGHBOR_CLASSES = Config.AGENT_TYPES
EDGE_FEATURES = 6
HISTORY_FEATURES = 2

EdgeKey = tuple[str, str]


@dataclass(frozen=True)
class AgentState:
    """Kinematic state of one agent at one timestep."""

    agent_id: str
    agent_type: str
    position: tuple[float, float]
    velocity: tuple[float, float]
    timestep: int
    heading: float | None = None

    def __post_init__(self) -> None:
        if self.agent_type not in Config.AGENT_TYPES:
            raise InputError(f"Unknown agent type '{self.agent_type}' for agent {self.agent_id}")
        if not all(math.isfinite(v) for v in (*self.position, *self.velocity)):
            raise InputError(f"Non-finite state for agent {self.agent_id} at step {self.timestep}")
        if self.heading is not None and not -math.pi <= self.heading < math.pi:
            raise InputError(f"Heading {self.heading} of agent {self.agent_id} outside [-pi, pi)")

    @property
    def speed(self) -> float:
        """Euclidean norm of the velocity."""
        return math.hypot(*self.velocity)

    def as_array(self) -> np.ndarray:
        """[x, y, vx, vy]."""
        return np.array([*self.position, *self.velocity], dtype=np.float64)


@dataclass(frozen=True)
class EdgeThresholds:
    """Interaction radius per agent-type pair."""

    pedestrian: float = 3.0
    vehicle: float = 30.0
    robot_class: str = "vehicle"

    def distance(self, type_u: str, type_v: str) -> float:
        """Radius d for a pair; a vehicle on either end selects the vehicle radius."""
        classes = {self.robot_class if t == "robot" else t for t in (type_u, type_v)}
        return self.vehicle if "vehicle" in classes else self.pedestrian


def _radius(threshold: float | EdgeThresholds, type_u: str, type_v: str) -> float:
    d = threshold.distance(type_u, type_v) if isinstance(threshold, EdgeThresholds) else float(threshold)
    if d <= 0:
        raise InputError(f"Interaction threshold must be positive, got {d}")
    return d


def edge_key(u: str, v: str) -> EdgeKey:
    """Canonical undirected key (min id, max id)."""
    return (u, v) if u < v else (v, u)


@dataclass
class EdgeState:
    """Lifecycle of one undirected edge; modulation is level / window."""

    level: int
    age: int
    in_range: bool
    paused: bool = False


@dataclass
class SceneGraph:
    """Agents and proximity edges at one timestep.

    `paused` holds agents that were observed at the previous step but are
    missing now; their edges are frozen for one step and dropped if the agent
    stays away longer.
    """

    timestep: int
    window: int
    nodes: dict[str, str]
    positions: dict[str, tuple[float, float]]
    edges: dict[EdgeKey, EdgeState]
    paused: dict[str, str] = field(default_factory=dict)

    def modulation(self, u: str, v: str) -> float:
        """Edge weight in [0, 1]; 0 when no edge exists."""
        edge = self.edges.get(edge_key(u, v))
        return 0.0 if edge is None else edge.level / self.window

    def has_edge(self, u: str, v: str) -> bool:
        """Symmetric membership test."""
        return edge_key(u, v) in self.edges

    def neighbors(self, focus: str) -> list[str]:
        """Ids sharing an edge with `focus`, sorted."""
        found = [v if u == focus else u for (u, v) in self.edges if focus in (u, v)]
        return sorted(found)

    def agent_type(self, agent_id: str) -> str:
        """Semantic type of a present or paused agent."""
        if agent_id in self.nodes:
            return self.nodes[agent_id]
        return self.paused[agent_id]

    def topology(self) -> frozenset[EdgeKey]:
        """Edge set without lifecycle data."""
        return frozenset(self.edges)

    def dump(self) -> str:
        """Human-readable text dump for debugging."""
        lines = [f"t={self.timestep} window={self.window} nodes={len(self.nodes)} edges={len(self.edges)}"]
        for agent_id in sorted(self.nodes):
            x, y = self.positions[agent_id]
            lines.append(f"  node {agent_id} [{self.nodes[agent_id]}] at ({x:.3f}, {y:.3f})")
        for agent_id in sorted(self.paused):
            lines.append(f"  node {agent_id} [{self.paused[agent_id]}] paused")
        for (u, v), edge in self.edges.items():
            flags = "" if edge.in_range else " fading"
            flags += " paused" if edge.paused else ""
            lines.append(f"  edge {u}--{v} age={edge.age} modulation={edge.level / self.window:.3f}{flags}")
        return "\n".join(lines)


def index_states(states: Sequence[AgentState]) -> dict[str, AgentState]:
    """Agent id to state for one timestep; mixed timesteps or duplicate ids are refused."""
    indexed: dict[str, AgentState] = {}
    timesteps = {s.timestep for s in states}
    if len(timesteps) > 1:
        raise InputError(f"States span several timesteps: {sorted(timesteps)}")
    for state in states:
        if state.agent_id in indexed:
            raise InputError(f"Duplicate agent id '{state.agent_id}'")
        indexed[state.agent_id] = state
    return indexed


def _pairs_in_range(indexed: dict[str, AgentState], threshold: float | EdgeThresholds) -> set[EdgeKey]:
    ids = sorted(indexed)
    pairs: set[EdgeKey] = set()
    for i, u in enumerate(ids):
        su = indexed[u]
        for v in ids[i + 1 :]:
            sv = indexed[v]
            d = _radius(threshold, su.agent_type, sv.agent_type)
            if math.hypot(su.position[0] - sv.position[0], su.position[1] - sv.position[1]) <= d:
                pairs.add((u, v))
    return pairs


def build_graph(states: Sequence[AgentState], threshold: float | EdgeThresholds, window: int = 4) -> SceneGraph:
    """Graph of one timestep from scratch; every edge starts fully established."""
    if window < 1:
        raise InputError(f"Ramp window must be >= 1, got {window}")
    indexed = index_states(states)
    timestep = next(iter(indexed.values())).timestep if indexed else 0
    pairs = _pairs_in_range(indexed, threshold)
    return SceneGraph(
        timestep=timestep,
        window=window,
        nodes={i: indexed[i].agent_type for i in sorted(indexed)},
        positions={i: indexed[i].position for i in sorted(indexed)},
        edges={key: EdgeState(level=window, age=1, in_range=True) for key in sorted(pairs)},
    )


def update_graph(
    prev: SceneGraph,
    states: Sequence[AgentState],
    threshold: float | EdgeThresholds,
    window: int | None = None,
) -> SceneGraph:
    """Advance a graph by one timestep.

    New edges enter at 1/W and ramp up by 1/W per step while the distance
    condition holds; failing edges ramp down by 1/W and are dropped at 0.
    Agents missing for one step keep their edges frozen; a longer gap drops them.
    """
    window = window or prev.window
    if window < 1:
        raise InputError(f"Ramp window must be >= 1, got {window}")
    indexed = index_states(states)
    timestep = next(iter(indexed.values())).timestep if indexed else prev.timestep + 1
    if timestep != prev.timestep + 1:
        raise InputError(f"Expected states at step {prev.timestep + 1}, got {timestep}")

    in_range = _pairs_in_range(indexed, threshold)
    # Agents seen at t but missing at t+1 are paused; agents already paused are dropped.
    paused = {i: t for i, t in prev.nodes.items() if i not in indexed}

    edges: dict[EdgeKey, EdgeState] = {}
    for key in sorted(set(prev.edges) | in_range):
        u, v = key
        old = prev.edges.get(key)
        present = u in indexed and v in indexed
        if not present:
            if old is not None and all(a in indexed or a in paused for a in key):
                edges[key] = EdgeState(level=old.level, age=old.age, in_range=old.in_range, paused=True)
            continue
        holds = key in in_range
        if old is None:
            if holds:
                edges[key] = EdgeState(level=1, age=1, in_range=True)
            continue
        level = min(window, old.level + 1) if holds else min(window, old.level) - 1
        if level <= 0:
            continue
        edges[key] = EdgeState(level=level, age=old.age + 1, in_range=holds)

    return SceneGraph(
        timestep=timestep,
        window=window,
        nodes={i: indexed[i].agent_type for i in sorted(indexed)},
        positions={i: indexed[i].position for i in sorted(indexed)},
        edges=edges,
        paused=paused,
    )


def graph_sequence(
    frames: Sequence[Sequence[AgentState]], threshold: float | EdgeThresholds, window: int
) -> list[SceneGraph]:
    """build_graph on the first frame, update_graph on every later one."""
    if not frames:
        return []
    graphs = [build_graph(frames[0], threshold, window)]
    for frame in frames[1:]:
        graphs.append(update_graph(graphs[-1], frame, threshold, window))
    return graphs


# Encodings


def history_features(state: np.ndarray, velocity_scale: float) -> np.ndarray:
    """Focus-agent recurrent input: scaled velocity."""
    return np.asarray(state, dtype=np.float64)[..., 2:4] / velocity_scale


def edge_features(focus: np.ndarray, neighbor: np.ndarray, position_scale: float, velocity_scale: float) -> np.ndarray:
    """Edge recurrent input: neighbor state relative to the focus agent, plus focus velocity."""
    focus = np.asarray(focus, dtype=np.float64)
    rel = np.asarray(neighbor, dtype=np.float64) - focus
    return np.concatenate(
        [rel[..., 0:2] / position_scale, rel[..., 2:4] / velocity_scale, focus[..., 2:4] / velocity_scale],
        axis=-1,
    )


@dataclass
class EdgeTrack:
    """Per-step recurrent inputs and masks of one directed edge over a window."""

    neighbor_id: str
    neighbor_type: str
    inputs: np.ndarray
    update: np.ndarray
    hold: np.ndarray
    modulation: float


def collect_edge_tracks(
    graphs: Sequence[SceneGraph],
    histories: dict[str, np.ndarray],
    focus_id: str,
    position_scale: float,
    velocity_scale: float,
) -> list[EdgeTrack]:
    """Edge tracks of every neighbor connected to `focus_id` in the last graph.

    `histories` maps agent ids to (T, 4) [x, y, vx, vy] arrays aligned with
    `graphs`, NaN where an agent is unobserved. At each step an edge updates when
    both agents are observed, holds while paused, and resets while absent.
    """
    if not graphs:
        return []
    final = graphs[-1]
    if focus_id not in final.nodes and focus_id not in final.paused:
        raise InputError(f"Focus agent '{focus_id}' is not in the graph at step {final.timestep}")
    steps = len(graphs)
    tracks = []
    for neighbor in final.neighbors(focus_id):
        inputs = np.zeros((steps, EDGE_FEATURES))
        update = np.zeros(steps)
        hold = np.zeros(steps)
        for t, graph in enumerate(graphs):
            edge = graph.edges.get(edge_key(focus_id, neighbor))
            if edge is None:
                continue
            if edge.paused:
                hold[t] = 1.0
                continue
            update[t] = 1.0
            inputs[t] = edge_features(histories[focus_id][t], histories[neighbor][t], position_scale, velocity_scale)
        tracks.append(
            EdgeTrack(
                neighbor_id=neighbor,
                neighbor_type=final.agent_type(neighbor),
                inputs=inputs,
                update=update,
                hold=hold,
                modulation=final.modulation(focus_id, neighbor),
            )
        )
    return tracks


class EdgeEncoderBank(Module):
    """One LSTM edge encoder per neighbor type class.

    Outputs are scaled by their edge's modulation, summed within a class and
    concatenated across classes, so the result size does not depend on how many
    neighbors there are.
    """

    def __init__(self, hidden_size: int, rng: np.random.Generator, classes: Sequence[str] = NEIGHBOR_CLASSES):
        self.hidden_size = hidden_size
        self.classes = tuple(classes)
        self.cells = {cls: LSTMCell(EDGE_FEATURES, hidden_size, rng) for cls in self.classes}

    @property
    def output_size(self) -> int:
        """Length of the aggregated neighbor vector."""
        return len(self.classes) * self.hidden_size

    def encode(self, tracks_per_example: Sequence[Sequence[EdgeTrack]]) -> Tensor:
        """Aggregate (B, output_size) neighbor vectors for a batch of examples."""
        batch = len(tracks_per_example)
        for tracks in tracks_per_example:
            for track in tracks:
                if track.neighbor_type not in self.cells:
                    raise ConfigurationError(f"No edge encoder for neighbor type '{track.neighbor_type}'")
        blocks: list[Tensor] = []
        for cls in self.classes:
            rows = [(b, t) for b, tracks in enumerate(tracks_per_example) for t in tracks if t.neighbor_type == cls]
            if not rows:
                blocks.append(Tensor(np.zeros((batch, self.hidden_size))))
                continue
            inputs = np.stack([t.inputs for _, t in rows], axis=1)
            update = np.stack([t.update for _, t in rows], axis=1)[..., None]
            hold = np.stack([t.hold for _, t in rows], axis=1)[..., None]
            modulation = np.array([[t.modulation] for _, t in rows])
            assign = np.zeros((batch, len(rows)))
            for column, (b, _) in enumerate(rows):
                assign[b, column] = 1.0
            cell = self.cells[cls]
            state = cell.zero_state(len(rows))
            for t in range(inputs.shape[0]):
                state = cell.masked_step(inputs[t], state, update[t], hold[t])
            blocks.append(ops.matmul(assign, state.h * modulation))
        return ops.concat(blocks, axis=-1)


def encode_edges(
    graphs: SceneGraph | Sequence[SceneGraph],
    histories: dict[str, np.ndarray],
    focus_id: str,
    bank: EdgeEncoderBank,
    position_scale: float = 1.0,
    velocity_scale: float = 1.0,
) -> Tensor:
    """Aggregated neighbor vector of one focus agent.

    With a single graph every edge in it is treated as present over the whole
    history; with a sequence, edge lifecycles follow the graphs step by step.
    """
    if isinstance(graphs, SceneGraph):
        steps = len(next(iter(histories.values()))) if histories else 1
        graphs = [graphs] * steps
    tracks = collect_edge_tracks(graphs, histories, focus_id, position_scale, velocity_scale)
    return bank.encode([tracks])[0]


# Online update-and-predict state


@dataclass
class OnlineEncodings:
    """Stateful recurrent representation of a scene after processing steps 1..t."""

    timestep: int
    history: dict[str, LSTMState] = field(default_factory=dict)
    edges: dict[EdgeKey, LSTMState] = field(default_factory=dict)
    observed: dict[str, np.ndarray] = field(default_factory=dict)


class OnlineSceneEncoder:
    """Advances history and edge encoders one step at a time as observations stream in."""

    def __init__(
        self,
        history_cell: LSTMCell,
        bank: EdgeEncoderBank,
        threshold: float | EdgeThresholds,
        window: int,
        focus_types: Sequence[str],
        position_scale: float,
        velocity_scale: float,
    ):
        self.history_cell = history_cell
        self.bank = bank
        self.threshold = threshold
        self.window = window
        self.focus_types = tuple(focus_types)
        self.position_scale = position_scale
        self.velocity_scale = velocity_scale

    def start(self, states: Sequence[AgentState]) -> tuple[SceneGraph, OnlineEncodings]:
        """Encode the first observation of a scene."""
        graph = build_graph(states, self.threshold, self.window)
        empty = OnlineEncodings(timestep=graph.timestep - 1)
        return graph, self.advance(graph, empty, index_states(states))

    def incremental_update(
        self, graph: SceneGraph, encodings: OnlineEncodings, observations: Sequence[AgentState]
    ) -> tuple[SceneGraph, OnlineEncodings]:
        """Feed one new timestep to every recurrent encoder."""
        indexed = index_states(observations)
        timestep = next(iter(indexed.values())).timestep if indexed else graph.timestep + 1
        if timestep > graph.timestep + 1:
            raise ReencodeRequired(f"Observation gap: graph at step {graph.timestep}, observations at {timestep}")
        if timestep <= graph.timestep:
            raise InputError(f"Stale observations at step {timestep}; graph already at {graph.timestep}")
        new_graph = update_graph(graph, observations, self.threshold, self.window)
        return new_graph, self.advance(new_graph, encodings, indexed)

    def advance(self, graph: SceneGraph, encodings: OnlineEncodings, indexed: dict[str, AgentState]) -> OnlineEncodings:
        """Step every recurrent encoder once for a graph already updated to the observations in `indexed`."""
        observed = {i: s.as_array() for i, s in indexed.items()}
        history = dict(encodings.history)
        focus = sorted(i for i, s in indexed.items() if s.agent_type in self.focus_types)
        if focus:
            cell = self.history_cell
            prev = [history.get(i) or cell.zero_state() for i in focus]
            state = LSTMState(ops.stack([p.h for p in prev]), ops.stack([p.c for p in prev]))
            inputs = np.stack([history_features(observed[i], self.velocity_scale) for i in focus])
            state = cell.step(inputs, state)
            for row, agent_id in enumerate(focus):
                history[agent_id] = LSTMState(Tensor(state.h.value[row]), Tensor(state.c.value[row]))

        edges: dict[EdgeKey, LSTMState] = {}
        pending: dict[str, list[tuple[EdgeKey, np.ndarray, LSTMState]]] = {}
        for u, v in graph.edges:
            for focus_id, neighbor in ((u, v), (v, u)):
                if graph.agent_type(focus_id) not in self.focus_types:
                    continue
                directed = (focus_id, neighbor)
                edge = graph.edges[(u, v)]
                cell = self.bank.cells.get(graph.agent_type(neighbor))
                if cell is None:
                    raise ConfigurationError(f"No edge encoder for neighbor type '{graph.agent_type(neighbor)}'")
                previous = encodings.edges.get(directed) or cell.zero_state()
                if edge.paused:
                    edges[directed] = previous
                    continue
                features = edge_features(
                    observed[focus_id], observed[neighbor], self.position_scale, self.velocity_scale
                )
                pending.setdefault(graph.agent_type(neighbor), []).append((directed, features, previous))
        for cls, rows in pending.items():
            cell = self.bank.cells[cls]
            state = LSTMState(ops.stack([r[2].h for r in rows]), ops.stack([r[2].c for r in rows]))
            state = cell.step(np.stack([r[1] for r in rows]), state)
            for i, (directed, _, _) in enumerate(rows):
                edges[directed] = LSTMState(Tensor(state.h.value[i]), Tensor(state.c.value[i]))
        logging.debug(f"Online step {graph.timestep}: {len(focus)} focus agents, {len(edges)} directed edges")
        return OnlineEncodings(timestep=graph.timestep, history=history, edges=edges, observed=observed)

    def neighbor_vector(self, graph: SceneGraph, encodings: OnlineEncodings, focus_id: str) -> np.ndarray:
        """Aggregated, modulated neighbor vector of a focus agent from the online state."""
        hidden = self.bank.hidden_size
        blocks = {cls: np.zeros(hidden) for cls in self.bank.classes}
        for neighbor in graph.neighbors(focus_id):
            state = encodings.edges.get((focus_id, neighbor))
            if state is None:
                continue
            blocks[graph.agent_type(neighbor)] += state.h.value * graph.modulation(focus_id, neighbor)
        return np.concatenate([blocks[cls] for cls in self.bank.classes])

    def full_encode(self, frames: Sequence[Sequence[AgentState]], focus_id: str) -> tuple[LSTMState, np.ndarray]:
        """Re-encode a focus agent from scratch over all frames (the reference for incremental updates)."""
        graphs = graph_sequence(frames, self.threshold, self.window)
        steps = len(frames)
        ids = sorted({s.agent_id for frame in frames for s in frame})
        histories = {i: np.full((steps, 4), np.nan) for i in ids}
        for t, frame in enumerate(frames):
            for state in frame:
                histories[state.agent_id][t] = state.as_array()

        focus_hist = histories[focus_id]
        present = ~np.isnan(focus_hist[:, 0])
        inputs = history_features(np.nan_to_num(focus_hist), self.velocity_scale)[:, None, :]
        state = self.history_cell.zero_state(1)
        for t in range(steps):
            upd = np.array([[1.0 if present[t] else 0.0]])
            state = self.history_cell.masked_step(inputs[t], state, upd, 1.0 - upd)
        tracks = collect_edge_tracks(graphs, histories, focus_id, self.position_scale, self.velocity_scale)
        neighbors = self.bank.encode([tracks])
        return LSTMState(Tensor(state.h.value[0]), Tensor(state.c.value[0])), neighbors.value[0]


def incremental_update(
    encoder: OnlineSceneEncoder, graph: SceneGraph, encodings: OnlineEncodings, observations: Sequence[AgentState]
) -> tuple[SceneGraph, OnlineEncodings]:
    """Functional form of OnlineSceneEncoder.incremental_update."""
    return encoder.incremental_update(graph, encodings, observations)
