"""Tests for scene graphs, edge modulation, edge encoders and the online encoder."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forecast.diffkernel.layers import LSTMCell
from forecast.errors import ConfigurationError, InputError, ReencodeRequired
from forecast.stg import (
    EDGE_FEATURES,
    AgentState,
    EdgeEncoderBank,
    EdgeThresholds,
    EdgeTrack,
    OnlineSceneEncoder,
    build_graph,
    collect_edge_tracks,
    edge_key,
    encode_edges,
    graph_sequence,
    incremental_update,
    update_graph,
)


def agent(agent_id, x, y, t=0, vx=0.0, vy=0.0, kind="pedestrian"):
    """Shorthand AgentState."""
    return AgentState(agent_id, kind, (x, y), (vx, vy), t)


def relative_difference(a, b):
    """max |a - b| / max |b|."""
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-12))


def random_scene(rng, steps=8, agents=5, drop=None):
    """Random-walk pedestrians plus one vehicle; `drop` = (agent index, timestep) removes one observation."""
    positions = rng.uniform(-3.0, 3.0, (agents, 2))
    velocities = rng.normal(0.0, 0.5, (agents, 2))
    frames = []
    for t in range(steps):
        frame = []
        for i in range(agents):
            if drop is not None and drop == (i, t):
                continue
            kind = "vehicle" if i == agents - 1 else "pedestrian"
            frame.append(agent(f"a{i}", *positions[i], t=t, vx=velocities[i, 0], vy=velocities[i, 1], kind=kind))
        frames.append(frame)
        velocities += rng.normal(0.0, 0.3, velocities.shape)
        positions += 0.4 * velocities
    return frames


def histories_of(frames):
    """(T, 4) arrays per agent, NaN where unobserved."""
    ids = sorted({s.agent_id for frame in frames for s in frame})
    out = {i: np.full((len(frames), 4), np.nan) for i in ids}
    for t, frame in enumerate(frames):
        for s in frame:
            out[s.agent_id][t] = s.as_array()
    return out


class TestAgentState:
    """Validation of per-agent states."""

    def test_rejects_unknown_type(self):
        """Only pedestrian, vehicle and robot are known."""
        with pytest.raises(InputError):
            AgentState("a", "bicycle", (0.0, 0.0), (0.0, 0.0), 0)

    def test_rejects_bad_heading_and_non_finite(self):
        """Heading must lie in [-pi, pi) and the state must be finite."""
        with pytest.raises(InputError):
            AgentState("a", "vehicle", (0.0, 0.0), (0.0, 0.0), 0, heading=math.pi)
        with pytest.raises(InputError):
            AgentState("a", "vehicle", (0.0, 0.0), (math.inf, 0.0), 0)

    def test_speed(self):
        """Speed is the velocity norm."""
        assert agent("a", 0, 0, vx=3.0, vy=4.0).speed == pytest.approx(5.0)


class TestBuildGraph:
    """Construction of a graph from one timestep."""

    def test_within_threshold(self):
        """Agents 1 m apart with d = 2 share an edge."""
        graph = build_graph([agent("a", 0, 0), agent("b", 1, 0)], 2.0)
        assert graph.has_edge("a", "b") and graph.has_edge("b", "a")
        assert graph.modulation("a", "b") == 1.0

    def test_beyond_threshold(self):
        """Agents 3 m apart with d = 2 do not."""
        graph = build_graph([agent("a", 0, 0), agent("b", 3, 0)], 2.0)
        assert not graph.edges
        assert graph.modulation("a", "b") == 0.0

    def test_matches_brute_force(self, rng):
        """Edge set equals the all-pairs distance check on random scenes."""
        for _ in range(20):
            points = rng.uniform(0.0, 20.0, (10, 2))
            states = [agent(f"a{i}", *p) for i, p in enumerate(points)]
            graph = build_graph(states, 5.0)
            expected = {
                edge_key(f"a{i}", f"a{j}")
                for i, j in itertools.combinations(range(10), 2)
                if np.linalg.norm(points[i] - points[j]) <= 5.0
            }
            assert set(graph.edges) == expected
            assert list(graph.edges) == sorted(graph.edges)

    def test_duplicate_ids(self):
        """Two states with one id are an input error."""
        with pytest.raises(InputError):
            build_graph([agent("a", 0, 0), agent("a", 1, 0)], 2.0)

    def test_mixed_timesteps(self):
        """States must share their timestep."""
        with pytest.raises(InputError):
            build_graph([agent("a", 0, 0, t=0), agent("b", 1, 0, t=1)], 2.0)

    def test_non_positive_threshold(self):
        """d must be positive."""
        with pytest.raises(InputError):
            build_graph([agent("a", 0, 0), agent("b", 1, 0)], 0.0)

    def test_type_dependent_thresholds(self):
        """A vehicle (or robot, counted as a vehicle) on either end selects the larger radius."""
        thresholds = EdgeThresholds(pedestrian=3.0, vehicle=30.0)
        assert thresholds.distance("pedestrian", "pedestrian") == 3.0
        assert thresholds.distance("pedestrian", "vehicle") == 30.0
        assert thresholds.distance("robot", "pedestrian") == 30.0
        graph = build_graph([agent("a", 0, 0), agent("b", 10, 0), agent("c", 20, 0, kind="vehicle")], thresholds)
        assert set(graph.edges) == {("a", "c"), ("b", "c")}

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(list(range(6))), st.integers(0, 2**16))
    def test_permutation_invariance(self, order, seed):
        """Reordering the input agents leaves the graph unchanged."""
        points = np.random.default_rng(seed).uniform(0.0, 6.0, (6, 2))
        states = [agent(f"a{i}", *p) for i, p in enumerate(points)]
        reference = build_graph(states, 2.5)
        shuffled = build_graph([states[i] for i in order], 2.5)
        assert shuffled.edges == reference.edges
        assert shuffled.nodes == reference.nodes

    def test_dump(self):
        """The text dump names nodes and edges."""
        text = build_graph([agent("a", 0, 0), agent("b", 1, 0)], 2.0).dump()
        assert "node a [pedestrian]" in text
        assert "edge a--b" in text


class TestUpdateGraph:
    """Edge lifecycle and modulation ramps."""

    @staticmethod
    def _walk(distances, window):
        frames = [[agent("a", 0, 0, t=t), agent("b", d, 0, t=t)] for t, d in enumerate(distances)]
        return graph_sequence(frames, 2.0, window)

    def test_ramp_up(self):
        """A new edge ramps 0.25, 0.5, 0.75, 1.0 with W = 4."""
        graphs = self._walk([5, 1, 1, 1, 1, 1], 4)
        assert [g.modulation("a", "b") for g in graphs] == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]

    def test_ramp_down_and_drop(self):
        """A failing edge ramps down by 1/W and is dropped at zero."""
        graphs = self._walk([1, 5, 5, 5, 5, 5], 4)
        assert [g.modulation("a", "b") for g in graphs] == [1.0, 0.75, 0.5, 0.25, 0.0, 0.0]
        assert not graphs[-2].has_edge("a", "b")
        assert not graphs[1].edges[("a", "b")].in_range

    def test_window_one_is_indicator(self):
        """With W = 1 the modulation is the distance indicator."""
        distances = [1, 5, 1, 1, 5, 1]
        graphs = self._walk(distances, 1)
        assert [g.modulation("a", "b") for g in graphs] == [1.0 if d <= 2 else 0.0 for d in distances]

    def test_toggling_stays_bounded(self):
        """A condition that flips every step keeps the modulation inside [0, 1]."""
        graphs = self._walk([1, 5] * 10, 4)
        values = [g.modulation("a", "b") for g in graphs]
        assert set(values) == {1.0, 0.75}

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 6))
    def test_modulation_bounds(self, pattern, window):
        """Any in/out pattern keeps modulation in [0, 1]; W consecutive holds give exactly 1."""
        graphs = self._walk([1 if inside else 5 for inside in pattern], window)
        values = [g.modulation("a", "b") for g in graphs]
        assert all(0.0 <= v <= 1.0 for v in values)
        run = 0
        for inside, value in zip(pattern, values):
            run = run + 1 if inside else 0
            if run >= window:
                assert value == 1.0

    def test_monotone_while_persisting(self):
        """Modulation never decreases while the condition holds and never increases after it fails."""
        graphs = self._walk([5, 1, 1, 1, 5, 5, 5], 4)
        values = [g.modulation("a", "b") for g in graphs]
        assert values[1] <= values[2] <= values[3]
        assert values[4] >= values[5] >= values[6]

    def test_single_step_absence_pauses(self):
        """An agent missing for one step keeps its edge frozen; a second missing step drops it."""
        frames = [
            [agent("a", 0, 0, t=0), agent("b", 1, 0, t=0)],
            [agent("a", 0, 0, t=1)],
            [agent("a", 0, 0, t=2), agent("b", 1, 0, t=2)],
        ]
        graphs = graph_sequence(frames, 2.0, 4)
        paused = graphs[1].edges[("a", "b")]
        assert paused.paused and paused.level == 4
        assert graphs[1].agent_type("b") == "pedestrian"
        assert graphs[2].edges[("a", "b")].age == 2

        longer = graph_sequence([frames[0], frames[1], [agent("a", 0, 0, t=2)]], 2.0, 4)
        assert not longer[2].edges

    def test_unchanged_topology(self):
        """Static agents keep the same topology."""
        frames = [[agent("a", 0, 0, t=t), agent("b", 1, 0, t=t), agent("c", 9, 9, t=t)] for t in range(3)]
        graphs = graph_sequence(frames, 2.0, 4)
        assert graphs[0].topology() == graphs[1].topology() == graphs[2].topology()

    def test_wrong_timestep(self):
        """Updates must move exactly one step forward."""
        graph = build_graph([agent("a", 0, 0, t=0)], 2.0)
        with pytest.raises(InputError):
            update_graph(graph, [agent("a", 0, 0, t=2)], 2.0)


class TestEdgeEncoders:
    """Aggregated neighbor encodings."""

    def _bank(self, rng):
        return EdgeEncoderBank(5, rng)

    @staticmethod
    def _track(inputs, modulation=1.0, kind="pedestrian", neighbor="n"):
        steps = len(inputs)
        return EdgeTrack(neighbor, kind, np.asarray(inputs), np.ones(steps), np.zeros(steps), modulation)

    def test_zero_neighbors(self, rng):
        """No neighbors gives a zero vector of the fixed size."""
        bank = self._bank(rng)
        out = bank.encode([[]])
        assert out.shape == (1, bank.output_size)
        np.testing.assert_array_equal(out.value, 0.0)

    def test_fixed_size(self, rng):
        """Output size does not depend on the neighbor count."""
        bank = self._bank(rng)
        inputs = rng.standard_normal((4, EDGE_FEATURES))
        out = bank.encode([[self._track(inputs)] * k for k in range(5)])
        assert out.shape == (5, bank.output_size)

    def test_sum_aggregation(self, rng):
        """Two identical neighbors give twice one neighbor's encoding."""
        bank = self._bank(rng)
        inputs = rng.standard_normal((4, EDGE_FEATURES))
        one = bank.encode([[self._track(inputs)]]).value
        two = bank.encode([[self._track(inputs), self._track(inputs, neighbor="m")]]).value
        np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12)

    def test_zero_modulation_is_absence(self, rng):
        """A neighbor with modulation 0 contributes nothing."""
        bank = self._bank(rng)
        a = self._track(rng.standard_normal((4, EDGE_FEATURES)))
        b = self._track(rng.standard_normal((4, EDGE_FEATURES)), modulation=0.0, neighbor="m")
        np.testing.assert_allclose(bank.encode([[a, b]]).value, bank.encode([[a]]).value)

    def test_modulation_scales_output(self, rng):
        """Modulated output equals modulation times the raw recurrent output."""
        bank = self._bank(rng)
        inputs = rng.standard_normal((4, EDGE_FEATURES))
        full = bank.encode([[self._track(inputs)]]).value
        half = bank.encode([[self._track(inputs, modulation=0.5)]]).value
        np.testing.assert_allclose(half, 0.5 * full)

    def test_neighbor_order_invariance(self, rng):
        """Sum aggregation is invariant to the order of neighbors."""
        bank = self._bank(rng)
        tracks = [
            self._track(rng.standard_normal((4, EDGE_FEATURES)), kind=kind, neighbor=f"n{i}")
            for i, kind in enumerate(["pedestrian", "vehicle", "pedestrian", "robot"])
        ]
        forward = bank.encode([tracks]).value
        backward = bank.encode([tracks[::-1]]).value
        np.testing.assert_allclose(forward, backward, rtol=1e-12, atol=1e-15)

    def test_types_land_in_their_blocks(self, rng):
        """Each neighbor class fills its own block of the aggregate."""
        bank = self._bank(rng)
        out = bank.encode([[self._track(rng.standard_normal((3, EDGE_FEATURES)), kind="vehicle")]]).value[0]
        h = bank.hidden_size
        np.testing.assert_array_equal(out[:h], 0.0)
        assert np.any(out[h : 2 * h] != 0.0)
        np.testing.assert_array_equal(out[2 * h :], 0.0)

    def test_unknown_type(self, rng):
        """A neighbor class without an encoder is a configuration error."""
        bank = EdgeEncoderBank(4, rng, classes=("pedestrian",))
        with pytest.raises(ConfigurationError):
            bank.encode([[self._track(np.zeros((2, EDGE_FEATURES)), kind="vehicle")]])

    def test_encoder_gradients(self, gradcheck, rng):
        """Gradients through masked edge encoding reach the cell weights."""
        bank = EdgeEncoderBank(3, rng, classes=("pedestrian",))
        tracks = [
            EdgeTrack("n", "pedestrian", rng.standard_normal((4, EDGE_FEATURES)), np.array([0, 1, 1, 1.0]),
                      np.array([0, 0, 0, 0.0]), 0.75),
            EdgeTrack("m", "pedestrian", rng.standard_normal((4, EDGE_FEATURES)), np.array([1, 0, 1, 1.0]),
                      np.array([0, 1, 0, 0.0]), 1.0),
        ]

        def encode(weight):
            bank.cells["pedestrian"].weight = weight
            return bank.encode([tracks, tracks[:1]])

        for seed in range(10):
            assert gradcheck(encode, rng.standard_normal((12, EDGE_FEATURES + 3)) * 0.5, seed=seed) < 1e-4

    def test_encode_edges_permutation_invariance(self, rng):
        """Reordering the agent list does not change the focus agent's aggregate."""
        bank = self._bank(rng)
        frames = random_scene(rng, steps=6)
        histories = histories_of(frames)
        graphs = graph_sequence(frames, EdgeThresholds(), 4)
        shuffled = graph_sequence([frame[::-1] for frame in frames], EdgeThresholds(), 4)
        a = encode_edges(graphs, histories, "a0", bank).value
        b = encode_edges(shuffled, dict(reversed(list(histories.items()))), "a0", bank).value
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_focus_must_be_in_graph(self, rng):
        """Edge tracks need the focus agent in the final graph."""
        graphs = graph_sequence([[agent("a", 0, 0)]], 2.0, 4)
        with pytest.raises(InputError):
            collect_edge_tracks(graphs, {"a": np.zeros((1, 4))}, "zz", 1.0, 1.0)


class TestOnlineEncoder:
    """Incremental update-and-predict against full re-encoding."""

    @staticmethod
    def _encoder(rng):
        return OnlineSceneEncoder(
            LSTMCell(2, 6, rng), EdgeEncoderBank(4, rng), EdgeThresholds(), 4, ("pedestrian",), 2.0, 1.5
        )

    @pytest.mark.parametrize("drop", [None, (2, 4)])
    def test_matches_full_reencode(self, rng, drop):
        """Every step of the online state agrees with encoding the prefix from scratch."""
        encoder = self._encoder(rng)
        frames = random_scene(rng, steps=8, drop=drop)
        graph, encodings = encoder.start(frames[0])
        for t in range(1, len(frames)):
            graph, encodings = encoder.incremental_update(graph, encodings, frames[t])
            for focus in ("a0", "a1", "a2"):
                if focus not in encodings.history:
                    continue
                state, neighbors = encoder.full_encode(frames[: t + 1], focus)
                assert relative_difference(encodings.history[focus].h.value, state.h.value) < 1e-6
                online = encoder.neighbor_vector(graph, encodings, focus)
                if np.any(neighbors != 0.0):
                    assert relative_difference(online, neighbors) < 1e-6
                else:
                    np.testing.assert_array_equal(online, 0.0)

    def test_functional_form(self, rng):
        """The module-level function delegates to the encoder."""
        encoder = self._encoder(rng)
        frames = random_scene(rng, steps=2)
        graph, encodings = encoder.start(frames[0])
        graph, encodings = incremental_update(encoder, graph, encodings, frames[1])
        assert encodings.timestep == graph.timestep == 1

    def test_gap_requires_reencode(self, rng):
        """Skipping a timestep is signalled, not patched."""
        encoder = self._encoder(rng)
        frames = random_scene(rng, steps=3)
        graph, encodings = encoder.start(frames[0])
        with pytest.raises(ReencodeRequired):
            encoder.incremental_update(graph, encodings, frames[2])

    def test_stale_observations(self, rng):
        """Replaying the current step is refused."""
        encoder = self._encoder(rng)
        frames = random_scene(rng, steps=2)
        graph, encodings = encoder.start(frames[0])
        with pytest.raises(InputError):
            encoder.incremental_update(graph, encodings, frames[0])
