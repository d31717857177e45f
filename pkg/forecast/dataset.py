"""Line-delimited dataset files and training-window samples.

File layout::

    #FORECAST version=1 kind=traffic_weave dt=0.1 config=<hash> params=<json>
    <scene> <timestep> <agent> <type> <x> <y> <vx> <vy> <heading|-> <label|->
    ...

Records are sorted by (scene, timestep, agent). Floats are written with
`repr`, so a save/load round trip is lossless.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .config import Config, ModelConfig
from .errors import DatasetFormatError, InputError, SplitOverlapError
from .storage import read_text, write_atomic
from .synthgen import STATE_COLUMNS, Episode, Trajectory, split_episode
from .utils import scene_split

HEADER_TAG = "#FORECAST"
MISSING = "-"
FIELDS = 10


@dataclass
class DatasetHeader:
    """First line of a dataset file."""

    kind: str
    dt: float
    config_hash: str = ""
    params: dict[str, Any] = field(default_factory=dict)
    version: int = Config.FORMAT_VERSION

    def to_line(self) -> str:
        """Serialise to the header line."""
        params = json.dumps(self.params, sort_keys=True, separators=(",", ":"))
        return (
            f"{HEADER_TAG} version={self.version} kind={self.kind} dt={self.dt!r} "
            f"config={self.config_hash} params={params}"
        )

    @staticmethod
    def parse(line: str) -> DatasetHeader:
        """Parse a header line; problems are reported on line 1."""
        if not line.startswith(HEADER_TAG + " "):
            raise DatasetFormatError(f"missing '{HEADER_TAG}' header", 1)
        head, sep, params_text = line[len(HEADER_TAG) + 1 :].partition(" params=")
        if not sep:
            raise DatasetFormatError("header lacks params=", 1)
        values = dict(item.split("=", 1) for item in head.split() if "=" in item)
        try:
            version = int(values["version"])
            header = DatasetHeader(
                kind=values["kind"],
                dt=float(values["dt"]),
                config_hash=values.get("config", ""),
                params=json.loads(params_text),
                version=version,
            )
        except (KeyError, ValueError) as e:
            raise DatasetFormatError(f"malformed header: {e}", 1) from e
        if version != Config.FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported format version {version}", 1)
        if header.dt <= 0:
            raise DatasetFormatError(f"dt must be positive, got {header.dt}", 1)
        return header


def _format_float(value: float) -> str:
    return MISSING if math.isnan(value) else repr(float(value))


def _parse_float(token: str, name: str, line_number: int, optional: bool = False) -> float:
    if optional and token == MISSING:
        return math.nan
    try:
        value = float(token)
    except ValueError as e:
        raise DatasetFormatError(f"cannot read {name} '{token}'", line_number) from e
    if not math.isfinite(value):
        raise DatasetFormatError(f"{name} is not finite", line_number)
    return value


@dataclass
class DatasetFile:
    """Header plus the episodes it describes."""

    header: DatasetHeader
    episodes: list[Episode]

    def to_text(self) -> str:
        """Serialise every episode, sorted by (scene, timestep, agent)."""
        lines = [self.header.to_line()]
        for episode in sorted(self.episodes, key=lambda e: e.scene_id):
            label = episode.label or MISSING
            rows = []
            for agent_id, traj in episode.trajectories.items():
                for offset, state in enumerate(traj.states):
                    if np.isnan(state[0]):
                        continue
                    rows.append((traj.start + offset, agent_id, traj.agent_type, state))
            rows.sort(key=lambda r: (r[0], r[1]))
            for timestep, agent_id, agent_type, state in rows:
                values = " ".join(_format_float(v) for v in state[:4])
                lines.append(
                    f"{episode.scene_id} {timestep} {agent_id} {agent_type} {values} {_format_float(state[4])} {label}"
                )
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        """Atomically write the file."""
        write_atomic(path, self.to_text())
        logging.info(f"Wrote {len(self.episodes)} episodes to {path}")

    @staticmethod
    def parse(text: str) -> DatasetFile:
        """Strict parser: every malformed line raises DatasetFormatError with its line number."""
        lines = text.splitlines()
        if not lines:
            raise DatasetFormatError("empty dataset file", 1)
        header = DatasetHeader.parse(lines[0])

        scenes: dict[str, dict[str, Any]] = {}
        last_key: tuple[str, int, str] | None = None
        for line_number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                raise DatasetFormatError("blank line", line_number)
            tokens = line.split()
            if len(tokens) != FIELDS:
                raise DatasetFormatError(f"expected {FIELDS} fields, got {len(tokens)}", line_number)
            scene_id, step_token, agent_id, agent_type = tokens[:4]
            try:
                timestep = int(step_token)
            except ValueError as e:
                raise DatasetFormatError(f"timestep '{step_token}' is not an integer", line_number) from e
            if timestep < 0:
                raise DatasetFormatError("negative timestep", line_number)
            if agent_type not in Config.AGENT_TYPES:
                raise DatasetFormatError(f"unknown agent type '{agent_type}'", line_number)
            key = (scene_id, timestep, agent_id)
            if last_key is not None and key <= last_key:
                raise DatasetFormatError("records out of (scene, timestep, agent) order or duplicated", line_number)
            last_key = key

            state = [_parse_float(tok, name, line_number) for tok, name in zip(tokens[4:8], STATE_COLUMNS)]
            state.append(_parse_float(tokens[8], "heading", line_number, optional=True))
            label = None if tokens[9] == MISSING else tokens[9]

            scene = scenes.setdefault(scene_id, {"label": label, "agents": {}})
            if scene["label"] != label:
                raise DatasetFormatError(f"label changes within scene {scene_id}", line_number)
            agents = scene["agents"]
            if agent_id in agents and agents[agent_id]["type"] != agent_type:
                raise DatasetFormatError(f"agent {agent_id} changes type", line_number)
            agents.setdefault(agent_id, {"type": agent_type, "rows": {}})["rows"][timestep] = state

        episodes = [_assemble(scene_id, scene, header) for scene_id, scene in scenes.items()]
        return DatasetFile(header, episodes)

    @staticmethod
    def load(path: str) -> DatasetFile:
        """Read and parse a dataset file."""
        data = DatasetFile.parse(read_text(path))
        logging.info(f"Loaded {len(data.episodes)} episodes from {path}")
        return data


def _assemble(scene_id: str, scene: dict[str, Any], header: DatasetHeader) -> Episode:
    trajectories = {}
    robot_id = None
    for agent_id in sorted(scene["agents"]):
        info = scene["agents"][agent_id]
        steps = sorted(info["rows"])
        start, end = steps[0], steps[-1] + 1
        states = np.full((end - start, len(STATE_COLUMNS)), np.nan)
        for step in steps:
            states[step - start] = info["rows"][step]
        trajectories[agent_id] = Trajectory(agent_id, info["type"], states, start)
        if info["type"] == "robot":
            robot_id = agent_id
    return Episode(scene_id, header.kind, header.dt, trajectories, scene["label"], robot_id, dict(header.params))


def make_dataset(
    episodes: Iterable[Episode], kind: str, dt: float, config_hash: str, params: dict[str, Any]
) -> DatasetFile:
    """Bundle generated episodes under one header."""
    return DatasetFile(DatasetHeader(kind=kind, dt=dt, config_hash=config_hash, params=params), list(episodes))


def split_episodes(episodes: Iterable[Episode]) -> dict[str, list[Episode]]:
    """Partition episodes into train/val/test by scene-id hash."""
    parts: dict[str, list[Episode]] = {"train": [], "val": [], "test": []}
    for episode in episodes:
        parts[scene_split(episode.scene_id)].append(episode)
    return parts


@dataclass
class Sample:
    """One focus agent in one window."""

    scene_id: str
    t0: int
    focus_id: str
    focus_type: str
    histories: dict[str, np.ndarray]
    agent_types: dict[str, str]
    robot_future: np.ndarray | None
    future: np.ndarray
    label: str | None = None
    kind: str = ""
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def origin(self) -> np.ndarray:
        """Focus state at t0."""
        return self.histories[self.focus_id][-1]


def prepare_samples(episodes: Iterable[Episode], config: ModelConfig, stride: int = 1) -> list[Sample]:
    """Training windows for every focus-type agent observed throughout history and future."""
    samples = []
    for episode in episodes:
        if episode.length < config.history + config.horizon:
            logging.debug(f"Skipping {episode.scene_id}: {episode.length} steps is too short")
            continue
        for x, y in split_episode(episode, config.history, config.horizon, stride):
            for agent_id in sorted(y.futures):
                if x.agent_types[agent_id] != config.focus_type:
                    continue
                if np.any(np.isnan(x.histories[agent_id][:, 0])):
                    continue
                samples.append(
                    Sample(
                        scene_id=x.scene_id,
                        t0=x.t0,
                        focus_id=agent_id,
                        focus_type=config.focus_type,
                        histories=x.histories,
                        agent_types=x.agent_types,
                        robot_future=x.robot_future,
                        future=y.futures[agent_id],
                        label=x.label,
                        kind=episode.kind,
                        params=episode.params,
                    )
                )
    return samples


def check_disjoint(train_scenes: Iterable[str], eval_scenes: Iterable[str]) -> None:
    """Refuse evaluation scenes that were used for training."""
    overlap = sorted(set(train_scenes) & set(eval_scenes))
    if overlap:
        raise SplitOverlapError(f"{len(overlap)} evaluation scenes were used in training, e.g. {overlap[0]}")


def require_samples(samples: list[Sample], what: str) -> list[Sample]:
    """Raise InputError when a split produced no windows."""
    if not samples:
        raise InputError(f"No {what} samples; check horizon, history and focus type against the dataset")
    return samples
