"""Configuration module for the forecaster."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigurationError


class Config:
    """Process-wide constants, overridable through the environment."""

    FORMAT_VERSION = 1
    DEBUG_MODE = os.environ.get("FORECAST_DEBUG") == "1"
    DEFAULT_SEED = int(os.environ.get("FORECAST_SEED") or 0)
    WORKERS = int(os.environ.get("FORECAST_WORKERS") or 1)

    # Evaluation
    BON_SAMPLES = 20
    KDE_SAMPLES = 200
    NLL_FLOOR = -20.0
    MASS_COVERAGE = 0.99

    # Train/val/test split of scene ids by hash (percent)
    SPLIT_BOUNDS = (70, 85)

    DYNAMICS_MODELS = ("none", "integrator", "unicycle")
    AGENT_TYPES = ("pedestrian", "vehicle", "robot")
    SCENARIO_KINDS = ("traffic_weave", "social_forces", "idm_string")


@dataclass
class ModelConfig:  # pylint: disable=too-many-instance-attributes
    """Architecture and output configuration of the CVAE."""

    latent_modes: int = 25
    components: int = 4
    horizon: int = 12
    history: int = 8
    dt: float = 0.4
    focus_type: str = "pedestrian"
    dynamics: str = "none"
    use_robot: bool = True
    use_map: bool = False

    history_hidden: int = 32
    edge_hidden: int = 16
    robot_hidden: int = 16
    future_hidden: int = 16
    decoder_hidden: int = 64
    head_hidden: int = 32
    map_features: int = 32
    map_cells: int = 64
    map_resolution: float = 0.25

    threshold_pedestrian: float = 3.0
    threshold_vehicle: float = 30.0
    ramp_window: int = 4

    position_scale: float = 5.0
    velocity_scale: float = 2.0

    v_max: float = 15.0
    omega_max: float = 1.2
    accel_max: float = 4.0
    covariance_jitter: float = 1e-6

    @property
    def output_space(self) -> str:
        """`position` for displacement outputs, `action` when integrated through dynamics."""
        return "position" if self.dynamics == "none" else "action"

    def validate(self) -> ModelConfig:
        """Raise ConfigurationError on inconsistent settings."""
        if self.latent_modes < 1:
            raise ConfigurationError(f"latent_modes must be >= 1, got {self.latent_modes}")
        if self.components < 1:
            raise ConfigurationError(f"components must be >= 1, got {self.components}")
        if self.horizon < 1 or self.history < 1:
            raise ConfigurationError("horizon and history must be >= 1")
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.dynamics not in Config.DYNAMICS_MODELS:
            raise ConfigurationError(f"Unknown dynamics model '{self.dynamics}'")
        if self.focus_type not in Config.AGENT_TYPES:
            raise ConfigurationError(f"Unknown focus type '{self.focus_type}'")
        if self.dynamics != "none" and self.components != 1:
            raise ConfigurationError("Dynamics-integrated outputs need components = 1")
        if self.ramp_window < 1:
            raise ConfigurationError("ramp_window must be >= 1")
        if self.map_cells < 22:
            raise ConfigurationError("map_cells must be >= 22 for three stride-2 convolution stages")
        return self


@dataclass
class TrainConfig:
    """Optimisation schedule."""

    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 2000
    kl_anneal_fraction: float = 0.1
    patience: int = 50
    max_grad_norm: float = 10.0
    stride: int = 1

    def validate(self) -> TrainConfig:
        """Raise ConfigurationError on inconsistent settings."""
        if self.batch_size < 1 or self.epochs < 0 or self.stride < 1:
            raise ConfigurationError("batch_size and stride must be >= 1, epochs >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.kl_anneal_fraction <= 1.0:
            raise ConfigurationError("kl_anneal_fraction must lie in [0, 1]")
        return self


@dataclass
class ScenarioConfig:
    """Which synthetic generator to run and with which parameters."""

    kind: str = "traffic_weave"
    count: int = 100
    params: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> ScenarioConfig:
        """Raise ConfigurationError on inconsistent settings."""
        if self.kind not in Config.SCENARIO_KINDS:
            raise ConfigurationError(f"Unknown scenario kind '{self.kind}'")
        if self.count < 0:
            raise ConfigurationError("count must be >= 0")
        return self


@dataclass
class RunConfig:
    """Everything that determines a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    seed: int = Config.DEFAULT_SEED

    def to_dict(self) -> dict[str, Any]:
        """Plain dictionary form, used for hashing and checkpoint headers."""
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable SHA-256 of the canonical JSON form."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @staticmethod
    def from_dict(data: dict[str, Any]) -> RunConfig:
        """Inverse of to_dict."""
        return RunConfig(
            model=ModelConfig(**data.get("model", {})),
            train=TrainConfig(**data.get("train", {})),
            scenario=ScenarioConfig(**data.get("scenario", {})),
            seed=int(data.get("seed", Config.DEFAULT_SEED)),
        )

    def validate(self) -> RunConfig:
        """Validate every section."""
        self.model.validate()
        self.train.validate()
        self.scenario.validate()
        return self


# Defaults per scenario kind, applied before file overrides.
SCENARIO_PRESETS: dict[str, dict[str, Any]] = {
    "traffic_weave": {
        "dt": 0.1,
        "history": 10,
        "horizon": 12,
        "focus_type": "vehicle",
        "components": 4,
        "position_scale": 10.0,
        "velocity_scale": 10.0,
    },
    "social_forces": {"dt": 0.4, "history": 8, "horizon": 12, "focus_type": "pedestrian"},
    "idm_string": {
        "dt": 0.5,
        "history": 4,
        "horizon": 6,
        "focus_type": "vehicle",
        "position_scale": 20.0,
        "velocity_scale": 10.0,
    },
}


def model_preset(kind: str) -> ModelConfig:
    """Model configuration matched to a scenario kind's cadence and agent type."""
    if kind not in SCENARIO_PRESETS:
        raise ConfigurationError(f"Unknown scenario kind '{kind}'")
    return ModelConfig(**SCENARIO_PRESETS[kind])


def _coerce(raw: str, type_name: str, key: str, line_number: int) -> Any:
    """Convert a raw config value into the declared field type."""
    try:
        if type_name == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigurationError(f"line {line_number}: cannot read '{raw}' as {type_name} for '{key}'") from e
    return raw


def _guess(raw: str) -> Any:
    """Best-effort typing of free-form scenario parameters."""
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            continue
    return raw


def parse_run_config(text: str, kind: str | None = None) -> RunConfig:
    """Parse the `key = value` configuration format.

    Keys are `seed`, `model.<field>`, `train.<field>`, `scenario.kind`,
    `scenario.count` and free-form `scenario.<param>`. Lines starting with `#`
    and blank lines are ignored. `scenario.kind` selects the model preset the
    `model.*` keys are applied on top of; a given `kind` replaces the file's.
    """
    entries: list[tuple[int, str, str]] = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {line_number}: expected 'key = value', got '{stripped}'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        entries.append((line_number, key, value))

    kind = kind or next((value for _, key, value in entries if key == "scenario.kind"), "traffic_weave")
    run = RunConfig(model=model_preset(kind), scenario=ScenarioConfig(kind=kind))
    sections = {"model": run.model, "train": run.train}
    for line_number, key, value in entries:
        if key == "seed":
            run.seed = int(_coerce(value, "int", key, line_number))
            continue
        section, _, name = key.partition(".")
        if section in sections:
            target = sections[section]
            types = {f.name: f.type for f in dataclasses.fields(target)}
            if name not in types:
                raise ConfigurationError(f"line {line_number}: unknown key '{key}'")
            setattr(target, name, _coerce(value, str(types[name]), key, line_number))
        elif section == "scenario":
            if name == "kind":
                continue
            if name == "count":
                run.scenario.count = int(_coerce(value, "int", key, line_number))
            else:
                run.scenario.params[name] = _guess(value)
        else:
            raise ConfigurationError(f"line {line_number}: unknown key '{key}'")
    return run.validate()


def load_run_config(path: str | None, kind: str | None = None) -> RunConfig:
    """Load a run configuration file, or the preset for `kind` when no file is given.

    With both, `kind` overrides the file's `scenario.kind` and selects the preset
    its `model.*` keys apply to.
    """
    if path is None:
        kind = kind or "traffic_weave"
        return RunConfig(model=model_preset(kind), scenario=ScenarioConfig(kind=kind)).validate()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    return parse_run_config(text, kind)
