"""Discrete-latent conditional VAE for multimodal trajectory forecasting.

The conditioning vector x concatenates the focus agent's history encoding, the
aggregated neighbor vector, an encoding of the robot's future and an optional
map-crop encoding. A K-way categorical prior p(z|x) and proposal q(z|x, y) sit
on top of x, and an autoregressive LSTM decoder emits one Gaussian mixture per
future step for every latent mode. All expectations over z are exact sums.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .dataset import Sample
from .diffkernel import Affine, ConvEncoder, LSTMCell, Module, Tensor, ops
from .diffkernel.distributions import GmmStep, MixtureParams, covariance_from_params, mixture_log_density, split_mixture
from .dynamics import (
    ActionDistribution,
    DynamicsLimits,
    GaussianTrajectory,
    SingleIntegratorState,
    UnicycleState,
    action_covariance,
    clamp_actions,
    integrate_prediction,
    position_log_likelihood,
    propagate_tensors,
    unicycle_step_mean,
)
from .errors import CheckpointError, ConfigurationError, DimensionError, InputError, NumericalError
from .scene_map import OccupancyMap, heading_of, map_for_layout
from .stg import (
    HISTORY_FEATURES,
    AgentState,
    EdgeEncoderBank,
    EdgeThresholds,
    EdgeTrack,
    OnlineSceneEncoder,
    collect_edge_tracks,
    graph_sequence,
    history_features,
)
from .storage import Checkpoint
from .synthgen import wrap_angle
from .utils import make_rng

ROBOT_FEATURES = 4
OUTPUT_FEATURES = 2
PREDICTION_MODES = ("sampled", "most_likely", "analytic")


# Output space


def output_scale(config: ModelConfig) -> np.ndarray:
    """Per-feature scale between raw outputs and the decoder's normalised units."""
    if config.dynamics == "unicycle":
        return np.array([config.omega_max, config.accel_max])
    if config.dynamics == "integrator":
        return np.full(OUTPUT_FEATURES, config.velocity_scale)
    return np.full(OUTPUT_FEATURES, config.velocity_scale * config.dt)


def output_features(sample: Sample, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-step outputs (T, 2) of the focus agent, plus the output of the step ending at t0.

    Displacements (m) without dynamics, velocities (m/s) for the integrator and
    (yaw rate, acceleration) for the unicycle.
    """
    hist = sample.histories[sample.focus_id]
    seq = np.concatenate([hist[-2:], sample.future], axis=0)
    if config.dynamics == "unicycle":
        heading = np.array([heading_of(s) for s in seq])
        speed = np.hypot(seq[:, 2], seq[:, 3])
        steps = np.stack([wrap_angle(np.diff(heading)), np.diff(speed)], axis=-1) / config.dt
    else:
        steps = np.diff(seq[:, :2], axis=0)
        if config.dynamics == "integrator":
            steps = steps / config.dt
    if len(hist) >= 2:
        return steps[1:], steps[0]
    if config.dynamics == "unicycle":
        return steps, np.zeros(OUTPUT_FEATURES)
    velocity = hist[-1, 2:4]
    return steps, velocity * (config.dt if config.dynamics == "none" else 1.0)


# Batching


def history_frames(histories: dict[str, np.ndarray], agent_types: dict[str, str]) -> list[list[AgentState]]:
    """Per-step AgentState lists of a window, skipping unobserved agents."""
    steps = len(next(iter(histories.values())))
    frames = []
    for t in range(steps):
        frame = []
        for agent_id in sorted(histories):
            s = histories[agent_id][t]
            if np.isnan(s[0]):
                continue
            heading = float(wrap_angle(s[4])) if np.isfinite(s[4]) else None
            frame.append(AgentState(agent_id, agent_types[agent_id], (s[0], s[1]), (s[2], s[3]), t, heading))
        frames.append(frame)
    return frames


@dataclass
class SampleFeatures:  # pylint: disable=too-many-instance-attributes
    """Model inputs of one sample, computed once and reused across epochs."""

    scene_id: str
    label: str | None
    history: np.ndarray
    tracks: list[EdgeTrack]
    robot: np.ndarray | None
    map_crop: np.ndarray | None
    origin: np.ndarray
    initial: np.ndarray
    targets: np.ndarray
    outputs: np.ndarray
    first: np.ndarray


def featurize(sample: Sample, config: ModelConfig, occupancy: OccupancyMap | None = None) -> SampleFeatures:
    """Turn a window sample into encoder inputs and decoder targets."""
    hist = sample.histories.get(sample.focus_id)
    if hist is None or len(hist) < 1:
        raise InputError(f"Sample {sample.scene_id}@{sample.t0} has no history for focus agent {sample.focus_id}")
    if sample.future.shape[0] != config.horizon:
        raise ConfigurationError(
            f"Sample horizon {sample.future.shape[0]} does not match model horizon {config.horizon}"
        )
    ps, vs = config.position_scale, config.velocity_scale
    origin = hist[-1].copy()

    frames = history_frames(sample.histories, sample.agent_types)
    thresholds = EdgeThresholds(config.threshold_pedestrian, config.threshold_vehicle)
    graphs = graph_sequence(frames, thresholds, config.ramp_window)
    tracks = collect_edge_tracks(graphs, {i: h[:, :4] for i, h in sample.histories.items()}, sample.focus_id, ps, vs)

    robot = None
    if config.use_robot:
        if sample.robot_future is None:
            raise InputError(f"Model expects a robot future but sample {sample.scene_id}@{sample.t0} has none")
        if sample.robot_future.shape[0] != config.horizon:
            raise InputError(f"Robot future has {sample.robot_future.shape[0]} steps, expected {config.horizon}")
        rf = np.nan_to_num(sample.robot_future[:, :4])
        robot = np.concatenate([(rf[:, :2] - origin[:2]) / ps, rf[:, 2:4] / vs], axis=-1)

    map_crop = None
    if config.use_map:
        if occupancy is None:
            xs = np.concatenate([h[:, 0] for h in sample.histories.values()] + [sample.future[:, 0]])
            occupancy = map_for_layout(sample.kind, sample.params, float(np.nanmin(xs)), float(np.nanmax(xs)))
        map_crop = occupancy.crop(origin[:2], heading_of(origin), config.map_cells, config.map_resolution)

    outputs, first = output_features(sample, config)
    initial = np.array([origin[0], origin[1], heading_of(origin), float(np.hypot(origin[2], origin[3]))])
    return SampleFeatures(
        scene_id=sample.scene_id,
        label=sample.label,
        history=history_features(hist, vs),
        tracks=tracks,
        robot=robot,
        map_crop=map_crop,
        origin=origin,
        initial=initial,
        targets=sample.future[:, :2].copy(),
        outputs=outputs,
        first=first,
    )


@dataclass
class Batch:  # pylint: disable=too-many-instance-attributes
    """Stacked model inputs; sequences are time-major (T, B, ...)."""

    scene_ids: list[str]
    labels: list[str | None]
    history_inputs: np.ndarray
    edge_tracks: list[list[EdgeTrack]]
    robot_inputs: np.ndarray | None
    map_crops: np.ndarray | None
    origin: np.ndarray
    initial: np.ndarray
    targets: np.ndarray
    outputs: np.ndarray
    first: np.ndarray
    prev_inputs: np.ndarray
    future_inputs: np.ndarray

    @property
    def size(self) -> int:
        """Number of examples B."""
        return len(self.scene_ids)

    @property
    def horizon(self) -> int:
        """Prediction horizon T."""
        return self.targets.shape[1]


def collate(features: Sequence[SampleFeatures], config: ModelConfig) -> Batch:
    """Stack per-sample features into a batch."""
    if not features:
        raise InputError("Cannot build an empty batch")
    scale = output_scale(config)
    outputs = np.stack([f.outputs for f in features])
    first = np.stack([f.first for f in features])
    scaled = outputs / scale
    prev = np.concatenate([(first / scale)[:, None], scaled[:, :-1]], axis=1)
    robots = [f.robot for f in features]
    crops = [f.map_crop for f in features]
    return Batch(
        scene_ids=[f.scene_id for f in features],
        labels=[f.label for f in features],
        history_inputs=np.stack([f.history for f in features], axis=1),
        edge_tracks=[f.tracks for f in features],
        robot_inputs=None if any(r is None for r in robots) else np.stack(robots, axis=1),
        map_crops=None if any(c is None for c in crops) else np.stack(crops),
        origin=np.stack([f.origin for f in features]),
        initial=np.stack([f.initial for f in features]),
        targets=np.stack([f.targets for f in features]),
        outputs=outputs,
        first=first,
        prev_inputs=np.transpose(prev, (1, 0, 2)),
        future_inputs=np.transpose(scaled, (1, 0, 2)),
    )


def make_batch(samples: Sequence[Sample], config: ModelConfig) -> Batch:
    """featurize + collate."""
    return collate([featurize(s, config) for s in samples], config)


# Distributions


@dataclass
class ConditioningInput:
    """Encoded conditioning blocks; absent blocks are None."""

    history: Tensor
    neighbors: Tensor
    robot: Tensor | None = None
    map: Tensor | None = None

    def vector(self) -> Tensor:
        """(B, X) concatenation of the present blocks."""
        blocks = [b for b in (self.history, self.neighbors, self.robot, self.map) if b is not None]
        return ops.concat(blocks, axis=-1)

    @property
    def size(self) -> int:
        """Length X of the concatenated vector."""
        return sum(b.shape[-1] for b in (self.history, self.neighbors, self.robot, self.map) if b is not None)


@dataclass
class LatentCategorical:
    """Batch of K-way categoricals held as log-probabilities (B, K)."""

    log_probs: Tensor

    @property
    def probs(self) -> np.ndarray:
        """Probabilities as a numpy array."""
        return np.exp(self.log_probs.value)

    @property
    def modes(self) -> int:
        """Number of latent modes K."""
        return self.log_probs.shape[-1]


@dataclass
class ElboTerms:
    """Loss tensor plus per-example diagnostics."""

    loss: Tensor
    reconstruction: np.ndarray
    kl: np.ndarray
    marginal_log_likelihood: np.ndarray

    @property
    def elbo(self) -> np.ndarray:
        """Per-example evidence lower bound (unannealed)."""
        return -(self.reconstruction + self.kl)


def elbo_from_terms(log_q: Tensor, log_p: Tensor, log_lik: Tensor, kl_weight: float = 1.0) -> ElboTerms:
    """Exact ELBO pieces from (B, K) proposal, prior and decoder log-likelihoods."""
    q = ops.exp(log_q)
    reconstruction = -ops.sum(q * log_lik, axis=-1)
    kl = ops.sum(q * (log_q - log_p), axis=-1)
    loss = ops.mean(reconstruction + kl_weight * kl)
    mll = ops.logsumexp(log_p + log_lik, axis=-1)
    if not np.isfinite(loss.value):
        raise NumericalError(
            f"Non-finite loss: reconstruction {reconstruction.value.tolist()}, KL {kl.value.tolist()}"
        )
    return ElboTerms(loss, reconstruction.value.copy(), kl.value.copy(), mll.value.copy())


@dataclass
class PredictionOutput:
    """Mode probabilities plus the outputs of the requested prediction mode."""

    mode: str
    mode_probs: np.ndarray
    horizon: int
    samples: np.ndarray | None = None
    most_likely: np.ndarray | None = None
    most_likely_mode: np.ndarray | None = None
    gaussians: list[list[GaussianTrajectory]] | None = None


@dataclass
class Rollout:
    """Free-running decoder rollout of R rows."""

    positions: np.ndarray
    actions: np.ndarray
    action_covariances: np.ndarray
    steps: list[list[GmmStep]] = field(default_factory=list)


def _choose_components(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(weights.shape[0])
    picked = (np.cumsum(weights, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(picked, weights.shape[1] - 1)


class TrajectoryCVAE(Module):  # pylint: disable=too-many-instance-attributes
    """CVAE with a discrete latent, exact marginalisation and an LSTM mixture decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = make_rng(seed, "model")
        self.history_encoder = LSTMCell(HISTORY_FEATURES, config.history_hidden, rng)
        self.edge_encoders = EdgeEncoderBank(config.edge_hidden, rng)
        self.robot_encoder = LSTMCell(ROBOT_FEATURES, config.robot_hidden, rng) if config.use_robot else None
        self.map_encoder = ConvEncoder(config.map_cells, config.map_features, rng) if config.use_map else None
        self.condition_size = (
            config.history_hidden
            + self.edge_encoders.output_size
            + (config.robot_hidden if config.use_robot else 0)
            + (config.map_features if config.use_map else 0)
        )
        k = config.latent_modes
        self.prior_hidden = Affine(self.condition_size, config.head_hidden, rng)
        self.prior_out = Affine(config.head_hidden, k, rng)
        self.future_encoder = LSTMCell(OUTPUT_FEATURES, config.future_hidden, rng)
        self.proposal_hidden = Affine(self.condition_size + config.future_hidden, config.head_hidden, rng)
        self.proposal_out = Affine(config.head_hidden, k, rng)
        self.decoder = LSTMCell(self.condition_size + k + OUTPUT_FEATURES, config.decoder_hidden, rng)
        self.decoder_out = Affine(config.decoder_hidden, 6 * config.components, rng)
        self.limits = DynamicsLimits(config.v_max, config.omega_max, config.accel_max)
        self.scale = output_scale(config)
        logging.debug(f"Built CVAE: K={k}, M={config.components}, x={self.condition_size}, dynamics={config.dynamics}")

    @property
    def modes(self) -> int:
        """Number of latent modes K."""
        return self.config.latent_modes

    # Encoders

    def encode_condition(self, batch: Batch) -> ConditioningInput:
        """Encode history, neighbors, robot future and map crop of a batch."""
        history = self.history_encoder.unroll(batch.history_inputs).h
        neighbors = self.edge_encoders.encode(batch.edge_tracks)
        return self.condition_from_parts(history, neighbors, batch.robot_inputs, batch.map_crops)

    def condition_from_parts(
        self, history: Any, neighbors: Any, robot_inputs: np.ndarray | None, map_crops: np.ndarray | None
    ) -> ConditioningInput:
        """Complete a conditioning input from already-encoded history and neighbor blocks."""
        robot = None
        if self.robot_encoder is not None:
            if robot_inputs is None:
                raise InputError("Model expects a robot future but none was given")
            robot = self.robot_encoder.unroll(robot_inputs).h
        encoded_map = None
        if self.map_encoder is not None:
            if map_crops is None:
                raise InputError("Model expects map crops but none were given")
            encoded_map = self.map_encoder(map_crops)
        return ConditioningInput(ops.as_tensor(history), ops.as_tensor(neighbors), robot, encoded_map)

    def prior(self, x: ConditioningInput) -> LatentCategorical:
        """p(z | x)."""
        logits = self.prior_out(ops.relu(self.prior_hidden(x.vector())))
        return LatentCategorical(ops.log_softmax(logits, axis=-1))

    def proposal(self, x: ConditioningInput, batch: Batch) -> LatentCategorical:
        """q(z | x, y); y comes from the batch's ground-truth outputs."""
        future = self.future_encoder.unroll(batch.future_inputs).h
        hidden = ops.relu(self.proposal_hidden(ops.concat([x.vector(), future], axis=-1)))
        return LatentCategorical(ops.log_softmax(self.proposal_out(hidden), axis=-1))

    # Decoder

    def _mixture(self, raw: Tensor) -> MixtureParams:
        """Split a head output and rescale it to raw output units."""
        params = split_mixture(raw, self.config.components)
        return MixtureParams(
            log_weights=params.log_weights,
            means=params.means * self.scale,
            log_sigmas=params.log_sigmas + np.log(self.scale),
            corrs=params.corrs,
        )

    def _teacher_forced(self, xv: Tensor, modes: np.ndarray, prev: np.ndarray) -> list[MixtureParams]:
        """Mixture parameters per step for R rows fed ground-truth previous outputs (T, R, 2)."""
        onehot = np.eye(self.modes)[modes]
        state = self.decoder.zero_state(len(modes))
        steps = []
        for t in range(prev.shape[0]):
            state = self.decoder.step(ops.concat([xv, onehot, prev[t]], axis=-1), state)
            steps.append(self._mixture(self.decoder_out(state.h)))
        return steps

    def decode(
        self, x: ConditioningInput, z: int, batch: Batch, teacher_forcing: bool = False
    ) -> list[list[GmmStep]]:
        """Per-example GmmStep sequences for mode z.

        Both paths start from the batch's last observed output. With
        `teacher_forcing` the decoder then consumes the ground-truth outputs;
        otherwise it feeds back its own mixture mean (clamped to the unicycle
        limits when those apply), as the deterministic rollout does.
        """
        if not 0 <= z < self.modes:
            raise InputError(f"Latent mode {z} outside 0..{self.modes - 1}")
        xv = x.vector()
        rows = xv.shape[0]
        if rows != batch.size:
            raise DimensionError(f"Conditioning has {rows} rows but the batch has {batch.size} examples")
        cfg = self.config
        onehot = np.eye(self.modes)[np.full(rows, z)]
        state = self.decoder.zero_state(rows)
        prev = batch.first / self.scale
        unicycle = batch.initial.copy()
        sequences: list[list[GmmStep]] = [[] for _ in range(rows)]
        for t in range(batch.horizon):
            if teacher_forcing:
                prev = batch.prev_inputs[t]
            state = self.decoder.step(ops.concat([xv, onehot, prev], axis=-1), state)
            params = self._mixture(self.decoder_out(state.h))
            for row, step in enumerate(params.to_steps()):
                sequences[row].append(step)
            output = np.einsum("rm,rmd->rd", np.exp(params.log_weights.value), params.means.value)
            if cfg.dynamics == "unicycle":
                output = clamp_actions(unicycle[:, 3], output, cfg.dt, self.limits)
                unicycle = unicycle_step_mean(unicycle, output, cfg.dt)
            prev = output / self.scale
        return sequences

    def _sequence_log_likelihood(self, steps: list[MixtureParams], batch: Batch, repeats: int) -> Tensor:
        """Row-wise log p(y | x, z) for rows laid out as `repeats` copies of the batch."""
        cfg = self.config
        if cfg.dynamics == "none":
            outputs = np.tile(batch.outputs, (repeats, 1, 1))
            total = mixture_log_density(outputs[:, 0], steps[0])
            for t in range(1, len(steps)):
                total = total + mixture_log_density(outputs[:, t], steps[t])
            return total
        mus = [p.means[:, 0] for p in steps]
        covs = [action_covariance(p.log_sigmas[:, 0], p.corrs[:, 0]) for p in steps]
        if cfg.dynamics == "unicycle":
            initial = np.tile(batch.initial, (repeats, 1))
            means, pos_covs = propagate_tensors("unicycle", initial, mus, covs, cfg.dt, self.limits)
        else:
            initial = np.tile(batch.origin[:, :2], (repeats, 1))
            means, pos_covs = propagate_tensors("integrator", initial, mus, covs, cfg.dt)
        targets = np.tile(batch.targets, (repeats, 1, 1))
        return position_log_likelihood(means, pos_covs, targets, cfg.covariance_jitter)

    def log_likelihoods(self, x: ConditioningInput, batch: Batch) -> Tensor:
        """(B, K) teacher-forced log p(y | x, z) for every mode."""
        k, b = self.modes, batch.size
        xv = x.vector()
        tiled = ops.concat([xv] * k, axis=0)
        steps = self._teacher_forced(tiled, np.repeat(np.arange(k), b), np.tile(batch.prev_inputs, (1, k, 1)))
        rows = self._sequence_log_likelihood(steps, batch, k)
        return ops.swapaxes(ops.reshape(rows, (k, b)))

    # Objectives

    def elbo_loss(self, batch: Batch, kl_weight: float = 1.0) -> ElboTerms:
        """Mean over the batch of -E_q[log p(y|x,z)] + kl_weight * KL[q || p], summed exactly over z."""
        x = self.encode_condition(batch)
        log_p = self.prior(x).log_probs
        log_q = self.proposal(x, batch).log_probs
        return elbo_from_terms(log_q, log_p, self.log_likelihoods(x, batch), kl_weight)

    def marginal_log_likelihood(self, batch: Batch) -> np.ndarray:
        """Per-example log sum_z p(z|x) p(y|x,z)."""
        x = self.encode_condition(batch)
        log_p = self.prior(x).log_probs
        return ops.logsumexp(log_p + self.log_likelihoods(x, batch), axis=-1).value.copy()

    def posterior(self, batch: Batch) -> np.ndarray:
        """(B, K) exact p(z | x, y)."""
        x = self.encode_condition(batch)
        return ops.softmax(self.prior(x).log_probs + self.log_likelihoods(x, batch), axis=-1).value.copy()

    # Prediction

    def _rollout(
        self, xv: np.ndarray, batch: Batch, rows: np.ndarray, modes: np.ndarray, rng: np.random.Generator | None
    ) -> Rollout:
        """Free-running rollout; samples each step's mixture when `rng` is given, else feeds back its mean."""
        cfg = self.config
        count, horizon = len(rows), batch.horizon
        x_rows = xv[rows]
        onehot = np.eye(self.modes)[modes]
        prev = batch.first[rows] / self.scale
        position = batch.origin[rows, :2].copy()
        unicycle = batch.initial[rows].copy()
        state = self.decoder.zero_state(count)
        positions = np.zeros((count, horizon, 2))
        actions = np.zeros((count, horizon, 2))
        action_covs = np.zeros((count, horizon, 2, 2))
        index = np.arange(count)
        for t in range(horizon):
            state = self.decoder.step(np.concatenate([x_rows, onehot, prev], axis=-1), state)
            params = self._mixture(self.decoder_out(state.h))
            weights = np.exp(params.log_weights.value)
            means = params.means.value
            covs = covariance_from_params(params.log_sigmas.value, params.corrs.value)
            if rng is None:
                output = np.einsum("rm,rmd->rd", weights, means)
            else:
                comp = _choose_components(weights, rng)
                chol = np.linalg.cholesky(covs[index, comp])
                output = means[index, comp] + np.einsum("rij,rj->ri", chol, rng.standard_normal((count, 2)))
            if cfg.dynamics == "unicycle":
                output = clamp_actions(unicycle[:, 3], output, cfg.dt, self.limits)
                unicycle = unicycle_step_mean(unicycle, output, cfg.dt)
                position = unicycle[:, :2].copy()
            elif cfg.dynamics == "integrator":
                position = position + output * cfg.dt
            else:
                position = position + output
            positions[:, t] = position
            actions[:, t] = output
            action_covs[:, t] = covs[:, 0]
            prev = output / self.scale
        return Rollout(positions, actions, action_covs)

    def _analytic(self, batch: Batch, example: int, actions: np.ndarray, covs: np.ndarray) -> GaussianTrajectory:
        cfg = self.config
        steps = [ActionDistribution(mu, cov) for mu, cov in zip(actions, covs)]
        if cfg.dynamics == "unicycle":
            start = UnicycleState(batch.initial[example], np.zeros((4, 4)))
            traj = integrate_prediction(start, steps, cfg.dt, "unicycle")
        else:
            dt = cfg.dt if cfg.dynamics == "integrator" else 1.0
            initial = SingleIntegratorState(batch.origin[example, :2], np.zeros((2, 2)))
            traj = integrate_prediction(initial, steps, dt, "integrator")
        return GaussianTrajectory(traj.means, traj.covariances + cfg.covariance_jitter * np.eye(2))

    def predict(
        self,
        batch: Batch,
        n: int = 1,
        mode: str = "sampled",
        rng: np.random.Generator | None = None,
        condition: ConditioningInput | None = None,
    ) -> PredictionOutput:
        """Sampled rollouts per mode, the most likely mode's mean rollout, or analytic Gaussians per mode."""
        if mode not in PREDICTION_MODES:
            raise ConfigurationError(f"Unknown prediction mode '{mode}'")
        if mode == "analytic" and self.config.components != 1:
            raise ConfigurationError(f"Analytic outputs need one mixture component, model has {self.config.components}")
        if n < 0:
            raise InputError("Number of samples must be >= 0")
        x = condition if condition is not None else self.encode_condition(batch)
        probs = self.prior(x).probs
        xv = x.vector().value
        k, b = self.modes, batch.size
        out = PredictionOutput(mode=mode, mode_probs=probs, horizon=batch.horizon)
        if mode == "sampled":
            if n > 0:
                rows = np.repeat(np.arange(b), k * n)
                modes = np.tile(np.repeat(np.arange(k), n), b)
                roll = self._rollout(xv, batch, rows, modes, rng if rng is not None else np.random.default_rng(0))
                out.samples = roll.positions.reshape(b, k, n, batch.horizon, 2)
        elif mode == "most_likely":
            modes = np.argmax(probs, axis=1)
            out.most_likely = self._rollout(xv, batch, np.arange(b), modes, None).positions
            out.most_likely_mode = modes
        else:
            rows = np.repeat(np.arange(b), k)
            roll = self._rollout(xv, batch, rows, np.tile(np.arange(k), b), None)
            out.gaussians = [
                [
                    self._analytic(batch, i, roll.actions[i * k + z], roll.action_covariances[i * k + z])
                    for z in range(k)
                ]
                for i in range(b)
            ]
        return out

    def sample_trajectories(self, batch: Batch, n: int, rng: np.random.Generator) -> np.ndarray:
        """(B, n, T, 2) trajectories with z drawn from the prior."""
        x = self.encode_condition(batch)
        probs = self.prior(x).probs
        modes = np.concatenate([rng.choice(self.modes, size=n, p=p / p.sum()) for p in probs])
        rows = np.repeat(np.arange(batch.size), n)
        roll = self._rollout(x.vector().value, batch, rows, modes, rng)
        return roll.positions.reshape(batch.size, n, batch.horizon, 2)

    # Online inference and persistence

    def online_encoder(self) -> OnlineSceneEncoder:
        """Stateful encoder sharing this model's history and edge encoders."""
        cfg = self.config
        return OnlineSceneEncoder(
            self.history_encoder,
            self.edge_encoders,
            EdgeThresholds(cfg.threshold_pedestrian, cfg.threshold_vehicle),
            cfg.ramp_window,
            (cfg.focus_type,),
            cfg.position_scale,
            cfg.velocity_scale,
        )

    def to_checkpoint(self, meta: dict[str, Any] | None = None) -> Checkpoint:
        """Parameters under `model.` plus the model configuration in the header."""
        arrays = {f"model.{name}": values for name, values in self.arrays().items()}
        return Checkpoint(arrays, {"model": dataclasses.asdict(self.config), **(meta or {})})

    @staticmethod
    def from_checkpoint(checkpoint: Checkpoint) -> TrajectoryCVAE:
        """Rebuild a model from its checkpoint."""
        if "model" not in checkpoint.meta:
            raise CheckpointError("Checkpoint header has no model configuration")
        try:
            config = ModelConfig(**checkpoint.meta["model"])
        except TypeError as e:
            raise CheckpointError(f"Checkpoint model configuration is not understood: {e}") from e
        model = TrajectoryCVAE(config)
        model.load_arrays(checkpoint.subset("model."))
        return model


# Latent analysis


@dataclass
class ModeUsage:
    """Average prior mass per latent mode."""

    masses: np.ndarray
    order: list[int]
    cover: list[int]
    coverage: float

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form."""
        return {
            "masses": self.masses.tolist(),
            "order": self.order,
            "cover": self.cover,
            "coverage": self.coverage,
        }


def mode_usage(model: TrajectoryCVAE, batches: Iterable[Batch], coverage: float = 0.99) -> ModeUsage:
    """Average p(z|x) over a dataset and the smallest set of modes reaching `coverage` mass."""
    total = np.zeros(model.modes)
    count = 0
    for batch in batches:
        total += model.prior(model.encode_condition(batch)).probs.sum(axis=0)
        count += batch.size
    if count == 0:
        raise InputError("Mode usage needs at least one sample")
    masses = total / count
    order = np.argsort(-masses, kind="stable")
    cumulative = np.cumsum(masses[order])
    size = min(int(np.searchsorted(cumulative, coverage - 1e-12)) + 1, model.modes)
    return ModeUsage(masses, order.tolist(), sorted(order[:size].tolist()), coverage)


def prune_modes(model: TrajectoryCVAE, keep: Iterable[int]) -> TrajectoryCVAE:
    """Copy of `model` restricted to the kept latent modes; prior and proposal renormalise over them."""
    kept = sorted(set(int(k) for k in keep))
    if not kept:
        raise InputError("Keep set must not be empty")
    invalid = [k for k in kept if not 0 <= k < model.modes]
    if invalid:
        raise InputError(f"Invalid latent modes {invalid}; model has {model.modes}")
    pruned = copy.deepcopy(model)
    for head in (pruned.prior_out, pruned.proposal_out):
        head.weight.value = head.weight.value[kept].copy()
        head.bias.value = head.bias.value[kept].copy()
        head.out_features = len(kept)
    x_size = model.condition_size
    columns = list(range(x_size)) + [x_size + k for k in kept]
    columns += list(range(x_size + model.modes, pruned.decoder.weight.value.shape[1]))
    pruned.decoder.weight.value = pruned.decoder.weight.value[:, columns].copy()
    pruned.decoder.input_size = x_size + len(kept) + OUTPUT_FEATURES
    pruned.config = dataclasses.replace(model.config, latent_modes=len(kept))
    pruned.zero_grad()
    logging.info(f"Pruned latent modes {model.modes} -> {len(kept)}")
    return pruned
