"""Command implementations behind the CLI subcommands."""

from __future__ import annotations

import json
import logging
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import Config, ModelConfig, RunConfig
from .dataset import DatasetFile, Sample, check_disjoint, make_dataset, prepare_samples, require_samples, split_episodes
from .dynamics import GaussianTrajectory
from .errors import ConfigurationError, InputError, NumericalError
from .metrics import (
    KdeResult,
    ade,
    analytic_nll,
    best_of_n,
    const_velocity_baseline,
    const_velocity_gaussian,
    fde,
    fit_const_velocity_sigmas,
    kde_nll_detailed,
    mode_recovery,
)
from .model import (
    TrajectoryCVAE,
    collate,
    featurize,
    history_frames,
    make_batch,
    mode_usage,
    prune_modes,
)
from .plot import plot_prediction, plot_scene
from .report import MetricReport, output_report
from .stg import index_states, update_graph
from .storage import Checkpoint, read_text, write_json
from .synthgen import STATE_COLUMNS, generate_episode, make_params, split_episode
from .training import Trainer, TrainResult, checkpoint_summary, train_scenes
from .utils import Formatter, make_rng

DEFAULT_METRICS = ("ade", "fde", "bon_ade", "bon_fde", "kde_nll")
AVAILABLE_METRICS = DEFAULT_METRICS + ("analytic_nll", "mll", "mode_recovery")
BASELINE_METRICS = {"ade", "fde", "bon_ade", "bon_fde", "kde_nll", "analytic_nll"}
EVAL_CHUNK = 32


# Shared helpers


def _split_samples(data: DatasetFile, config: ModelConfig, split: str, stride: int = 1) -> list[Sample]:
    parts = split_episodes(data.episodes)
    if split not in parts:
        raise InputError(f"Unknown split '{split}'")
    return prepare_samples(parts[split], config, stride)


def _check_dt(data: DatasetFile, config: ModelConfig) -> None:
    if abs(data.header.dt - config.dt) > 1e-9:
        raise ConfigurationError(f"Dataset dt {data.header.dt} does not match model dt {config.dt}")


def _load_model(checkpoint_path: str) -> tuple[TrajectoryCVAE, Checkpoint]:
    checkpoint = Checkpoint.load(checkpoint_path)
    model = TrajectoryCVAE.from_checkpoint(checkpoint)
    logging.info(f"Loaded {checkpoint_path}: {checkpoint_summary(checkpoint)}")
    return model, checkpoint


def load_robot_future(path: str, horizon: int) -> np.ndarray:
    """Read a robot future: one `x y vx vy [heading]` row per future step."""
    rows = []
    for line_number, line in enumerate(read_text(path).splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            values = [float(v) for v in stripped.split()]
        except ValueError as e:
            raise InputError(f"{path} line {line_number}: cannot read '{stripped}'") from e
        if len(values) not in (4, 5):
            raise InputError(f"{path} line {line_number}: expected 4 or 5 values, got {len(values)}")
        rows.append(values + [np.nan] * (len(STATE_COLUMNS) - len(values)))
    if len(rows) != horizon:
        raise ConfigurationError(f"Robot future has {len(rows)} steps but the model horizon is {horizon}")
    return np.array(rows)


# generate


def cmd_generate(run: RunConfig, out: str) -> DatasetFile:
    """Generate `run.scenario.count` episodes and write them as a dataset file."""
    scenario = run.scenario
    params = make_params(scenario.kind, scenario.params)
    episodes = [generate_episode(scenario.kind, scenario.params, run.seed, i) for i in range(scenario.count)]
    # full generator parameters, not just the overrides
    data = make_dataset(episodes, scenario.kind, params.dt, run.digest(), asdict(params))
    data.save(out)

    labels = Counter(e.label or "-" for e in episodes)
    agents = sum(len(e.trajectories) for e in episodes)
    steps = sum(e.length for e in episodes)
    print(f"Generated {len(episodes)} {scenario.kind} episodes ({agents} agents, {steps} steps) -> {out}")
    if episodes:
        print("Labels: " + ", ".join(f"{k}={v}" for k, v in sorted(labels.items())))
        parts = split_episodes(episodes)
        print("Splits: " + ", ".join(f"{k}={len(v)}" for k, v in parts.items()))
    return data


# train


def cmd_train(
    run: RunConfig, dataset_path: str, out: str, log_path: str | None = None, resume: bool = False
) -> TrainResult:
    """Train on the dataset's train split, validating on its val split."""
    data = DatasetFile.load(dataset_path)
    config = run.model
    _check_dt(data, config)
    train = require_samples(_split_samples(data, config, "train", run.train.stride), "training")
    val = _split_samples(data, config, "val")
    train_features = [featurize(s, config) for s in train]
    val_features = [featurize(s, config) for s in val]
    logging.info(f"{len(train_features)} training and {len(val_features)} validation windows")

    if resume and os.path.exists(out):
        trainer = Trainer.resume(Checkpoint.load(out), run, train_features, val_features)
    else:
        trainer = Trainer(TrajectoryCVAE(config, seed=run.seed), run, train_features, val_features)
    result = trainer.fit(checkpoint_path=out, log_path=log_path)
    if result.history:
        last = result.history[-1]
        print(f"Trained {result.epochs} epochs: loss {last.train_loss:.4f}, best val MLL {result.best_val_mll}")
    if result.stopped_early:
        print("Stopped early on validation likelihood")
    return result


# predict


def _prediction_entry(sample: Sample, output: Any, index: int) -> dict[str, Any]:
    entry: dict[str, Any] = {
        "scene_id": sample.scene_id,
        "t0": sample.t0,
        "focus_id": sample.focus_id,
        "history": sample.histories[sample.focus_id][:, :2].tolist(),
        "truth": sample.future[:, :2].tolist(),
        "neighbors": {
            i: h[:, :2].tolist()
            for i, h in sorted(sample.histories.items())
            if i != sample.focus_id and not np.any(np.isnan(h[:, 0]))
        },
        "mode_probs": output.mode_probs[index].tolist(),
    }
    if output.samples is not None:
        entry["samples"] = output.samples[index].tolist()
    if output.most_likely is not None:
        entry["most_likely"] = output.most_likely[index].tolist()
        entry["most_likely_mode"] = int(output.most_likely_mode[index])
    if output.gaussians is not None:
        entry["gaussians"] = [
            {"means": g.means.tolist(), "covariances": g.covariances.tolist()} for g in output.gaussians[index]
        ]
    return entry


def cmd_predict(
    checkpoint_path: str,
    dataset_path: str,
    out: str,
    mode: str = "sampled",
    n: int = Config.BON_SAMPLES,
    seed: int = Config.DEFAULT_SEED,
    robot_future_path: str | None = None,
    plot_path: str | None = None,
    split: str = "test",
    limit: int | None = None,
) -> dict[str, Any]:
    """Predict every window of a split and write a predictions file."""
    model, checkpoint = _load_model(checkpoint_path)
    config = model.config
    data = DatasetFile.load(dataset_path)
    _check_dt(data, config)
    samples = require_samples(_split_samples(data, config, split), split)
    if limit is not None:
        samples = samples[:limit]
    if robot_future_path is not None:
        robot_future = load_robot_future(robot_future_path, config.horizon)
        for sample in samples:
            sample.robot_future = robot_future
    rng = make_rng(seed, "predict")
    entries = []
    for start in range(0, len(samples), EVAL_CHUNK):
        chunk = samples[start : start + EVAL_CHUNK]
        output = model.predict(make_batch(chunk, config), n=n, mode=mode, rng=rng)
        entries.extend(_prediction_entry(s, output, i) for i, s in enumerate(chunk))
    result = {
        "format_version": Config.FORMAT_VERSION,
        "config_hash": checkpoint.meta.get("config_hash", ""),
        "mode": mode,
        "n": n,
        "seed": seed,
        "horizon": config.horizon,
        "modes": model.modes,
        "predictions": entries,
    }
    write_json(out, result)
    print(f"Wrote {len(entries)} {mode} predictions to {out}")
    if plot_path and entries:
        _plot_entry(entries[0], plot_path, result["config_hash"])
    return result


# evaluate


@dataclass
class _ChunkResult:
    values: dict[str, list[float]] = field(default_factory=dict)
    modes: list[int] = field(default_factory=list)
    labels: list[str | None] = field(default_factory=list)
    degenerate: int = 0

    def add(self, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(value)


def _evaluate_chunk(
    model: TrajectoryCVAE,
    samples: Sequence[Sample],
    metrics: Sequence[str],
    n: int,
    sigmas: np.ndarray,
    seed: int,
    index: int,
) -> _ChunkResult:
    config = model.config
    rng = make_rng(seed, "evaluate", index)
    batch = make_batch(samples, config)
    result = _ChunkResult()
    wanted = set(metrics)
    most_likely = model.predict(batch, mode="most_likely") if wanted & {"ade", "fde", "mode_recovery"} else None
    bon = model.sample_trajectories(batch, n, rng) if wanted & {"bon_ade", "bon_fde"} else None
    kde = model.sample_trajectories(batch, Config.KDE_SAMPLES, rng) if "kde_nll" in wanted else None
    analytic = model.predict(batch, mode="analytic") if "analytic_nll" in wanted else None
    mll = model.marginal_log_likelihood(batch) if "mll" in wanted else None
    if "mode_recovery" in wanted:
        result.modes = np.argmax(model.posterior(batch), axis=1).tolist()
        result.labels = list(batch.labels)

    for i, sample in enumerate(samples):
        truth = batch.targets[i]
        history = sample.histories[sample.focus_id]
        cv = const_velocity_baseline(history, config.horizon)
        cv_gauss = const_velocity_gaussian(history, config.horizon, sigmas)
        if most_likely is not None and most_likely.most_likely is not None:
            result.add("ade", ade(most_likely.most_likely[i], truth))
            result.add("fde", fde(most_likely.most_likely[i], truth))
        if bon is not None:
            result.add("bon_ade", best_of_n(bon[i], truth, "ade"))
            result.add("bon_fde", best_of_n(bon[i], truth, "fde"))
        if kde is not None:
            detail: KdeResult = kde_nll_detailed(kde[i], truth)
            result.add("kde_nll", detail.nll)
            result.degenerate += int(detail.degenerate)
            result.add("cv_kde_nll", kde_nll_detailed(cv_gauss.sample(rng, Config.KDE_SAMPLES), truth).nll)
        if analytic is not None and analytic.gaussians is not None:
            result.add("analytic_nll", analytic_nll(analytic.gaussians[i], truth, analytic.mode_probs[i]))
            result.add("cv_analytic_nll", analytic_nll(cv_gauss, truth))
        if mll is not None:
            result.add("mll", float(mll[i]))
        for name, fn in (("ade", ade), ("fde", fde), ("bon_ade", ade), ("bon_fde", fde)):
            if name in wanted:
                result.add(f"cv_{name}", fn(cv, truth))
    return result


def cmd_evaluate(
    checkpoint_path: str,
    dataset_path: str,
    metrics: Sequence[str] = DEFAULT_METRICS,
    n: int = Config.BON_SAMPLES,
    seed: int = Config.DEFAULT_SEED,
    workers: int = Config.WORKERS,
    out: str | None = None,
) -> MetricReport:
    """Score a checkpoint on the test split next to the constant-velocity baseline."""
    unknown = sorted(set(metrics) - set(AVAILABLE_METRICS))
    if unknown:
        raise InputError(f"Unknown metrics: {', '.join(unknown)}")
    if n < 1:
        raise InputError("Best-of-N needs at least one sample")
    model, checkpoint = _load_model(checkpoint_path)
    config = model.config
    data = DatasetFile.load(dataset_path)
    _check_dt(data, config)
    test = require_samples(_split_samples(data, config, "test"), "test")
    check_disjoint(train_scenes(checkpoint), {s.scene_id for s in test})
    if "analytic_nll" in metrics and config.components != 1:
        raise ConfigurationError("analytic_nll needs a single-component decoder")

    fit_on = _split_samples(data, config, "train") or test
    sigmas = fit_const_velocity_sigmas([s.histories[s.focus_id] for s in fit_on], [s.future for s in fit_on])
    chunks = [test[i : i + EVAL_CHUNK] for i in range(0, len(test), EVAL_CHUNK)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(
            executor.map(
                lambda job: _evaluate_chunk(model, job[1], metrics, n, sigmas, seed, job[0]), enumerate(chunks)
            )
        )

    values: dict[str, list[float]] = {}
    for chunk_result in results:
        for name, vals in chunk_result.values.items():
            values.setdefault(name, []).extend(vals)
    report = MetricReport(samples=n, count=len(test), config_hash=checkpoint.meta.get("config_hash", ""))
    for name in metrics:
        if name == "mode_recovery":
            report.metrics[name] = _mode_recovery_score(results)
            continue
        report.metrics[name] = float(np.mean(values[name]))
        if name in BASELINE_METRICS:
            report.metrics[f"cv_{name}"] = float(np.mean(values[f"cv_{name}"]))
    degenerate = sum(r.degenerate for r in results)
    if degenerate:
        report.flags.append(f"kde_degenerate={degenerate}")
    if out:
        report.save(out)
    output_report(report)
    return report


def _mode_recovery_score(results: Sequence[_ChunkResult]) -> float:
    modes = [m for r in results for m in r.modes]
    labels = [label for r in results for label in r.labels]
    half = len(modes) // 2
    if half == 0:
        raise InputError("Mode recovery needs at least two labeled test windows")
    return mode_recovery(modes[:half], labels[:half], modes[half:], labels[half:]).agreement


# analyze-latent


def cmd_analyze_latent(
    checkpoint_path: str, dataset_path: str, out: str | None = None, prune_out: str | None = None
) -> dict[str, Any]:
    """Report per-mode prior mass on the validation and test splits; optionally prune to the 99% set."""
    model, checkpoint = _load_model(checkpoint_path)
    config = model.config
    data = DatasetFile.load(dataset_path)
    _check_dt(data, config)
    samples = _split_samples(data, config, "val") + _split_samples(data, config, "test")
    batches = (make_batch(samples[i : i + EVAL_CHUNK], config) for i in range(0, len(samples), EVAL_CHUNK))
    usage = mode_usage(model, batches, Config.MASS_COVERAGE)
    summary = {
        "format_version": Config.FORMAT_VERSION,
        "config_hash": checkpoint.meta.get("config_hash", ""),
        "count": len(samples),
        **usage.to_dict(),
    }
    for z in usage.order[: max(len(usage.cover), 1)]:
        print(f"mode {z:3d}: {usage.masses[z]:.4f}")
    print(f"{len(usage.cover)} of {model.modes} modes cover {usage.coverage:.0%} of the prior mass")
    if out:
        write_json(out, summary)
    if prune_out:
        pruned = prune_modes(model, usage.cover)
        meta = {k: v for k, v in checkpoint.meta.items() if k != "model"}
        meta["pruned_from"] = model.modes
        pruned.to_checkpoint(meta).save(prune_out)
        print(f"Wrote pruned checkpoint with {pruned.modes} modes to {prune_out}")
    return summary


# bench-online


@dataclass
class LatencyStats:
    """Mean and 95th percentile of a list of durations (ms)."""

    mean_ms: float
    p95_ms: float

    @staticmethod
    def of(durations: Sequence[float]) -> LatencyStats:
        """Summarise durations given in seconds."""
        if not durations:
            return LatencyStats(0.0, 0.0)
        ms = np.asarray(durations) * 1000.0
        return LatencyStats(float(np.mean(ms)), float(np.percentile(ms, 95)))


@dataclass
class BenchReport:
    """Online update-and-predict versus full re-encoding."""

    scenes: int
    steps: int
    max_relative_difference: float
    incremental: dict[str, LatencyStats]
    full: dict[str, LatencyStats]
    config_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form."""
        return {"format_version": Config.FORMAT_VERSION, **asdict(self)}


def _relative_difference(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-12))


def cmd_bench_online(
    checkpoint_path: str, dataset_path: str, scenes: int = 100, out: str | None = None, tolerance: float = 1e-6
) -> BenchReport:
    """Stream test scenes step by step, timing incremental updates against full re-encoding."""
    model, checkpoint = _load_model(checkpoint_path)
    config = model.config
    data = DatasetFile.load(dataset_path)
    _check_dt(data, config)
    episodes = split_episodes(data.episodes)["test"][:scenes]
    encoder = model.online_encoder()
    phases = ("graph", "encode", "decode", "total", "full_encode", "full_decode", "full_total")
    timings: dict[str, list[float]] = {k: [] for k in phases}
    worst = 0.0
    steps = 0
    used = 0
    for episode in episodes:
        if episode.length < config.history + config.horizon:
            continue
        windows = {x.t0: (x, y) for x, y in split_episode(episode, config.history, config.horizon)}
        frames = history_frames(episode.stacked(), episode.agent_types())
        focus = next((i for i, tr in sorted(episode.trajectories.items()) if tr.agent_type == config.focus_type), None)
        if focus is None or any(not frame for frame in frames):
            continue
        used += 1
        graph, encodings = encoder.start(frames[0])
        for t in range(1, len(frames)):
            tick = time.perf_counter()
            graph = update_graph(graph, frames[t], encoder.threshold, encoder.window)
            graph_time = time.perf_counter() - tick
            tick = time.perf_counter()
            encodings = encoder.advance(graph, encodings, index_states(frames[t]))
            encode_time = time.perf_counter() - tick
            timings["graph"].append(graph_time)
            timings["encode"].append(encode_time)
            window = windows.get(t)
            if window is None or focus not in window[1].futures or focus not in encodings.history:
                continue
            x, y = window
            sample = Sample(
                scene_id=x.scene_id,
                t0=t,
                focus_id=focus,
                focus_type=config.focus_type,
                histories=x.histories,
                agent_types=x.agent_types,
                robot_future=x.robot_future,
                future=y.futures[focus],
                label=x.label,
                kind=episode.kind,
                params=episode.params,
            )
            batch = collate([featurize(sample, config)], config)

            tick = time.perf_counter()
            condition = model.condition_from_parts(
                encodings.history[focus].h.value[None],
                encoder.neighbor_vector(graph, encodings, focus)[None],
                batch.robot_inputs,
                batch.map_crops,
            )
            online = model.predict(batch, mode="most_likely", condition=condition).most_likely
            decode_time = time.perf_counter() - tick
            timings["decode"].append(decode_time)
            timings["total"].append(graph_time + encode_time + decode_time)

            tick = time.perf_counter()
            state, neighbors = encoder.full_encode(frames[: t + 1], focus)
            full_encode_time = time.perf_counter() - tick
            tick = time.perf_counter()
            condition = model.condition_from_parts(
                state.h.value[None], neighbors[None], batch.robot_inputs, batch.map_crops
            )
            full = model.predict(batch, mode="most_likely", condition=condition).most_likely
            full_decode_time = time.perf_counter() - tick
            timings["full_encode"].append(full_encode_time)
            timings["full_decode"].append(full_decode_time)
            timings["full_total"].append(full_encode_time + full_decode_time)

            if online is None or full is None:
                raise NumericalError("Most-likely prediction produced no trajectory")
            worst = max(
                worst,
                _relative_difference(encodings.history[focus].h.value, state.h.value),
                _relative_difference(online, full),
            )
            steps += 1
    incremental = {k: LatencyStats.of(timings[k]) for k in ("graph", "encode", "decode", "total")}
    full_stats = {k: LatencyStats.of(timings[f"full_{k}"]) for k in ("encode", "decode", "total")}
    report = BenchReport(used, steps, worst, incremental, full_stats, checkpoint.meta.get("config_hash", ""))
    for label, stats in (("incremental", incremental), ("full", full_stats)):
        for phase, s in stats.items():
            mean, p95 = Formatter.format_duration(s.mean_ms / 1000), Formatter.format_duration(s.p95_ms / 1000)
            print(f"{label:11s} {phase:7s} mean {mean} p95 {p95}")
    print(f"max relative difference {worst:.3e} over {steps} predictions in {used} scenes")
    if out:
        write_json(out, report.to_dict())
    if worst > tolerance:
        raise NumericalError(f"Incremental and full encodings disagree: relative difference {worst:.3e}")
    return report


# plot


def _plot_entry(entry: dict[str, Any], path: str, config_hash: str) -> None:
    gaussians = None
    if "gaussians" in entry:
        gaussians = [GaussianTrajectory(np.array(g["means"]), np.array(g["covariances"])) for g in entry["gaussians"]]
    samples = np.array(entry["samples"]) if "samples" in entry else None
    if "most_likely" in entry:
        # one path for the chosen mode; NaN rows draw nothing for the others
        track = np.array(entry["most_likely"])
        samples = np.full((len(entry["mode_probs"]), 1) + track.shape, np.nan)
        samples[entry["most_likely_mode"], 0] = track
    plot_prediction(
        path,
        np.array(entry["history"]),
        np.array(entry["truth"]),
        np.array(entry["mode_probs"]),
        samples=samples,
        gaussians=gaussians,
        neighbors={k: np.array(v) for k, v in entry["neighbors"].items()},
        title=f"{entry['scene_id']} t={entry['t0']} focus={entry['focus_id']}",
        config_hash=config_hash,
    )


def cmd_plot(path: str, out: str, scene: str | None = None) -> str:
    """Render a dataset scene or a prediction entry to SVG."""
    text = read_text(path)
    if text.startswith("#FORECAST"):
        data = DatasetFile.parse(text)
        episodes = [e for e in data.episodes if scene is None or e.scene_id == scene]
        if not episodes:
            raise InputError(f"Scene '{scene}' not found in {path}")
        plot_scene(episodes[0], out, data.header.config_hash)
        return out
    try:
        result = json.loads(text)
        predictions = result["predictions"]
        config_hash = result.get("config_hash", "")
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise InputError(f"{path} is neither a dataset nor a predictions file") from e
    entries = [p for p in predictions if scene is None or p["scene_id"] == scene]
    if not entries:
        raise InputError(f"Scene '{scene}' not found in {path}")
    _plot_entry(entries[0], out, config_hash)
    return out
