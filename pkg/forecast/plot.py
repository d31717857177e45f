"""Static SVG plots of scenes and predictions."""

from __future__ import annotations

import io
import logging
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  # pylint: disable=wrong-import-position
import numpy as np  # noqa: E402  # pylint: disable=wrong-import-position
from matplotlib.patches import Ellipse  # noqa: E402  # pylint: disable=wrong-import-position

from .config import Config  # noqa: E402
from .dynamics import GaussianTrajectory  # noqa: E402
from .storage import write_atomic  # noqa: E402
from .synthgen import Episode  # noqa: E402

TYPE_COLORS = {"pedestrian": "tab:blue", "vehicle": "tab:green", "robot": "tab:red"}
MIN_ALPHA = 0.08


def _svg_bytes(fig: plt.Figure, config_hash: str) -> str:
    buffer = io.StringIO()
    stamp = f"format_version={Config.FORMAT_VERSION} config_hash={config_hash}"
    with plt.rc_context({"svg.hashsalt": "forecast", "svg.fonttype": "none"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None, "Description": stamp})
    plt.close(fig)
    return buffer.getvalue()


def plot_scene(episode: Episode, path: str, config_hash: str = "") -> None:
    """Every agent's full track, colored by type; the SVG metadata records the producing config."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for agent_id, traj in sorted(episode.trajectories.items()):
        xy = traj.states[:, :2]
        color = TYPE_COLORS.get(traj.agent_type, "black")
        ax.plot(xy[:, 0], xy[:, 1], color=color, linewidth=1.2)
        first = int(np.argmax(~np.isnan(xy[:, 0])))
        ax.annotate(agent_id, xy[first], fontsize=7)
    ax.set_title(f"{episode.scene_id} ({episode.label or 'unlabeled'})")
    ax.set_aspect("equal", adjustable="datalim")
    write_atomic(path, _svg_bytes(fig, config_hash))
    logging.info(f"Wrote scene plot {path}")


def plot_prediction(
    path: str,
    history: np.ndarray,
    truth: np.ndarray | None,
    mode_probs: np.ndarray,
    samples: np.ndarray | None = None,
    gaussians: Sequence[GaussianTrajectory] | None = None,
    neighbors: dict[str, np.ndarray] | None = None,
    title: str = "",
    config_hash: str = "",
) -> None:
    """History, ground truth and per-mode prediction fans colored by latent mode.

    `samples` is (K, n, T, 2); `gaussians` holds one trajectory per mode. Fan
    opacity follows the mode's probability.
    """
    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab20")
    peak = float(np.max(mode_probs)) if len(mode_probs) else 1.0
    for neighbor_id, track in sorted((neighbors or {}).items()):
        ax.plot(track[:, 0], track[:, 1], color="gray", linewidth=0.8, linestyle=":")
        ax.annotate(neighbor_id, track[-1, :2], fontsize=6, color="gray")
    for z, prob in enumerate(mode_probs):
        alpha = max(MIN_ALPHA, float(prob) / peak)
        color = cmap(z % cmap.N)
        if samples is not None:
            for path_xy in samples[z]:
                ax.plot(path_xy[:, 0], path_xy[:, 1], color=color, alpha=alpha * 0.5, linewidth=0.6)
        if gaussians is not None:
            traj = gaussians[z]
            ax.plot(traj.means[:, 0], traj.means[:, 1], color=color, alpha=alpha, linewidth=1.0)
            for mean, cov in zip(traj.means, traj.covariances):
                values, vectors = np.linalg.eigh(cov)
                angle = float(np.degrees(np.arctan2(vectors[1, 1], vectors[0, 1])))
                width, height = 4.0 * np.sqrt(np.maximum(values[::-1], 0.0))
                ax.add_patch(Ellipse(mean, width, height, angle=angle, color=color, alpha=alpha * 0.2))
    ax.plot(history[:, 0], history[:, 1], color="black", linewidth=2.0, label="history")
    if truth is not None:
        ax.plot(truth[:, 0], truth[:, 1], color="black", linestyle="--", linewidth=1.5, label="ground truth")
    ax.legend(loc="best", fontsize=7)
    ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    write_atomic(path, _svg_bytes(fig, config_hash))
    logging.info(f"Wrote prediction plot {path}")
