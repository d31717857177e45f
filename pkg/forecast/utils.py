"""Utility (formatter) module."""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np

from .config import Config


SPLIT_NAMES = ("train", "val", "test")


def scene_split(scene_id: str) -> str:
    """Assign a scene to train/val/test by hashing its id (70/15/15)."""
    bucket = int(hashlib.sha256(scene_id.encode("utf-8")).hexdigest()[:8], 16) % 100
    train_end, val_end = Config.SPLIT_BOUNDS
    if bucket < train_end:
        return "train"
    if bucket < val_end:
        return "val"
    return "test"


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Independent generator for a (seed, stream...) key; identical keys give identical streams."""
    words = [seed & 0xFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            part = int(hashlib.sha256(part.encode("utf-8")).hexdigest()[:8], 16)
        words.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


class Formatter:
    """Helper class for formatting metric values."""

    UNITS = {"ade": "m", "fde": "m", "nll": "nats", "ms": "ms"}

    @staticmethod
    def format_value(value: Any) -> str:
        """Format a metric value with four significant decimals, `N/A` when missing."""
        try:
            v = float(value)
        except (TypeError, ValueError):
            return "N/A"
        if not np.isfinite(v):
            return str(v)
        if v == int(v) and abs(v) < 1e9:
            return str(int(v))
        return f"{v:.4f}"

    @staticmethod
    def unit_for(name: str) -> str:
        """Unit suffix guessed from a metric name (e.g. `bon20_fde` -> m)."""
        lowered = name.lower()
        for key, unit in Formatter.UNITS.items():
            if key in lowered:
                return unit
        return ""

    @staticmethod
    def format_duration(seconds: float) -> str:
        """Format a duration (e.g. 0.0123 -> 12.30ms, 75 -> 1m15s)."""
        if seconds < 1.0:
            return f"{seconds * 1000:.2f}ms"
        if seconds < 60.0:
            return f"{seconds:.2f}s"
        minutes, rest = divmod(int(round(seconds)), 60)
        return f"{minutes}m{rest:02d}s"
