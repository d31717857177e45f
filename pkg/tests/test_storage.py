"""Tests for atomic writes and the checkpoint container."""

from __future__ import annotations

import json

import numpy as np
import pytest

from forecast.errors import CheckpointError, InputError
from forecast.storage import Checkpoint, read_text, write_atomic, write_json


class TestFiles:
    """Atomic text and JSON output."""

    def test_write_creates_parents(self, tmp_path):
        """Missing directories are created and no temp files remain."""
        path = tmp_path / "a" / "b" / "out.txt"
        write_atomic(str(path), "hello\n")
        assert read_text(str(path)) == "hello\n"
        assert [p.name for p in path.parent.iterdir()] == ["out.txt"]

    def test_json_is_sorted(self, tmp_path):
        """JSON output is indented with sorted keys."""
        path = tmp_path / "r.json"
        write_json(str(path), {"b": 1, "a": [1.5]})
        text = path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [1.5], "b": 1}

    def test_read_missing(self, tmp_path):
        """Unreadable files are input errors."""
        with pytest.raises(InputError):
            read_text(str(tmp_path / "nope"))


class TestCheckpoint:
    """Binary container of named arrays."""

    def test_round_trip(self, tmp_path, rng):
        """Arrays, shapes, order and metadata survive exactly."""
        arrays = {
            "model.w": rng.standard_normal((3, 4)),
            "model.b": rng.standard_normal(4),
            "train.step": np.array(7.0),
        }
        meta = {"config": {"seed": 1}, "epoch": 3}
        path = tmp_path / "ck.bin"
        Checkpoint(arrays, meta).save(str(path))
        loaded = Checkpoint.load(str(path))
        assert list(loaded.arrays) == list(arrays)
        for name, value in arrays.items():
            np.testing.assert_array_equal(loaded.arrays[name], value)
            assert loaded.arrays[name].shape == value.shape
        assert loaded.meta == meta

    def test_subset(self, rng):
        """Prefix selection strips the prefix."""
        ck = Checkpoint({"model.w": rng.standard_normal(2), "optim.m": np.zeros(2)})
        assert list(ck.subset("model.")) == ["w"]

    def test_bad_magic(self):
        """Foreign bytes are rejected."""
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"PK\x03\x04garbage")

    def test_truncated(self, rng):
        """Cutting the payload short is detected."""
        blob = Checkpoint({"w": rng.standard_normal(10)}).to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob[:-8])

    def test_trailing_bytes(self, rng):
        """Extra bytes after the last array are detected."""
        blob = Checkpoint({"w": rng.standard_normal(2)}).to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob + b"\x00")

    def test_missing_file(self, tmp_path):
        """Unreadable checkpoint paths raise CheckpointError."""
        with pytest.raises(CheckpointError):
            Checkpoint.load(str(tmp_path / "none.bin"))
