"""Tests for the training loop, checkpoints and resumption."""

from __future__ import annotations

import json

import numpy as np
import pytest

from forecast.config import ModelConfig, RunConfig, ScenarioConfig, TrainConfig
from forecast.dataset import prepare_samples
from forecast.errors import CheckpointError, InputError, NumericalError
from forecast.model import TrajectoryCVAE, featurize
from forecast.storage import Checkpoint
from forecast.synthgen import SocialForceParams, gen_social_forces
from forecast.training import EpochRecord, Trainer, checkpoint_summary, train_scenes


def small_run(**train):
    """Pedestrian run small enough for a few epochs per test."""
    model = ModelConfig(
        latent_modes=2,
        components=1,
        history=3,
        horizon=3,
        history_hidden=4,
        edge_hidden=3,
        robot_hidden=3,
        future_hidden=3,
        decoder_hidden=4,
        head_hidden=3,
    )
    values = dict(batch_size=4, learning_rate=0.01, epochs=4, kl_anneal_fraction=0.25, patience=3)
    values.update(train)
    return RunConfig(model=model, train=TrainConfig(**values), scenario=ScenarioConfig(kind="social_forces"), seed=5)


def features(run, seeds):
    """Featurized windows of a few short social-force scenes."""
    params = SocialForceParams(steps=run.model.history + run.model.horizon + 2)
    episodes = [gen_social_forces(3, params, seed, scene_id=f"sf-{seed}") for seed in seeds]
    return [featurize(s, run.model) for s in prepare_samples(episodes, run.model)]


def new_trainer(run, val=True):
    """Trainer on scenes 0-2, validating on scene 3."""
    val_features = features(run, [3]) if val else ()
    return Trainer(TrajectoryCVAE(run.model, seed=run.seed), run, features(run, range(3)), val_features)


class TestSchedule:
    """KL annealing and epoch bookkeeping."""

    def test_kl_ramp(self):
        """The weight rises linearly to one over the annealing fraction."""
        trainer = new_trainer(small_run(epochs=8, kl_anneal_fraction=0.5))
        ramp = 0.5 * 8 * trainer.steps_per_epoch
        assert trainer.kl_weight() == 0.0
        trainer.step = int(ramp // 2)
        assert trainer.kl_weight() == pytest.approx(trainer.step / ramp)
        trainer.step = int(ramp) + 5
        assert trainer.kl_weight() == 1.0

    def test_no_anneal(self):
        """A zero fraction trains with the full KL from the start."""
        assert new_trainer(small_run(kl_anneal_fraction=0.0)).kl_weight() == 1.0

    def test_empty_training_set(self):
        """Training needs samples."""
        run = small_run()
        with pytest.raises(InputError):
            Trainer(TrajectoryCVAE(run.model), run, [])

    def test_epoch_records(self, tmp_path):
        """Each epoch logs one JSON line with finite values."""
        run = small_run(epochs=3)
        log = tmp_path / "train.jsonl"
        result = new_trainer(run).fit(log_path=str(log))
        lines = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
        assert result.epochs == 3 and [r["epoch"] for r in lines] == [1, 2, 3]
        assert all(np.isfinite(r["train_loss"]) and r["val_mll"] is not None for r in lines)
        assert lines[-1]["step"] == 3 * new_trainer(run).steps_per_epoch

    def test_loss_decreases(self):
        """A few dozen Adam epochs lower the loss on a tiny training set."""
        trainer = new_trainer(small_run(epochs=40, kl_anneal_fraction=0.0, patience=1000), val=False)
        result = trainer.fit()
        assert result.history[-1].train_loss < result.history[0].train_loss


class TestEarlyStopping:
    """Best-parameter tracking on validation likelihood."""

    @staticmethod
    def record(epoch, val):
        """Epoch record with only the validation value mattering."""
        return EpochRecord(epoch, epoch, 0.0, 0.0, 0.0, 1.0, val, 0.0)

    def test_best_and_patience(self):
        """Improvements reset the counter; worse epochs accumulate."""
        trainer = new_trainer(small_run())
        trainer._track_best(self.record(1, -5.0))  # pylint: disable=protected-access
        best = trainer.best_arrays
        trainer._track_best(self.record(2, -6.0))  # pylint: disable=protected-access
        trainer._track_best(self.record(3, -7.0))  # pylint: disable=protected-access
        assert trainer.best_val == -5.0 and trainer.bad_epochs == 2
        assert trainer.best_arrays is best
        trainer._track_best(self.record(4, -4.0))  # pylint: disable=protected-access
        assert trainer.best_val == -4.0 and trainer.bad_epochs == 0

    def test_stops_after_patience(self, monkeypatch):
        """Validation that never improves ends the run after `patience` extra epochs."""
        trainer = new_trainer(small_run(epochs=20, patience=2))
        values = iter([-1.0, -2.0, -3.0, -4.0, -5.0])
        monkeypatch.setattr(trainer, "validate", lambda: next(values))
        result = trainer.fit()
        assert result.stopped_early and result.epochs == 3 and result.best_val_mll == -1.0

    def test_best_model_restores_parameters(self):
        """The best model carries the tracked arrays."""
        trainer = new_trainer(small_run())
        trainer.fit(epochs=1)
        restored = trainer.best_model().arrays()
        for name, values in trainer.best_arrays.items():
            np.testing.assert_array_equal(restored[name], values)


class TestCheckpoints:
    """Persisted training state."""

    def test_resume_matches_uninterrupted(self, tmp_path):
        """Stopping after one epoch and resuming reproduces an uninterrupted run bit for bit."""
        run = small_run(epochs=3)
        straight = new_trainer(run)
        straight.fit()

        path = tmp_path / "ck.bin"
        first = new_trainer(run)
        first.fit(checkpoint_path=str(path), epochs=1)
        resumed = Trainer.resume(Checkpoint.load(str(path)), run, features(run, range(3)), features(run, [3]))
        assert resumed.epoch == 1
        resumed.fit(checkpoint_path=str(path))

        final, expected = resumed.model.arrays(), straight.model.arrays()
        for name in expected:
            np.testing.assert_array_equal(final[name], expected[name])
        assert [r.train_loss for r in resumed.history] == [r.train_loss for r in straight.history]

    def test_checkpoint_layout(self):
        """Best, current and optimizer arrays live under separate prefixes."""
        trainer = new_trainer(small_run())
        trainer.fit(epochs=1)
        checkpoint = trainer.checkpoint()
        names = list(checkpoint.arrays)
        assert any(n.startswith("model.") for n in names)
        assert any(n.startswith("train.") for n in names)
        assert any(n.startswith("optim.") for n in names)
        assert train_scenes(checkpoint) == ["sf-0", "sf-1", "sf-2"]
        assert checkpoint_summary(checkpoint)["epoch"] == 1
        assert TrajectoryCVAE.from_checkpoint(checkpoint).config == trainer.model.config

    def test_resume_rejects_other_config(self):
        """A checkpoint from a different run configuration cannot be resumed."""
        run = small_run()
        trainer = new_trainer(run)
        checkpoint = trainer.checkpoint()
        with pytest.raises(CheckpointError):
            Trainer.resume(checkpoint, small_run(learning_rate=0.02), trainer.train_features)

    def test_resume_needs_training_state(self):
        """Model-only checkpoints carry nothing to resume."""
        run = small_run()
        with pytest.raises(CheckpointError):
            Trainer.resume(TrajectoryCVAE(run.model).to_checkpoint(), run, features(run, [0]))

    def test_numerical_failure_keeps_last_good(self, tmp_path, monkeypatch):
        """A non-finite loss aborts and leaves the previous epoch's checkpoint on disk."""
        run = small_run(epochs=3)
        trainer = new_trainer(run)
        path = tmp_path / "ck.bin"
        trainer.fit(checkpoint_path=str(path), epochs=1)

        def explode(*_args, **_kwargs):
            raise NumericalError("loss is nan")

        monkeypatch.setattr(trainer.model, "elbo_loss", explode)
        with pytest.raises(NumericalError):
            trainer.fit(checkpoint_path=str(path))
        assert Checkpoint.load(str(path)).meta["trainer"]["epoch"] == 1
