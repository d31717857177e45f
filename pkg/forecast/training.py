"""ELBO training loop with KL annealing, early stopping and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import Config, RunConfig
from .diffkernel import Adam, Tape
from .errors import CheckpointError, InputError, NumericalError
from .model import SampleFeatures, TrajectoryCVAE, collate
from .storage import Checkpoint, write_atomic
from .utils import make_rng


@dataclass
class EpochRecord:
    """One line of the training log."""

    epoch: int
    step: int
    train_loss: float
    train_elbo: float
    kl: float
    kl_weight: float
    val_mll: float | None
    grad_norm: float


@dataclass
class TrainResult:
    """Summary of a finished (or early-stopped) run."""

    epochs: int
    best_val_mll: float | None
    stopped_early: bool
    history: list[EpochRecord] = field(default_factory=list)


class Trainer:  # pylint: disable=too-many-instance-attributes
    """Minibatch Adam on the exact ELBO.

    The checkpoint keeps the best validation parameters under `model.`, the
    current parameters under `train.` and the Adam buffers under `optim.`, so a
    run can be resumed exactly from the end of any epoch.
    """

    def __init__(
        self,
        model: TrajectoryCVAE,
        run: RunConfig,
        train_features: Sequence[SampleFeatures],
        val_features: Sequence[SampleFeatures] = (),
    ):
        if not train_features:
            raise InputError("No training samples")
        self.model = model
        self.run = run
        self.train_features = list(train_features)
        self.val_features = list(val_features)
        self.optimizer = Adam(model.parameters(), run.train.learning_rate, run.train.max_grad_norm)
        self.rng = make_rng(run.seed, "train")
        self.epoch = 0
        self.step = 0
        self.best_val: float | None = None
        self.best_arrays = model.arrays()
        self.bad_epochs = 0
        self.history: list[EpochRecord] = []

    @property
    def steps_per_epoch(self) -> int:
        """Minibatches per pass over the training set."""
        return math.ceil(len(self.train_features) / self.run.train.batch_size)

    def kl_weight(self) -> float:
        """Linear ramp 0 -> 1 over the first `kl_anneal_fraction` of all steps."""
        ramp = self.run.train.kl_anneal_fraction * self.run.train.epochs * self.steps_per_epoch
        if ramp <= 0:
            return 1.0
        return min(1.0, self.step / ramp)

    def _batches(self, features: list[SampleFeatures], order: np.ndarray | None = None) -> list[list[SampleFeatures]]:
        size = self.run.train.batch_size
        index = np.arange(len(features)) if order is None else order
        return [[features[i] for i in index[s : s + size]] for s in range(0, len(features), size)]

    def train_epoch(self) -> EpochRecord:
        """One shuffled pass over the training set."""
        cfg = self.model.config
        order = self.rng.permutation(len(self.train_features))
        losses, elbos, kls, norms = [], [], [], []
        for chunk in self._batches(self.train_features, order):
            batch = collate(chunk, cfg)
            weight = self.kl_weight()
            with Tape() as tape:
                terms = self.model.elbo_loss(batch, weight)
                tape.backward(terms.loss)
            norms.append(self.optimizer.step())
            self.step += 1
            losses.append(float(terms.loss.value) * batch.size)
            elbos.append(float(np.sum(terms.elbo)))
            kls.append(float(np.sum(terms.kl)))
        n = len(self.train_features)
        return EpochRecord(
            epoch=self.epoch + 1,
            step=self.step,
            train_loss=sum(losses) / n,
            train_elbo=sum(elbos) / n,
            kl=sum(kls) / n,
            kl_weight=self.kl_weight(),
            val_mll=self.validate(),
            grad_norm=float(np.mean(norms)),
        )

    def validate(self) -> float | None:
        """Mean marginal log-likelihood on the validation set, None without one."""
        if not self.val_features:
            return None
        total = 0.0
        for chunk in self._batches(self.val_features):
            total += float(np.sum(self.model.marginal_log_likelihood(collate(chunk, self.model.config))))
        return total / len(self.val_features)

    def fit(
        self, checkpoint_path: str | None = None, log_path: str | None = None, epochs: int | None = None
    ) -> TrainResult:
        """Train until `epochs` (default from the config) or early stop on validation likelihood."""
        target = self.run.train.epochs if epochs is None else epochs
        stopped = False
        while self.epoch < target:
            last_good = self.checkpoint() if checkpoint_path else None
            try:
                record = self.train_epoch()
            except NumericalError:
                logging.error(f"Numerical failure in epoch {self.epoch + 1}; keeping the last good checkpoint")
                if checkpoint_path and last_good is not None:
                    last_good.save(checkpoint_path)
                raise
            self.epoch = record.epoch
            self.history.append(record)
            self._track_best(record)
            logging.info(
                f"epoch {record.epoch}: loss {record.train_loss:.4f} kl {record.kl:.4f} "
                f"beta {record.kl_weight:.3f} val_mll {record.val_mll}"
            )
            if checkpoint_path:
                self.checkpoint().save(checkpoint_path)
            if log_path:
                write_atomic(log_path, "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.history))
            if self.val_features and self.bad_epochs >= self.run.train.patience:
                logging.info(f"Early stop after {self.epoch} epochs; best val_mll {self.best_val:.4f}")
                stopped = True
                break
        return TrainResult(self.epoch, self.best_val, stopped, list(self.history))

    def _track_best(self, record: EpochRecord) -> None:
        if record.val_mll is None:
            self.best_arrays = self.model.arrays()
            return
        if self.best_val is None or record.val_mll > self.best_val:
            self.best_val = record.val_mll
            self.best_arrays = self.model.arrays()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1

    def best_model(self) -> TrajectoryCVAE:
        """Model carrying the best validation parameters."""
        model = TrajectoryCVAE(self.model.config)
        model.load_arrays(self.best_arrays)
        return model

    def checkpoint(self) -> Checkpoint:
        """Best parameters, current parameters, optimizer state and trainer bookkeeping."""
        meta = {
            "format_version": Config.FORMAT_VERSION,
            "config_hash": self.run.digest(),
            "run": self.run.to_dict(),
            "train_scenes": sorted({f.scene_id for f in self.train_features}),
            "trainer": {
                "epoch": self.epoch,
                "step": self.step,
                "best_val": self.best_val,
                "bad_epochs": self.bad_epochs,
                "optimizer_steps": self.optimizer.steps,
                "rng_state": self.rng.bit_generator.state,
                "history": [asdict(r) for r in self.history],
            },
        }
        checkpoint = self.best_model().to_checkpoint(meta)
        checkpoint.arrays.update({f"train.{k}": v for k, v in self.model.arrays().items()})
        checkpoint.arrays.update({f"optim.{k}": v for k, v in self.optimizer.state_arrays().items()})
        return checkpoint

    @staticmethod
    def resume(
        checkpoint: Checkpoint,
        run: RunConfig,
        train_features: Sequence[SampleFeatures],
        val_features: Sequence[SampleFeatures] = (),
    ) -> Trainer:
        """Continue a run exactly where its checkpoint left off."""
        state = checkpoint.meta.get("trainer")
        if state is None:
            raise CheckpointError("Checkpoint carries no training state")
        if checkpoint.meta.get("config_hash") != run.digest():
            raise CheckpointError("Checkpoint was written by a different run configuration")
        model = TrajectoryCVAE(run.model, seed=run.seed)
        model.load_arrays(checkpoint.subset("train."))
        trainer = Trainer(model, run, train_features, val_features)
        trainer.best_arrays = TrajectoryCVAE.from_checkpoint(checkpoint).arrays()
        trainer.optimizer.load_state_arrays(checkpoint.subset("optim."), int(state["optimizer_steps"]))
        trainer.rng.bit_generator.state = state["rng_state"]
        trainer.epoch = int(state["epoch"])
        trainer.step = int(state["step"])
        trainer.best_val = state["best_val"]
        trainer.bad_epochs = int(state["bad_epochs"])
        trainer.history = [EpochRecord(**r) for r in state["history"]]
        logging.info(f"Resumed training at epoch {trainer.epoch}")
        return trainer


def train_scenes(checkpoint: Checkpoint) -> list[str]:
    """Scene ids a checkpoint was trained on."""
    return list(checkpoint.meta.get("train_scenes", []))


def checkpoint_summary(checkpoint: Checkpoint) -> dict[str, Any]:
    """Short description for logs."""
    trainer = checkpoint.meta.get("trainer", {})
    return {"epoch": trainer.get("epoch"), "best_val": trainer.get("best_val"), "arrays": len(checkpoint.arrays)}
