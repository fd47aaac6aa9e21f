"""Mini-batch training on normal frames with best-epoch snapshot selection."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .model import Model
from .detector import batch_errors
from .tensor import NonFiniteGradientError, RngState, adam_step, mse_loss, sgd_step

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"
    input_size: int = 128
    eval_subsample: int | None = None
    eval_batch_size: int = 32
    record_time: bool = True

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.eval_subsample is not None and self.eval_subsample < 1:
            raise ValueError(f"eval_subsample must be >= 1 when set, got {self.eval_subsample}")


@dataclass
class EpochStats:
    epoch: int
    mean_mse: float
    mean_rmse: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]
    best_epoch: int

    def __iter__(self):
        # allows ``model, history = fit(...)``
        return iter((self.model, self.history))


def make_batches(corpus, batch_size: int, rng: RngState) -> list[np.ndarray]:
    """Shuffled index batches covering every frame exactly once.

    ``corpus`` may be a frame count or anything with ``len``.
    """
    n = corpus if isinstance(corpus, (int, np.integer)) else len(corpus)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(int(n))
    return [order[i : i + batch_size] for i in range(0, int(n), batch_size)]


def evaluate_error(model: Model, frames: np.ndarray, batch_size: int = 32) -> tuple[float, float]:
    """Mean MSE and mean RMSE over ``frames`` with batch norm in infer mode."""
    was_training = model.training
    model.eval()
    mses, rmses = [], []
    try:
        for i in range(0, len(frames), batch_size):
            r = batch_errors(model, frames[i : i + batch_size])
            rmses.append(r)
            mses.append((r / 255.0) ** 2)
    finally:
        if was_training:
            model.train()
    return float(np.mean(np.concatenate(mses))), float(np.mean(np.concatenate(rmses)))


def _eval_indices(n: int, cap: int | None) -> np.ndarray:
    if cap is None or cap >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(int))


def fit(corpus, model: Model, config: TrainConfig | None = None,
        checkpoint_path=None, progress=None) -> TrainResult:
    """Train ``model`` on normal frames and return the best-epoch snapshot.

    Each epoch ends with a full inference-mode pass over (a fixed subsample
    of) the training frames; the snapshot with the lowest mean RMSE wins,
    ties going to the earliest epoch. When ``checkpoint_path`` is given the
    current best snapshot is kept there.
    """
    config = config or TrainConfig()
    config.validate()
    frames = np.asarray(corpus, dtype=np.float32)
    if frames.ndim != 4 or len(frames) == 0:
        raise TrainingError(f"corpus must be a non-empty (N,C,S,S) array, got shape {frames.shape}")
    size = model.config.input_size
    if frames.shape[2:] != (size, size):
        raise TrainingError(f"frames are {frames.shape[2]}x{frames.shape[3]}, model expects {size}x{size}")

    rng = RngState(config.seed)
    params = model.parameters()
    eval_frames = frames[_eval_indices(len(frames), config.eval_subsample)]
    history: list[EpochStats] = []
    best: Model | None = None
    best_epoch = 0
    best_rmse = math.inf

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for bi, idx in enumerate(make_batches(len(frames), config.batch_size, rng.child(epoch))):
            batch = frames[idx]
            loss = mse_loss(model(batch), batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            try:
                if config.optimizer == "adam":
                    adam_step(params, config.learning_rate)
                else:
                    sgd_step(params, config.learning_rate)
            except NonFiniteGradientError as exc:
                raise TrainingError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            losses.append(value * len(idx))
        mean_mse = float(sum(losses) / len(frames))
        _, mean_rmse = evaluate_error(model, eval_frames, config.eval_batch_size)
        seconds = time.perf_counter() - t0 if config.record_time else 0.0
        history.append(EpochStats(epoch, mean_mse, mean_rmse, seconds))
        logger.info("epoch %d  mse %.6f  rmse %.4f  %.1fs", epoch, mean_mse, mean_rmse, seconds)
        if progress is not None:
            progress(history[-1])
        if mean_rmse < best_rmse:
            best_rmse = mean_rmse
            best_epoch = epoch
            best = model.clone().eval()
            if checkpoint_path is not None:
                save_checkpoint(best, checkpoint_path)

    assert best is not None
    best.freeze()
    return TrainResult(best, history, best_epoch)


HISTORY_FIELDS = ("epoch", "mean_mse", "mean_rmse", "seconds")


def history_csv(history: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for h in history:
        w.writerow([h.epoch, repr(h.mean_mse), repr(h.mean_rmse), f"{h.seconds:.3f}"])
    return buf.getvalue()


def write_history(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(history_csv(history))


def read_history(path) -> list[EpochStats]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [EpochStats(int(r["epoch"]), float(r["mean_mse"]), float(r["mean_rmse"]), float(r["seconds"]))
                for r in csv.DictReader(fh)]
