"""Mini-batch training loop with best-validation-epoch selection."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..dsp import FeatureStats, Spectrogram, compute_feature_stats, normalize, normalize_utterance
from .config import ModelConfig, TrainConfig
from .network import MOSModel, NonFiniteError, loss_and_grad, mse_loss, predict_normalized
from .optim import AdamState, adam_step
from .params import init_parameters

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch: int, train_mse: float, val_mse: float) -> None:
        self.epochs.append(epoch)
        self.train_mse.append(train_mse)
        self.val_mse.append(val_mse)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse"])
            for row in zip(self.epochs, self.train_mse, self.val_mse):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def _matrix(features) -> np.ndarray:
    return features.data if isinstance(features, Spectrogram) else np.asarray(features, dtype=np.float64)


def epoch_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list:
    """Shuffle, then sort by length inside windows of eight batches so padding stays small."""
    order = rng.permutation(len(lengths))
    window = 8 * batch_size
    batches = []
    for start in range(0, len(order), window):
        chunk = order[start:start + window]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return batches


def train(model_config: ModelConfig, train_items, val_items, train_config: TrainConfig = TrainConfig(),
          stats: FeatureStats | None = None, params=None):
    """Fit a MOS regressor.

    ``train_items`` and ``val_items`` are sequences of ``(features, mos)`` with
    raw log-magnitude features.  Normalization statistics are computed from the
    training features unless ``stats`` is given (ignored when the config asks
    for per-utterance normalization).  Returns ``(model, history)``
    where the model carries the parameters of the best validation epoch.
    """
    if not train_items or not val_items:
        raise ValueError("training and validation sets must be non-empty")
    per_utterance = model_config.normalization == "utterance"
    if per_utterance:
        stats = None
    elif stats is None:
        stats = compute_feature_stats(_matrix(f) for f, _ in train_items)

    def prepare(items):
        specs = (Spectrogram("", _matrix(f)) for f, _ in items)
        seqs = [normalize_utterance(s).data if per_utterance else normalize(s, stats).data for s in specs]
        return seqs, np.array([float(y) for _, y in items])

    train_x, train_y = prepare(train_items)
    val_x, val_y = prepare(val_items)
    params = init_parameters(model_config) if params is None else params.copy()
    state = AdamState.zeros(params.size, lr=train_config.lr, beta1=train_config.beta1,
                            beta2=train_config.beta2, eps=train_config.eps, clip_norm=train_config.clip_norm)
    rng = np.random.default_rng(train_config.seed)
    lengths = [len(s) for s in train_x]
    history = TrainHistory()
    best_val, best_flat = np.inf, params.flat.copy()
    for epoch in range(1, train_config.epochs + 1):
        total = 0.0
        try:
            for idx in epoch_batches(lengths, train_config.batch_size, rng):
                loss, grad, _ = loss_and_grad(model_config, params, [train_x[i] for i in idx], train_y[idx])
                total += loss * len(idx)
                adam_step(params.flat, grad, state)
            val_pred = predict_normalized(model_config, params, val_x)
            val_mse = mse_loss(val_pred, val_y)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        train_mse = total / len(train_x)
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss", history)
        history.append(epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val, best_flat = val_mse, params.flat.copy()
            history.best_epoch = epoch
        log.debug("epoch %d train_mse %.4f val_mse %.4f", epoch, train_mse, val_mse)
    params.flat[:] = best_flat
    return MOSModel(model_config, params, stats), history
