"""Focal-loss training of the neural models, plus the pretrain -> finetune
transfer pipeline.

Optimization is plain mini-batch Adam with seeded shuffling; the tuning set
(a user-level slice of the test period, mirroring the evaluation protocol)
drives per-epoch ROC AUC logging and early stopping. Class imbalance is
handled by the loss alone; there is no resampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .data import (Dataset, InputTransform, SplitSpec, Window, fit_transform,
                   temporal_split, TASKS, assert_windows_in_period, default_boundary)
from .errors import LeakageError, NumericError, ValidationError
from .evaluation import roc_auc
from .model import (ModelConfig, ModelParams, forward_for_arch, init_params,
                    reinit_head, score_windows)

LogFn = Callable[[str], None]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    early_stop_patience: int = 5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0
    task: str = "flu_symptoms"
    reinit_head_on_finetune: bool = True

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate {self.learning_rate} must be >= 0")
        if self.focal_gamma < 0:
            raise ValidationError(f"focal_gamma {self.focal_gamma} must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValidationError(f"focal_alpha {self.focal_alpha} outside (0,1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValidationError("batch_size >= 1, max_epochs >= 0, patience >= 1 required")
        if self.task not in TASKS:
            raise ValidationError(f"task {self.task!r} not one of {TASKS}")


@dataclass
class TrainReport:
    task: str
    epoch_losses: list[float] = field(default_factory=list)
    tuning_aucs: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_tuning_auc: float = float("nan")
    wall_clock_seconds: float = 0.0
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean focal loss over a batch of logits and 0/1 labels.

    Per example, with p_t the predicted probability of the true class and
    alpha_t = alpha for positives and 1-alpha for negatives:
        alpha_t * (1 - p_t)^gamma * (-log p_t)
    Evaluated through log-sigmoid identities (signed logits into softplus),
    so no probability is ever materialized inside a bare log.
    """
    if gamma < 0:
        raise ValidationError(f"focal gamma {gamma} must be >= 0")
    y = np.asarray(labels, dtype=np.float64)
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))
    sign = 2.0 * y - 1.0
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    signed = ad.mul(logits, sign)            # s = z for y=1, -z for y=0
    neg_log_pt = ad.softplus(ad.neg(signed))  # -log sigmoid(s)
    one_minus_pt = ad.sigmoid(ad.neg(signed))
    weighted = ad.mul(ad.mul(ad.pow_const(one_minus_pt, gamma), neg_log_pt), alpha_t)
    return ad.mean(weighted)


def _labels_array(windows: Sequence[Window]) -> np.ndarray:
    labels = np.array([1 if w.label else 0 for w in windows], dtype=np.int64)
    return labels


def _precompute_inputs(windows: Sequence[Window], transform: InputTransform) -> np.ndarray:
    return np.stack([transform.apply(w.channels()) for w in windows]) if windows else \
        np.empty((0, 6, transform.output_length))


def prepare_model(model_config: ModelConfig, train_windows: Sequence[Window],
                  resolution_minutes: int, normalize: bool, seed: int) -> ModelParams:
    """Fit the input transform on the train split and initialize parameters.

    The model config's input_length must equal 5760 / resolution_minutes; the
    returned params carry the transform so inference always matches training.
    """
    transform = fit_transform(train_windows, resolution_minutes, normalize, seed=seed)
    if model_config.input_length != transform.output_length:
        raise ValidationError(
            f"model input_length {model_config.input_length} != transformed length "
            f"{transform.output_length} at {resolution_minutes}-minute resolution")
    return init_params(model_config, seed, transform=transform)


def train(params: ModelParams, windows_train: Sequence[Window],
          windows_tuning: Sequence[Window], config: TrainConfig,
          log: LogFn | None = print,
          train_period: tuple[date, date] | None = None) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam on focal loss; returns the best-tuning-AUC parameters.

    With an empty tuning set there is no early stopping and the final-epoch
    parameters are returned (used by finetuning on tiny cohorts).
    """
    config.validate()
    if params.transform is None:
        raise ValidationError("params must carry an InputTransform (see prepare_model)")
    if not windows_train:
        raise ValidationError("empty training window set")
    if train_period is not None:
        assert_windows_in_period(windows_train, *train_period, context="train")
    y_train = _labels_array(windows_train)
    if y_train.min() == y_train.max():
        raise ValidationError(
            f"training set contains a single class (all labels {int(y_train[0])})")

    started = time.perf_counter()
    x_train = _precompute_inputs(windows_train, params.transform)
    x_tuning = _precompute_inputs(windows_tuning, params.transform)
    y_tuning = _labels_array(windows_tuning) if windows_tuning else np.empty(0, dtype=np.int64)
    if len(windows_tuning) and y_tuning.min() == y_tuning.max():
        raise ValidationError("tuning set contains a single class; AUC undefined")

    report = TrainReport(task=config.task)
    trainable = params.trainable()
    state = AdamState(trainable, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(windows_train)

    best_auc = -np.inf
    best_tensors: dict[str, np.ndarray] | None = None
    best_epoch = -1
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            with Tape() as tape:
                logits = forward_for_arch(xb, params, dropout_active=True, rng=rng)
                loss = focal_loss(logits, yb, config.focal_gamma, config.focal_alpha)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}")
            ad.backward(tape, loss, params=trainable.values())
            if config.learning_rate > 0:
                adam_step(trainable, None, state)
            epoch_loss += loss_value * len(idx)
        epoch_loss /= n
        report.epoch_losses.append(epoch_loss)

        if len(x_tuning):
            tuning_scores = score_windows(params, x_tuning)
            auc = roc_auc(tuning_scores, y_tuning)
            report.tuning_aucs.append(auc)
            if log:
                log(f"epoch {epoch}: loss {epoch_loss:.6f} tuning_auc {auc:.4f}")
            if auc > best_auc:
                best_auc = auc
                best_epoch = epoch
                best_tensors = {k: t.data.copy() for k, t in params.tensors.items()}
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.early_stop_patience:
                    if log:
                        log(f"early stop after epoch {epoch} "
                            f"(best tuning AUC {best_auc:.4f} at epoch {best_epoch})")
                    break
        else:
            if log:
                log(f"epoch {epoch}: loss {epoch_loss:.6f}")
            best_epoch = epoch

    result = params.copy()
    if best_tensors is not None:
        for name, data in best_tensors.items():
            result.tensors[name].data = data
        report.best_tuning_auc = best_auc
    report.best_epoch = best_epoch
    report.wall_clock_seconds = time.perf_counter() - started
    return result, report


def pretrain(dataset: Dataset, model_config: ModelConfig, config: TrainConfig,
             split: SplitSpec | None = None, resolution_minutes: int = 1,
             normalize: bool = True, log: LogFn | None = print
             ) -> tuple[ModelParams, TrainReport, SplitSpec]:
    """Train on the plentiful proxy task over the train period.

    The task defaults to fatigue; a dataset without any such labels is
    rejected up front.
    """
    config.validate()
    has_labels = any((getattr(lab, config.task if config.task != "flu_positivity"
                              else "flu_positive") != -1).any()
                     for lab in dataset.labels.values())
    if not has_labels:
        raise ValidationError(f"dataset has no {config.task!r} labels; cannot pretrain")
    if split is None:
        split = SplitSpec(boundary_day=default_boundary(dataset))
    split_result = temporal_split(dataset, split, config.task)
    params = prepare_model(model_config, split_result.train, resolution_minutes,
                           normalize, config.seed)
    trained, report = train(params, split_result.train, split_result.tuning, config,
                            log=log, train_period=(dataset.start_day, split.boundary_day))
    return trained, report, split


def finetune(pretrained: ModelParams, windows_finetune: Sequence[Window],
             config: TrainConfig, windows_tuning: Sequence[Window] = (),
             holdout_users: Sequence[str] = (), log: LogFn | None = print
             ) -> tuple[ModelParams, TrainReport]:
    """Continue training all weights on the small cohort's windows.

    The classifier head is re-initialized when the config asks for it. Any
    finetune window belonging to a holdout user is a hard leakage error.
    """
    config.validate()
    holdout = set(holdout_users)
    for w in windows_finetune:
        if w.participant_id in holdout:
            raise LeakageError(
                f"finetune window for holdout participant {w.participant_id}")
    params = pretrained.copy()
    if config.reinit_head_on_finetune:
        reinit_head(params, config.seed)
    if config.max_epochs == 0:
        report = TrainReport(task=config.task)
        return params, report
    return train(params, windows_finetune, windows_tuning, config, log=log)


class NeuralScorer:
    """Evaluation adapter: window -> transformed channels -> sigmoid score."""

    def __init__(self, params: ModelParams, batch_size: int = 64):
        if params.transform is None:
            raise ValidationError("checkpoint carries no input transform")
        self.params = params
        self.batch_size = batch_size

    def encode_batch(self, windows: Sequence[Window]) -> np.ndarray:
        return self.params.transform.apply_many(windows)

    def score_encoded(self, encoded: np.ndarray) -> np.ndarray:
        return score_windows(self.params, encoded, batch_size=self.batch_size)
