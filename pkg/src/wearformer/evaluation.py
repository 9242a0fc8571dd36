"""Per-participant-day prediction sets, rank-based ROC AUC with half-credit
ties, ROC curve export, and cross-model comparison tables.

Scorers receive only numeric channel matrices or feature vectors; nothing
derived from participant identity can reach a model input through this
module.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import LeakageError, UndefinedMetricError, ValidationError


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged; exact in float64 (values are halves)."""
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    n = len(scores)
    boundary = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.r_[starts, n])
    group_rank = starts + (counts + 1) / 2.0  # mean of ranks start+1 .. start+count
    ranks = np.empty(n)
    ranks[order] = np.repeat(group_rank, counts)
    return ranks


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties credited 0.5.

    Mann-Whitney rank formulation; raises UndefinedMetricError on
    single-class input rather than silently returning 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError(f"scores {s.shape} and labels {y.shape} must be equal 1-D")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValidationError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC AUC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = _average_ranks(s)
    rank_sum = ranks[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr) with one point per distinct score plus a
    leading (inf, 0, 0); predicts positive when score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve undefined for single-class input")
    order = np.argsort(-s, kind="mergesort")
    s_desc = s[order]
    y_desc = y[order]
    boundary = np.r_[s_desc[1:] != s_desc[:-1], True]
    cum_tp = np.cumsum(y_desc == 1)[boundary]
    cum_fp = np.cumsum(y_desc == 0)[boundary]
    thresholds = np.r_[np.inf, s_desc[boundary]]
    tpr = np.r_[0.0, cum_tp / n_pos]
    fpr = np.r_[0.0, cum_fp / n_neg]
    return thresholds, fpr, tpr


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapz(tpr, fpr))


@dataclass
class PredictionSet:
    """Scores and ground truth for one (task, model) over participant-days."""

    task: str
    model_name: str
    participant_ids: list[str]
    target_days: list[date]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.participant_ids)
        if not (len(self.target_days) == n == len(self.scores) == len(self.labels)):
            raise ValidationError("prediction set columns disagree in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("non-finite prediction scores")
        keys = set(zip(self.participant_ids, self.target_days))
        if len(keys) != n:
            raise ValidationError("duplicate (participant, day) pair in prediction set")

    def __len__(self) -> int:
        return len(self.participant_ids)

    def keys(self) -> set[tuple[str, date]]:
        return set(zip(self.participant_ids, self.target_days))

    def auc(self) -> float:
        return roc_auc(self.scores, self.labels)

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["participant_id", "target_day", "score", "label"])
            for pid, day, score, label in zip(self.participant_ids, self.target_days,
                                              self.scores, self.labels):
                writer.writerow([pid, day.isoformat(), repr(float(score)), int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, task: str, model_name: str) -> "PredictionSet":
        pids: list[str] = []
        days: list[date] = []
        scores: list[float] = []
        labels: list[int] = []
        with open(Path(path), newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != ["participant_id", "target_day", "score", "label"]:
                raise ValidationError(f"{path}: unexpected prediction header {header}")
            for row in reader:
                pids.append(row[0])
                days.append(date.fromisoformat(row[1]))
                scores.append(float(row[2]))
                labels.append(int(row[3]))
        return cls(task, model_name, pids, days,
                   np.asarray(scores), np.asarray(labels, dtype=np.int64))


class Scorer(Protocol):
    """Encodes windows to pure numeric arrays, then scores them."""

    def encode_batch(self, windows: Sequence) -> np.ndarray: ...

    def score_encoded(self, encoded: np.ndarray) -> np.ndarray: ...


def evaluate_model(scorer: Scorer, windows: Sequence, task: str, model_name: str,
                   batch_size: int = 64,
                   period: tuple[date, date] | None = None) -> PredictionSet:
    """One score per labeled window. ``period=(lo, hi)`` is the leakage
    guard: a window whose target day falls outside [lo, hi) is a hard error.
    """
    if period is not None:
        lo, hi = period
        for w in windows:
            if not (lo <= w.target_day < hi):
                raise LeakageError(
                    f"evaluation window for {w.participant_id} targets {w.target_day}, "
                    f"outside evaluation period [{lo}, {hi})")
    pids: list[str] = []
    days: list[date] = []
    labels: list[int] = []
    scores = np.empty(len(windows))
    for lo_i in range(0, len(windows), batch_size):
        chunk = list(windows[lo_i:lo_i + batch_size])
        encoded = scorer.encode_batch(chunk)
        scores[lo_i:lo_i + len(chunk)] = scorer.score_encoded(encoded)
        for w in chunk:
            if w.label is None:
                raise ValidationError(
                    f"unlabeled window for {w.participant_id} on {w.target_day}")
            pids.append(w.participant_id)
            days.append(w.target_day)
            labels.append(int(w.label))
    return PredictionSet(task, model_name, pids, days, scores,
                         np.asarray(labels, dtype=np.int64))


def score_unlabeled(scorer: Scorer, windows: Sequence, batch_size: int = 64) -> np.ndarray:
    """Inference-only scoring; no labels consulted."""
    scores = np.empty(len(windows))
    for lo in range(0, len(windows), batch_size):
        chunk = list(windows[lo:lo + batch_size])
        scores[lo:lo + len(chunk)] = scorer.score_encoded(scorer.encode_batch(chunk))
    return scores


@dataclass
class MetricsCell:
    auc: float
    positives: int
    total: int
    roc_thresholds: list[float] = field(default_factory=list)
    roc_fpr: list[float] = field(default_factory=list)
    roc_tpr: list[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    """AUC per (task, model) plus ROC points, renderable as a grid."""

    tasks: list[str]
    models: list[str]
    cells: dict[tuple[str, str], MetricsCell]

    def to_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "models": self.models,
            "cells": [
                {"task": task, "model": model, "auc": cell.auc,
                 "positives": cell.positives, "total": cell.total}
                for (task, model), cell in sorted(self.cells.items())
            ],
        }

    def render(self) -> str:
        col_w = max([len("task")] + [len(m) for m in self.models] + [7])
        task_w = max([len("task")] + [len(t) for t in self.tasks])
        lines = []
        header = "task".ljust(task_w) + "  " + "  ".join(m.rjust(col_w) for m in self.models)
        lines.append(header)
        lines.append("-" * len(header))
        for task in self.tasks:
            row = [task.ljust(task_w)]
            for model in self.models:
                cell = self.cells.get((task, model))
                row.append(("-" if cell is None else f"{cell.auc:.3f}").rjust(col_w))
            lines.append("  ".join(row))
        return "\n".join(lines)


def compare_runs(prediction_sets: Sequence[PredictionSet]) -> MetricsReport:
    """Grid of AUCs across models/tasks. Within a task, every model must
    score exactly the same (participant, day) examples."""
    if not prediction_sets:
        raise ValidationError("no prediction sets to compare")
    tasks: list[str] = []
    models: list[str] = []
    by_task: dict[str, list[PredictionSet]] = {}
    for ps in prediction_sets:
        if ps.task not in tasks:
            tasks.append(ps.task)
        if ps.model_name not in models:
            models.append(ps.model_name)
        by_task.setdefault(ps.task, []).append(ps)

    cells: dict[tuple[str, str], MetricsCell] = {}
    for task, group in by_task.items():
        reference = group[0].keys()
        for ps in group[1:]:
            if ps.keys() != reference:
                missing = sorted(reference - ps.keys())[:3]
                extra = sorted(ps.keys() - reference)[:3]
                raise ValidationError(
                    f"task {task!r}: model {ps.model_name!r} scored a different example set "
                    f"than {group[0].model_name!r} (missing {missing}, extra {extra})")
        for ps in group:
            thresholds, fpr, tpr = roc_curve(ps.scores, ps.labels)
            cells[(task, ps.model_name)] = MetricsCell(
                auc=ps.auc(), positives=int((ps.labels == 1).sum()), total=len(ps),
                roc_thresholds=thresholds.tolist(), roc_fpr=fpr.tolist(),
                roc_tpr=tpr.tolist())
    return MetricsReport(tasks, models, cells)


def export_roc_curve(prediction_set: PredictionSet, path: str | Path) -> None:
    """CSV of (threshold, fpr, tpr) per distinct score; AUC in a comment."""
    thresholds, fpr, tpr = roc_curve(prediction_set.scores, prediction_set.labels)
    auc = prediction_set.auc()
    with open(Path(path), "w", newline="") as f:
        f.write(f"# roc_auc={auc!r}\n")
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(thresholds, fpr, tpr):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def read_roc_csv(path: str | Path) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    with open(Path(path), newline="") as f:
        first = f.readline().strip()
        if not first.startswith("# roc_auc="):
            raise ValidationError(f"{path}: missing AUC header comment")
        auc = float(first.split("=", 1)[1])
        reader = csv.reader(f)
        header = next(reader)
        if header != ["threshold", "fpr", "tpr"]:
            raise ValidationError(f"{path}: unexpected ROC header {header}")
        rows = [(float(a), float(b), float(c)) for a, b, c in reader]
    arr = np.asarray(rows)
    return auc, arr[:, 0], arr[:, 1], arr[:, 2]


def write_metrics_json(report: MetricsReport, path: str | Path) -> None:
    with open(Path(path), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
