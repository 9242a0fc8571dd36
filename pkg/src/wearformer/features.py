"""Handcrafted per-day features for the non-neural baselines.

17 standard features plus 6 expert features per day; a feature window
concatenates 4 consecutive days (oldest first) into a 92-long vector covering
the same span as the neural input window.

Operationalizations (pinned by tests):
  - resting HR: mean HR over minutes that are awake (sleep==0), non-moving
    (steps==0), and fully recorded across all three streams.
  - in bed: maximal sleep==1 runs extended over adjacent recorded minutes
    with steps<=5; the main block is the longest extended run.
  - nap: any sleep block other than the longest one (clipped to the day).
  - activity buckets by steps/minute: sedentary 0, lightly active 1-59,
    fairly active 60-99, very active >=100; only recorded minutes counted.
  - calories are a fixed surrogate (not derivable from these streams): a
    per-participant basal constant hashed from the participant id, active
    calories proportional to total steps, calories_out their sum.
  - percentiles: linear interpolation between order statistics (inclusive);
    std is the population standard deviation.
  - steps streak: maximal run of consecutive recorded minutes with steps>=1;
    missing minutes break streaks.
  - per-stream missing flags: 1 only when the stream is absent for the whole
    day; missing_day flags a day with all three streams absent.
Fully missing inputs yield 0-valued features with the matching flag raised.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, fields
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (Dataset, ParticipantSeries, SplitResult, SplitSpec, Window,
                   WINDOW_DAYS, temporal_split)
from .errors import ValidationError

STANDARD_FEATURE_NAMES = (
    "resting_hr", "main_minutes_in_bed", "sleep_efficiency", "nap_count",
    "total_asleep_minutes", "total_in_bed_minutes", "active_calories",
    "calories_out", "base_metabolic_rate", "sedentary_minutes",
    "lightly_active_minutes", "fairly_active_minutes", "very_active_minutes",
    "missing_hr_flag", "missing_sleep_flag", "missing_steps_flag", "missing_day_flag",
)
EXPERT_FEATURE_NAMES = (
    "resting_hr_p95", "resting_hr_p50", "resting_hr_std", "awake_hr_p95",
    "steps_streak_p95", "steps_streak_p50",
)
FEATURE_NAMES = STANDARD_FEATURE_NAMES + EXPERT_FEATURE_NAMES

ACTIVE_CALORIES_PER_STEP = 0.04
BMR_BASE = 1400
BMR_SPREAD = 600
IN_BED_MAX_STEPS = 5.0


@dataclass
class DayFeatures:
    resting_hr: float = 0.0
    main_minutes_in_bed: float = 0.0
    sleep_efficiency: float = 0.0
    nap_count: float = 0.0
    total_asleep_minutes: float = 0.0
    total_in_bed_minutes: float = 0.0
    active_calories: float = 0.0
    calories_out: float = 0.0
    base_metabolic_rate: float = 0.0
    sedentary_minutes: float = 0.0
    lightly_active_minutes: float = 0.0
    fairly_active_minutes: float = 0.0
    very_active_minutes: float = 0.0
    missing_hr_flag: float = 0.0
    missing_sleep_flag: float = 0.0
    missing_steps_flag: float = 0.0
    missing_day_flag: float = 0.0
    resting_hr_p95: float = 0.0
    resting_hr_p50: float = 0.0
    resting_hr_std: float = 0.0
    awake_hr_p95: float = 0.0
    steps_streak_p95: float = 0.0
    steps_streak_p50: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DayFeatures":
        return cls(**{name: float(v) for name, v in zip(FEATURE_NAMES, values)})


def percentile_linear(values: np.ndarray, q: float) -> float:
    """Inclusive linear-interpolation percentile of a 1-D sample."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValidationError("percentile of empty sample")
    if v.size == 1:
        return float(v[0])
    pos = (v.size - 1) * (q / 100.0)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of True."""
    out: list[tuple[int, int]] = []
    padded = np.concatenate(([False], mask, [False]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    for i in range(0, len(changes), 2):
        out.append((int(changes[i]), int(changes[i + 1])))
    return out


def participant_bmr(participant_id: str) -> float:
    """Deterministic per-participant basal rate surrogate (kcal/day)."""
    return float(BMR_BASE + zlib.crc32(participant_id.encode()) % BMR_SPREAD)


def compute_day_features(series: ParticipantSeries, day_index: int) -> DayFeatures:
    """All 23 features for one participant-day; pure function of its inputs."""
    if day_index < 0 or day_index >= series.n_days:
        raise ValidationError(f"day index {day_index} outside 0..{series.n_days - 1}")
    sl = series.day_slice(day_index)
    steps = series.steps[sl].astype(np.float64)
    hr = series.heart_rate[sl].astype(np.float64)
    sleep = series.sleep[sl]
    steps_ok = series.missing_steps[sl] == 0
    hr_ok = series.missing_hr[sl] == 0
    sleep_ok = series.missing_sleep[sl] == 0

    out = DayFeatures()
    out.missing_steps_flag = float(not steps_ok.any())
    out.missing_hr_flag = float(not hr_ok.any())
    out.missing_sleep_flag = float(not sleep_ok.any())
    out.missing_day_flag = float(out.missing_steps_flag and out.missing_hr_flag
                                 and out.missing_sleep_flag)
    if out.missing_day_flag:
        return out

    asleep = (sleep == 1) & sleep_ok
    awake = (sleep == 0) & sleep_ok

    # sleep structure
    if sleep_ok.any():
        sleep_runs = _runs(asleep)
        out.total_asleep_minutes = float(asleep.sum())
        out.nap_count = float(max(0, len(sleep_runs) - 1))
        in_bed = asleep.copy()
        low_move = steps_ok & (steps <= IN_BED_MAX_STEPS) & ~asleep
        for start, end in sleep_runs:
            i = start - 1
            while i >= 0 and low_move[i]:
                in_bed[i] = True
                i -= 1
            i = end
            while i < in_bed.size and low_move[i]:
                in_bed[i] = True
                i += 1
        out.total_in_bed_minutes = float(in_bed.sum())
        bed_runs = _runs(in_bed)
        out.main_minutes_in_bed = float(max((e - s for s, e in bed_runs), default=0))
        if out.total_in_bed_minutes > 0:
            out.sleep_efficiency = out.total_asleep_minutes / out.total_in_bed_minutes

    # activity buckets over recorded step minutes
    if steps_ok.any():
        rec = steps[steps_ok]
        out.sedentary_minutes = float((rec == 0).sum())
        out.lightly_active_minutes = float(((rec >= 1) & (rec <= 59)).sum())
        out.fairly_active_minutes = float(((rec >= 60) & (rec <= 99)).sum())
        out.very_active_minutes = float((rec >= 100).sum())

    # calorie surrogates
    out.base_metabolic_rate = participant_bmr(series.participant_id)
    total_steps = float(steps[steps_ok].sum()) if steps_ok.any() else 0.0
    out.active_calories = ACTIVE_CALORIES_PER_STEP * total_steps
    out.calories_out = out.base_metabolic_rate + out.active_calories

    # resting heart rate: awake, non-moving, fully recorded minutes
    resting = hr_ok & steps_ok & awake & (steps == 0)
    if resting.any():
        rest_vals = hr[resting]
        out.resting_hr = float(rest_vals.mean())
        out.resting_hr_p95 = percentile_linear(rest_vals, 95.0)
        out.resting_hr_p50 = percentile_linear(rest_vals, 50.0)
        out.resting_hr_std = float(rest_vals.std())

    awake_hr = hr_ok & awake
    if awake_hr.any():
        out.awake_hr_p95 = percentile_linear(hr[awake_hr], 95.0)

    # stepping streaks (missing minutes break runs)
    streaks = [e - s for s, e in _runs(steps_ok & (steps >= 1.0))]
    if streaks:
        arr = np.asarray(streaks, dtype=np.float64)
        out.steps_streak_p95 = percentile_linear(arr, 95.0)
        out.steps_streak_p50 = percentile_linear(arr, 50.0)
    return out


def compute_standard_features(series: ParticipantSeries, day_index: int) -> np.ndarray:
    return compute_day_features(series, day_index).as_array()[:len(STANDARD_FEATURE_NAMES)]


def compute_expert_features(series: ParticipantSeries, day_index: int) -> np.ndarray:
    return compute_day_features(series, day_index).as_array()[len(STANDARD_FEATURE_NAMES):]


@dataclass(frozen=True)
class FeatureWindow:
    """4 concatenated DayFeatures vectors (oldest day first) plus the label."""

    participant_id: str
    target_day: date
    label: bool | None
    vector: np.ndarray  # (92,)

    def key(self) -> tuple[str, date]:
        return (self.participant_id, self.target_day)


class _DayFeatureCache:
    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def get(self, pid: str, day_index: int) -> np.ndarray:
        key = (pid, day_index)
        hit = self._cache.get(key)
        if hit is None:
            hit = compute_day_features(self.dataset.series[pid], day_index).as_array()
            self._cache[key] = hit
        return hit


def windows_to_feature_windows(dataset: Dataset, windows: Sequence[Window],
                               cache: "_DayFeatureCache | None" = None) -> list[FeatureWindow]:
    """Map neural windows 1:1 onto feature windows (identical example sets)."""
    cache = cache or _DayFeatureCache(dataset)
    out = []
    for w in windows:
        target_idx = dataset.day_index(w.target_day)
        parts = [cache.get(w.participant_id, d)
                 for d in range(target_idx - WINDOW_DAYS, target_idx)]
        out.append(FeatureWindow(w.participant_id, w.target_day, w.label,
                                 np.concatenate(parts)))
    return out


def build_feature_windows(dataset: Dataset, task: str, spec: SplitSpec
                          ) -> tuple[list[FeatureWindow], list[FeatureWindow], list[FeatureWindow]]:
    """Feature windows for the same split the neural pipeline uses."""
    split = temporal_split(dataset, spec, task)
    cache = _DayFeatureCache(dataset)
    return (windows_to_feature_windows(dataset, split.train, cache),
            windows_to_feature_windows(dataset, split.tuning, cache),
            windows_to_feature_windows(dataset, split.test, cache))


def feature_windows_for_split(dataset: Dataset, split: SplitResult
                              ) -> tuple[list[FeatureWindow], list[FeatureWindow], list[FeatureWindow]]:
    cache = _DayFeatureCache(dataset)
    return (windows_to_feature_windows(dataset, split.train, cache),
            windows_to_feature_windows(dataset, split.tuning, cache),
            windows_to_feature_windows(dataset, split.test, cache))


def export_feature_csv(dataset: Dataset, path: str | Path) -> int:
    """One row of 23 features per participant-day; returns the row count."""
    n = 0
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["participant_id", "date", *FEATURE_NAMES])
        for pid in dataset.participants():
            series = dataset.series[pid]
            for d in range(series.n_days):
                values = compute_day_features(series, d).as_array()
                day = (series.start_day + timedelta(days=d)).isoformat()
                writer.writerow([pid, day] + [repr(float(v)) for v in values])
                n += 1
    return n
