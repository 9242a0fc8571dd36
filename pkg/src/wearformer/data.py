"""Minute-level multi-sensor participant data: storage, file formats,
missingness encoding, 4-day prediction windows, and temporal splits.

Encoding rule for every stream: an absent value is stored as 0 with the
paired missingness flag set to 1. Fully absent days are all-zero values with
all-one flags.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataFormatError, LeakageError, ValidationError

MINUTES_PER_DAY = 1440
WINDOW_DAYS = 4
WINDOW_MINUTES = WINDOW_DAYS * MINUTES_PER_DAY  # 5760

TASKS = ("flu_positivity", "kit_trigger", "flu_symptoms", "fatigue")

SENSOR_HEADER = ["participant_id", "timestamp_utc", "steps", "heart_rate", "sleep"]
LABEL_HEADER = ["participant_id", "date", "flu_symptoms", "kit_trigger", "flu_positive", "fatigue"]

# channel order of a Window matrix
CHANNEL_NAMES = ("steps", "heart_rate", "sleep", "missing_steps", "missing_hr", "missing_sleep")
VALUE_CHANNELS = (0, 1, 2)
MISSING_CHANNELS = (3, 4, 5)


@dataclass
class ParticipantSeries:
    """One participant's minute-resolution streams over the study period."""

    participant_id: str
    start_day: date
    n_days: int
    steps: np.ndarray         # float32, (n_days*1440,)
    heart_rate: np.ndarray    # float32
    sleep: np.ndarray         # uint8
    missing_steps: np.ndarray  # uint8, 1 = value absent
    missing_hr: np.ndarray
    missing_sleep: np.ndarray

    def n_minutes(self) -> int:
        return self.n_days * MINUTES_PER_DAY

    def validate(self) -> None:
        n = self.n_minutes()
        arrays = {
            "steps": self.steps, "heart_rate": self.heart_rate, "sleep": self.sleep,
            "missing_steps": self.missing_steps, "missing_hr": self.missing_hr,
            "missing_sleep": self.missing_sleep,
        }
        for name, arr in arrays.items():
            if arr.shape != (n,):
                raise ValidationError(
                    f"{self.participant_id}: {name} has length {arr.shape}, expected ({n},)")
        for name, value, mask in (("steps", self.steps, self.missing_steps),
                                  ("heart_rate", self.heart_rate, self.missing_hr),
                                  ("sleep", self.sleep, self.missing_sleep)):
            if np.any(value[mask == 1] != 0):
                raise ValidationError(f"{self.participant_id}: {name} nonzero where missing")
        if np.any(self.steps < 0) or np.any(self.heart_rate < 0):
            raise ValidationError(f"{self.participant_id}: negative sensor values")
        if not np.all(np.isin(self.sleep, (0, 1))):
            raise ValidationError(f"{self.participant_id}: sleep flag outside {{0,1}}")

    def day_slice(self, day_index: int) -> slice:
        return slice(day_index * MINUTES_PER_DAY, (day_index + 1) * MINUTES_PER_DAY)

    def day_present(self, day_index: int) -> bool:
        """True when any stream has any recorded value that day."""
        sl = self.day_slice(day_index)
        return bool((self.missing_steps[sl] == 0).any()
                    or (self.missing_hr[sl] == 0).any()
                    or (self.missing_sleep[sl] == 0).any())


_LABEL_FIELDS = ("flu_symptoms", "kit_trigger", "flu_positive", "fatigue")


@dataclass
class DailyLabels:
    """Per-day survey/lab outcomes; -1 encodes an absent label."""

    participant_id: str
    start_day: date
    n_days: int
    flu_symptoms: np.ndarray  # int8 in {-1, 0, 1}
    kit_trigger: np.ndarray
    flu_positive: np.ndarray
    fatigue: np.ndarray

    @classmethod
    def empty(cls, participant_id: str, start_day: date, n_days: int) -> "DailyLabels":
        make = lambda: np.full(n_days, -1, dtype=np.int8)
        return cls(participant_id, start_day, n_days, make(), make(), make(), make())

    def validate(self) -> None:
        for name in _LABEL_FIELDS:
            arr = getattr(self, name)
            if arr.shape != (self.n_days,):
                raise ValidationError(f"{self.participant_id}: {name} length mismatch")
            if not np.all(np.isin(arr, (-1, 0, 1))):
                raise ValidationError(f"{self.participant_id}: {name} outside {{-1,0,1}}")
        bad = (self.kit_trigger == 1) & (self.flu_symptoms != 1)
        if np.any(bad):
            raise ValidationError(
                f"{self.participant_id}: kit_trigger without flu_symptoms on day index "
                f"{int(np.flatnonzero(bad)[0])}")
        bad = (self.flu_positive != -1) & (self.kit_trigger != 1)
        if np.any(bad):
            raise ValidationError(
                f"{self.participant_id}: flu_positive recorded without kit_trigger on day index "
                f"{int(np.flatnonzero(bad)[0])}")

    def task_label(self, task: str, day_index: int) -> bool | None:
        """Task-specific binary label for one day, or None when unlabeled.

        flu_positivity: positive on lab-positive swab days; negative on every
        other surveyed day (including triggered-but-negative days).
        """
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
        if day_index < 0 or day_index >= self.n_days:
            return None
        if task == "flu_positivity":
            if self.flu_positive[day_index] == 1:
                return True
            if self.flu_symptoms[day_index] != -1:
                return False
            return None
        raw = getattr(self, "flu_symptoms" if task == "flu_symptoms" else task)[day_index]
        return None if raw == -1 else bool(raw)


@dataclass
class Dataset:
    """All participants' series and labels over one shared study period."""

    start_day: date
    n_days: int
    series: dict[str, ParticipantSeries]
    labels: dict[str, DailyLabels]

    def participants(self) -> list[str]:
        return sorted(self.series)

    def day_index(self, day: date) -> int:
        return (day - self.start_day).days

    def day_of(self, index: int) -> date:
        return self.start_day + timedelta(days=index)

    def validate(self) -> None:
        for s in self.series.values():
            s.validate()
        for pid, lab in self.labels.items():
            if pid not in self.series:
                raise ValidationError(f"labels reference unknown participant {pid!r}")
            lab.validate()

    def user_days_total(self) -> int:
        return len(self.series) * self.n_days

    def user_days_present(self) -> int:
        return sum(sum(s.day_present(d) for d in range(s.n_days)) for s in self.series.values())


@dataclass(frozen=True)
class Window:
    """A 4-day, 6-channel input matrix for one (participant, target day).

    The matrix covers exactly the 5760 minutes strictly before target_day and
    is assembled on demand; nothing derived from the participant's identity
    appears in the channels.
    """

    participant_id: str
    target_day: date
    label: bool | None
    series: ParticipantSeries = field(repr=False, compare=False)

    def channels(self) -> np.ndarray:
        """(6, 5760) float64 matrix in CHANNEL_NAMES order."""
        s = self.series
        end = (self.target_day - s.start_day).days * MINUTES_PER_DAY
        start = end - WINDOW_MINUTES
        if start < 0 or end > s.n_minutes():
            raise ValidationError(
                f"window [{start},{end}) outside recorded range for {self.participant_id}")
        out = np.empty((6, WINDOW_MINUTES), dtype=np.float64)
        out[0] = s.steps[start:end]
        out[1] = s.heart_rate[start:end]
        out[2] = s.sleep[start:end]
        out[3] = s.missing_steps[start:end]
        out[4] = s.missing_hr[start:end]
        out[5] = s.missing_sleep[start:end]
        return out

    def key(self) -> tuple[str, date]:
        return (self.participant_id, self.target_day)


def extract_window(series: ParticipantSeries, labels: DailyLabels | None, target_day: date,
                   task: str | None, labeled: bool = True) -> Window | None:
    """Build the 4-day window ending right before target_day.

    Returns None when there is not enough history, or (for labeled
    extraction) when the task label is absent that day.
    """
    day_index = (target_day - series.start_day).days
    if day_index < WINDOW_DAYS or day_index >= series.n_days:
        return None
    label: bool | None = None
    if labeled:
        if labels is None or task is None:
            raise ValidationError("labeled extraction requires labels and a task")
        label = labels.task_label(task, day_index)
        if label is None:
            return None
    return Window(series.participant_id, target_day, label, series)


@dataclass(frozen=True)
class SplitSpec:
    """Temporal split: train strictly before boundary_day, test from it on;
    a seeded fraction of test-period users is held out for tuning."""

    boundary_day: date
    tuning_fraction: float = 0.10
    seed: int = 0

    def validate(self, dataset: Dataset) -> None:
        idx = dataset.day_index(self.boundary_day)
        if idx <= 0 or idx >= dataset.n_days:
            raise ValidationError(
                f"boundary {self.boundary_day} outside study period "
                f"{dataset.start_day}..{dataset.day_of(dataset.n_days - 1)}")
        if not 0.0 <= self.tuning_fraction < 1.0:
            raise ValidationError(f"tuning_fraction {self.tuning_fraction} outside [0,1)")


@dataclass
class SplitResult:
    train: list[Window]
    tuning: list[Window]
    test: list[Window]
    boundary_day: date
    tuning_users: list[str]
    test_users: list[str]  # test-period users not used for tuning


def default_boundary(dataset: Dataset) -> date:
    """Study midpoint; the paper-style "first half train, second half test"."""
    return dataset.day_of(dataset.n_days // 2)


def temporal_split(dataset: Dataset, spec: SplitSpec, task: str) -> SplitResult:
    """Assign labeled windows to train/tuning/test.

    Train: every labeled window with target_day < boundary. The tuning set is
    a seeded random tuning_fraction of test-period users (all their
    test-period windows); remaining test-period users form the test set, so
    tuning and test never share a participant.
    """
    spec.validate(dataset)
    boundary_idx = dataset.day_index(spec.boundary_day)

    train: list[Window] = []
    by_user_test: dict[str, list[Window]] = {}
    for pid in dataset.participants():
        series = dataset.series[pid]
        labels = dataset.labels.get(pid)
        if labels is None:
            continue
        for day_index in range(WINDOW_DAYS, dataset.n_days):
            w = extract_window(series, labels, dataset.day_of(day_index), task)
            if w is None:
                continue
            if day_index < boundary_idx:
                train.append(w)
            else:
                by_user_test.setdefault(pid, []).append(w)

    test_period_users = sorted(by_user_test)
    n_tuning = int(round(spec.tuning_fraction * len(test_period_users)))
    rng = np.random.default_rng(spec.seed)
    tuning_users = sorted(rng.choice(test_period_users, size=n_tuning, replace=False).tolist()) \
        if n_tuning else []
    tuning_set = set(tuning_users)
    tuning = [w for u in tuning_users for w in by_user_test[u]]
    test_users = [u for u in test_period_users if u not in tuning_set]
    test = [w for u in test_users for w in by_user_test[u]]

    if not train or not test:
        raise ValidationError(
            f"temporal split at {spec.boundary_day} leaves an empty side "
            f"(train={len(train)}, test={len(test)})")
    return SplitResult(train, tuning, test, spec.boundary_day, tuning_users, test_users)


def select_finetune_cohort(test_users: Sequence[str], k: int, seed: int) -> tuple[list[str], list[str]]:
    """Uniformly pick k users without replacement; the rest are the holdout."""
    users = sorted(test_users)
    if k < 0 or k >= len(users):
        raise ValidationError(f"cannot select {k} finetune users from {len(users)}")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(users, size=k, replace=False).tolist())
    chosen_set = set(chosen)
    holdout = [u for u in users if u not in chosen_set]
    return chosen, holdout


def assert_windows_in_period(windows: Iterable[Window], lo: date, hi: date, context: str) -> None:
    """Leakage guard: every window's target day must satisfy lo <= day < hi."""
    for w in windows:
        if not (lo <= w.target_day < hi):
            raise LeakageError(
                f"{context}: window for {w.participant_id} targets {w.target_day}, "
                f"outside [{lo}, {hi})")


# ---------------------------------------------------------------------------
# input transform: resolution reduction + train-split normalization
# ---------------------------------------------------------------------------

@dataclass
class InputTransform:
    """Downsample minute channels into fixed bins and optionally standardize
    the value channels with constants fitted on the train split.

    Binning: steps are summed over present minutes, heart rate and sleep are
    averaged over present minutes, and each missing channel becomes the
    missing fraction of its bin. A value bin is zero whenever its missing
    fraction is 1, preserving the zero-fill rule at the new resolution.
    """

    resolution_minutes: int = 1
    channel_shift: np.ndarray | None = None  # (3,) for the value channels
    channel_scale: np.ndarray | None = None

    def __post_init__(self):
        if WINDOW_MINUTES % self.resolution_minutes != 0:
            raise ValidationError(
                f"resolution {self.resolution_minutes} must divide {WINDOW_MINUTES}")

    @property
    def output_length(self) -> int:
        return WINDOW_MINUTES // self.resolution_minutes

    def apply(self, channels: np.ndarray) -> np.ndarray:
        x = downsample_channels(channels, self.resolution_minutes)
        if self.channel_shift is not None:
            present = x[3:6] < 1.0
            vals = (x[0:3] - self.channel_shift[:, None]) / self.channel_scale[:, None]
            x[0:3] = np.where(present, vals, 0.0)
        return x

    def apply_many(self, windows: Sequence[Window]) -> np.ndarray:
        return np.stack([self.apply(w.channels()) for w in windows])

    def to_dict(self) -> dict:
        return {
            "resolution_minutes": self.resolution_minutes,
            "channel_shift": None if self.channel_shift is None else self.channel_shift.tolist(),
            "channel_scale": None if self.channel_scale is None else self.channel_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InputTransform":
        shift = d.get("channel_shift")
        scale = d.get("channel_scale")
        return cls(
            resolution_minutes=int(d["resolution_minutes"]),
            channel_shift=None if shift is None else np.asarray(shift, dtype=np.float64),
            channel_scale=None if scale is None else np.asarray(scale, dtype=np.float64),
        )


def downsample_channels(channels: np.ndarray, resolution_minutes: int) -> np.ndarray:
    """(6, 5760) minute matrix -> (6, 5760/res) bin matrix."""
    if resolution_minutes == 1:
        return channels.astype(np.float64, copy=True)
    r = resolution_minutes
    n_bins = channels.shape[1] // r
    binned = channels.reshape(6, n_bins, r)
    out = np.empty((6, n_bins), dtype=np.float64)
    present = 1.0 - binned[3:6]
    n_present = present.sum(axis=2)
    safe = np.maximum(n_present, 1.0)
    out[0] = binned[0].sum(axis=1)                  # steps: sum of present (absent are 0)
    out[1] = binned[1].sum(axis=1) / safe[1]        # heart rate: mean of present
    out[2] = binned[2].sum(axis=1) / safe[2]        # sleep: mean of present
    out[3:6] = binned[3:6].mean(axis=2)             # missing fraction per bin
    return out


def fit_transform(windows: Sequence[Window], resolution_minutes: int, normalize: bool,
                  max_sample: int = 512, seed: int = 0) -> InputTransform:
    """Fit normalization constants on (a sample of) the train windows only."""
    t = InputTransform(resolution_minutes=resolution_minutes)
    if not normalize:
        return t
    if not windows:
        raise ValidationError("cannot fit normalization on an empty window set")
    idx = np.arange(len(windows))
    if len(windows) > max_sample:
        idx = np.random.default_rng(seed).choice(idx, size=max_sample, replace=False)
    shift = np.zeros(3)
    scale = np.ones(3)
    sums = np.zeros(3)
    sq = np.zeros(3)
    count = np.zeros(3)
    for i in idx:
        x = downsample_channels(windows[int(i)].channels(), resolution_minutes)
        present = x[3:6] < 1.0
        for c in range(3):
            vals = x[c][present[c]]
            sums[c] += vals.sum()
            sq[c] += (vals * vals).sum()
            count[c] += vals.size
    nonzero = count > 0
    shift[nonzero] = sums[nonzero] / count[nonzero]
    var = np.zeros(3)
    var[nonzero] = sq[nonzero] / count[nonzero] - shift[nonzero] ** 2
    scale = np.sqrt(np.maximum(var, 0.0))
    scale = np.maximum(scale, 1e-6)
    return InputTransform(resolution_minutes=resolution_minutes,
                          channel_shift=shift, channel_scale=scale)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _parse_timestamp(text: str, line: int) -> datetime:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(t)
    except ValueError as exc:
        raise DataFormatError(f"bad timestamp {text!r}: {exc}", line)
    if ts.second or ts.microsecond:
        raise DataFormatError(f"timestamp {text!r} not at minute resolution", line)
    return ts.replace(tzinfo=None)


def _parse_date(text: str, line: int) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataFormatError(f"bad date {text!r}: {exc}", line)


def _fmt_minute(day0: date, minute: int) -> str:
    ts = datetime.combine(day0, datetime.min.time()) + timedelta(minutes=minute)
    return ts.strftime("%Y-%m-%dT%H:%M:00Z")


@dataclass
class _RawRow:
    pid: str
    ts: datetime
    steps: float | None
    hr: float | None
    sleep: int | None
    line: int


def _iter_sensor_rows(path: Path) -> Iterator[_RawRow]:
    if path.suffix == ".jsonl":
        with open(path) as f:
            for line_no, raw in enumerate(f, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    rec = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"bad JSON: {exc}", line_no)
                yield _parse_sensor_record(
                    rec.get("participant_id"), rec.get("timestamp_utc"),
                    rec.get("steps"), rec.get("heart_rate"), rec.get("sleep"), line_no)
    else:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != SENSOR_HEADER:
                raise DataFormatError(f"sensor header {header} != {SENSOR_HEADER}", 1)
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 5:
                    raise DataFormatError(f"expected 5 fields, got {len(row)}", line_no)
                pid, ts, steps, hr, sleep = row
                yield _parse_sensor_record(
                    pid, ts,
                    steps if steps != "" else None,
                    hr if hr != "" else None,
                    sleep if sleep != "" else None, line_no)


def _parse_sensor_record(pid, ts, steps, hr, sleep, line_no: int) -> _RawRow:
    if not pid or ts is None:
        raise DataFormatError("missing participant_id or timestamp_utc", line_no)
    when = _parse_timestamp(str(ts), line_no)
    try:
        steps_v = None if steps is None else float(steps)
        hr_v = None if hr is None else float(hr)
        sleep_v = None if sleep is None else int(float(sleep))
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"bad sensor value: {exc}", line_no)
    if steps_v is not None and steps_v < 0:
        raise DataFormatError(f"negative steps {steps_v}", line_no)
    if hr_v is not None and hr_v < 0:
        raise DataFormatError(f"negative heart rate {hr_v}", line_no)
    if sleep_v is not None and sleep_v not in (0, 1):
        raise DataFormatError(f"sleep flag {sleep_v} outside {{0,1}}", line_no)
    return _RawRow(str(pid), when, steps_v, hr_v, sleep_v, line_no)


def _iter_label_rows(path: Path) -> Iterator[tuple[str, date, dict[str, int | None], int]]:
    def parse_flag(value, line_no: int, name: str) -> int | None:
        if value in (None, ""):
            return None
        try:
            v = int(float(value))
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"bad {name} value {value!r}: {exc}", line_no)
        if v not in (0, 1):
            raise DataFormatError(f"{name} value {v} outside {{0,1}}", line_no)
        return v

    if path.suffix == ".jsonl":
        with open(path) as f:
            for line_no, raw in enumerate(f, start=1):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    rec = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"bad JSON: {exc}", line_no)
                pid = rec.get("participant_id")
                if not pid or rec.get("date") is None:
                    raise DataFormatError("missing participant_id or date", line_no)
                day = _parse_date(str(rec["date"]), line_no)
                flags = {k: parse_flag(rec.get(k), line_no, k) for k in _LABEL_FIELDS}
                yield str(pid), day, flags, line_no
    else:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != LABEL_HEADER:
                raise DataFormatError(f"label header {header} != {LABEL_HEADER}", 1)
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 6:
                    raise DataFormatError(f"expected 6 fields, got {len(row)}", line_no)
                pid, day_s, sym, kit, pos, fat = row
                if not pid:
                    raise DataFormatError("missing participant_id", line_no)
                day = _parse_date(day_s, line_no)
                flags = {
                    "flu_symptoms": parse_flag(sym, line_no, "flu_symptoms"),
                    "kit_trigger": parse_flag(kit, line_no, "kit_trigger"),
                    "flu_positive": parse_flag(pos, line_no, "flu_positive"),
                    "fatigue": parse_flag(fat, line_no, "fatigue"),
                }
                yield pid, day, flags, line_no


def _resolve_paths(path: str | Path, labels_path: str | Path | None) -> tuple[Path, Path]:
    p = Path(path)
    if p.is_dir():
        for ext in (".csv", ".jsonl"):
            sensors = p / f"sensors{ext}"
            labels = p / f"labels{ext}"
            if sensors.exists() and labels.exists():
                return sensors, labels
        raise ValidationError(f"no sensors.csv/labels.csv or .jsonl pair under {p}")
    if labels_path is None:
        raise ValidationError("labels_path required when loading from explicit sensor file")
    return p, Path(labels_path)


def load_dataset(path: str | Path, labels_path: str | Path | None = None) -> Dataset:
    """Load sensor + label files (csv or jsonl) into a validated Dataset.

    ``path`` may be a directory holding sensors.csv/labels.csv (or .jsonl).
    Minutes with no row at all are encoded as missing across all streams.
    """
    sensors_file, labels_file = _resolve_paths(path, labels_path)

    per_pid: dict[str, list[_RawRow]] = {}
    min_day: date | None = None
    max_day: date | None = None
    for row in _iter_sensor_rows(sensors_file):
        rows = per_pid.setdefault(row.pid, [])
        if rows:
            prev = rows[-1]
            if row.ts == prev.ts:
                raise DataFormatError(
                    f"duplicate minute {row.ts.isoformat()}Z for participant {row.pid}", row.line)
            if row.ts < prev.ts:
                raise DataFormatError(
                    f"non-monotonic timestamp {row.ts.isoformat()}Z for participant {row.pid}",
                    row.line)
        rows.append(row)
        d = row.ts.date()
        min_day = d if min_day is None or d < min_day else min_day
        max_day = d if max_day is None or d > max_day else max_day
    if not per_pid:
        raise ValidationError(f"no sensor rows in {sensors_file}")

    label_rows = list(_iter_label_rows(labels_file))
    for pid, day, _flags, line_no in label_rows:
        if pid not in per_pid:
            raise DataFormatError(f"labels reference unknown participant {pid!r}", line_no)
        min_day = day if day < min_day else min_day
        max_day = day if day > max_day else max_day

    start_day = min_day
    n_days = (max_day - min_day).days + 1
    n_minutes = n_days * MINUTES_PER_DAY

    series: dict[str, ParticipantSeries] = {}
    for pid, rows in per_pid.items():
        steps = np.zeros(n_minutes, dtype=np.float32)
        hr = np.zeros(n_minutes, dtype=np.float32)
        sleep = np.zeros(n_minutes, dtype=np.uint8)
        m_steps = np.ones(n_minutes, dtype=np.uint8)
        m_hr = np.ones(n_minutes, dtype=np.uint8)
        m_sleep = np.ones(n_minutes, dtype=np.uint8)
        base = datetime.combine(start_day, datetime.min.time())
        for row in rows:
            minute = int((row.ts - base).total_seconds() // 60)
            if row.steps is not None:
                steps[minute] = row.steps
                m_steps[minute] = 0
            if row.hr is not None:
                hr[minute] = row.hr
                m_hr[minute] = 0
            if row.sleep is not None:
                sleep[minute] = row.sleep
                m_sleep[minute] = 0
        series[pid] = ParticipantSeries(pid, start_day, n_days, steps, hr, sleep,
                                        m_steps, m_hr, m_sleep)

    labels: dict[str, DailyLabels] = {}
    seen_days: set[tuple[str, date]] = set()
    for pid, day, flags, line_no in label_rows:
        key = (pid, day)
        if key in seen_days:
            raise DataFormatError(f"overlapping day record for {pid} on {day}", line_no)
        seen_days.add(key)
        lab = labels.get(pid)
        if lab is None:
            lab = DailyLabels.empty(pid, start_day, n_days)
            labels[pid] = lab
        idx = (day - start_day).days
        for name in _LABEL_FIELDS:
            v = flags[name]
            if v is not None:
                getattr(lab, name)[idx] = v

    dataset = Dataset(start_day, n_days, series, labels)
    dataset.validate()
    return dataset


def _sensor_row_values(s: ParticipantSeries, minute: int) -> tuple[str, str, str] | None:
    ms, mh, msl = s.missing_steps[minute], s.missing_hr[minute], s.missing_sleep[minute]
    if ms and mh and msl:
        return None  # fully missing minute: no row at all
    steps = "" if ms else str(int(s.steps[minute]))
    hr = "" if mh else str(s.heart_rate[minute])
    sleep = "" if msl else str(int(s.sleep[minute]))
    return steps, hr, sleep


def write_sensor_file(dataset_or_series: "Dataset | Iterable[ParticipantSeries]",
                      path: str | Path, fmt: str = "csv") -> None:
    if isinstance(dataset_or_series, Dataset):
        all_series: Iterable[ParticipantSeries] = (
            dataset_or_series.series[p] for p in dataset_or_series.participants())
    else:
        all_series = dataset_or_series
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f) if fmt == "csv" else None
        if writer is not None:
            writer.writerow(SENSOR_HEADER)
        for s in all_series:
            for minute in range(s.n_minutes()):
                vals = _sensor_row_values(s, minute)
                if vals is None:
                    continue
                ts = _fmt_minute(s.start_day, minute)
                if writer is not None:
                    writer.writerow([s.participant_id, ts, *vals])
                else:
                    steps, hr, sleep = vals
                    rec = {"participant_id": s.participant_id, "timestamp_utc": ts,
                           "steps": None if steps == "" else int(steps),
                           "heart_rate": None if hr == "" else float(hr),
                           "sleep": None if sleep == "" else int(sleep)}
                    f.write(json.dumps(rec) + "\n")


def write_label_file(dataset_or_labels: "Dataset | Iterable[DailyLabels]",
                     path: str | Path, fmt: str = "csv") -> None:
    if isinstance(dataset_or_labels, Dataset):
        all_labels: Iterable[DailyLabels] = (
            dataset_or_labels.labels[p] for p in sorted(dataset_or_labels.labels))
    else:
        all_labels = dataset_or_labels
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f) if fmt == "csv" else None
        if writer is not None:
            writer.writerow(LABEL_HEADER)
        for lab in all_labels:
            for d in range(lab.n_days):
                raw = {name: int(getattr(lab, name)[d]) for name in _LABEL_FIELDS}
                if all(v == -1 for v in raw.values()):
                    continue
                day = (lab.start_day + timedelta(days=d)).isoformat()
                if writer is not None:
                    writer.writerow([lab.participant_id, day] +
                                    ["" if raw[n] == -1 else str(raw[n]) for n in _LABEL_FIELDS])
                else:
                    rec: dict = {"participant_id": lab.participant_id, "date": day}
                    rec.update({n: (None if raw[n] == -1 else raw[n]) for n in _LABEL_FIELDS})
                    f.write(json.dumps(rec) + "\n")


def write_dataset(dataset: Dataset, out_dir: str | Path, fmt: str = "csv") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if fmt == "csv" else ".jsonl"
    sensors = out / f"sensors{ext}"
    labels = out / f"labels{ext}"
    write_sensor_file(dataset, sensors, fmt)
    write_label_file(dataset, labels, fmt)
    return sensors, labels
