"""Synthetic cohort generator with planted illness signal, realistic
missingness, and configurable class imbalance.

Every distributional choice here is invented (circadian sleep block, Gaussian
heart-rate noise, Poisson step bursts); the generator exists to provide
ground-truth signal for verification, not physiological realism. Defaults are
calibrated so that a 983-participant, 120-day cohort lands near 118k enrolled
user-days, the median participant supplies ~114 of 120 days, and positive
kit-trigger days run near 1 in 500.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from datetime import date, timedelta
from typing import Iterator

import numpy as np

from .data import DailyLabels, Dataset, ParticipantSeries, MINUTES_PER_DAY
from .errors import ValidationError

_MINUTE_GRID = np.arange(MINUTES_PER_DAY, dtype=np.float64)
# diurnal activity propensity: morning ramp, midday and evening bumps
_DIURNAL = (0.55
            + 0.85 * np.exp(-0.5 * ((_MINUTE_GRID - 730.0) / 220.0) ** 2)
            + 0.55 * np.exp(-0.5 * ((_MINUTE_GRID - 1085.0) / 160.0) ** 2))


@dataclass(frozen=True)
class EffectSizes:
    """Planted physiological shifts on episode days, scaled by severity."""

    resting_hr_delta_bpm: float = 8.0
    step_suppression_ratio: float = 0.4
    extra_sleep_minutes: float = 60.0


@dataclass(frozen=True)
class CohortConfig:
    n_participants: int = 50
    n_days: int = 60
    start_day: date = date(2024, 1, 1)
    symptom_prevalence: float = 0.004      # target marginal P(flu_symptoms) per user-day
    positive_given_trigger: float = 0.5
    effect_sizes: EffectSizes = field(default_factory=EffectSizes)
    missing_minute_rate: float = 0.02
    missing_day_rate: float = 0.05
    label_missing_rate: float = 0.15   # skipped daily surveys (all labels absent)
    long_range_mode: bool = False
    seed: int = 0
    # generator internals, exposed so tests can pin them
    trigger_given_symptom: float = 0.5
    fatigue_false_positive_rate: float = 0.05
    episode_duration_range: tuple[int, int] = (5, 9)
    episode_severity_range: tuple[float, float] = (0.4, 1.0)
    symptom_severity_threshold: float = 0.5
    episode_cooldown_days: int = 10
    # long-range pattern: label on day d needs an HR marker on day d-4 AND a
    # sleep marker on day d-1, rewarding position-aware sequence models
    long_range_marker_prob: float = 0.35
    long_range_hr_bonus_bpm: float = 12.0
    long_range_hr_block_minutes: int = 180
    long_range_extra_sleep_minutes: float = 90.0

    def validate(self) -> None:
        if self.n_participants < 1 or self.n_days < 1:
            raise ValidationError("n_participants and n_days must be >= 1")
        probs = {
            "symptom_prevalence": self.symptom_prevalence,
            "positive_given_trigger": self.positive_given_trigger,
            "missing_minute_rate": self.missing_minute_rate,
            "missing_day_rate": self.missing_day_rate,
            "label_missing_rate": self.label_missing_rate,
            "trigger_given_symptom": self.trigger_given_symptom,
            "fatigue_false_positive_rate": self.fatigue_false_positive_rate,
            "long_range_marker_prob": self.long_range_marker_prob,
        }
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}={p} outside [0,1]")
        if not 0.0 <= self.effect_sizes.step_suppression_ratio <= 1.0:
            raise ValidationError("step_suppression_ratio outside [0,1]")
        lo, hi = self.episode_severity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValidationError(f"episode_severity_range {self.episode_severity_range} invalid")
        if self.episode_duration_range[0] < 1 or self.episode_duration_range[0] > self.episode_duration_range[1]:
            raise ValidationError(f"episode_duration_range {self.episode_duration_range} invalid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_day"] = self.start_day.isoformat()
        d["episode_duration_range"] = list(self.episode_duration_range)
        d["episode_severity_range"] = list(self.episode_severity_range)
        return d


@dataclass(frozen=True)
class IllnessEpisode:
    participant_id: str
    onset_day: date
    duration_days: int
    severity: float

    def day_indices(self, start_day: date) -> range:
        first = (self.onset_day - start_day).days
        return range(first, first + self.duration_days)


@dataclass
class ParticipantTruth:
    """Generator-side ground truth for one participant."""

    episodes: list[IllnessEpisode]
    hr_marker_days: np.ndarray     # bool (n_days,)
    sleep_marker_days: np.ndarray


def _expected_symptom_days_per_episode(config: CohortConfig) -> float:
    lo, hi = config.episode_severity_range
    thr = config.symptom_severity_threshold
    if hi <= lo:
        p_sym = 1.0 if lo >= thr else 0.0
    else:
        p_sym = max(0.0, (hi - max(lo, thr))) / (hi - lo)
    mean_duration = 0.5 * (config.episode_duration_range[0] + config.episode_duration_range[1])
    return mean_duration * p_sym


def _onset_rate(config: CohortConfig) -> float:
    expected = _expected_symptom_days_per_episode(config)
    if expected <= 0.0 or config.symptom_prevalence <= 0.0:
        return 0.0
    return min(0.5, config.symptom_prevalence / expected)


def _generate_participant(config: CohortConfig, index: int
                          ) -> tuple[ParticipantSeries, DailyLabels, ParticipantTruth]:
    rng = np.random.default_rng([config.seed, 7919, index])
    pid = f"p{index:04d}"
    n_days = config.n_days
    eff = config.effect_sizes

    # stable personal traits
    rhr = rng.normal(62.0, 4.0)
    wake_base = rng.normal(420.0, 25.0)
    bed_base = rng.normal(1380.0, 20.0)
    step_rate = max(8.0, rng.normal(30.0, 6.0))
    activity_prob = rng.uniform(0.18, 0.32)

    # illness episodes (non-overlapping, with a cooldown gap)
    onset_rate = _onset_rate(config)
    onset_draws = rng.random(n_days)
    severity_by_day = np.zeros(n_days)
    episodes: list[IllnessEpisode] = []
    blocked_until = 0
    for d in range(n_days):
        if d < blocked_until:
            continue
        if onset_draws[d] < onset_rate:
            duration = int(rng.integers(config.episode_duration_range[0],
                                        config.episode_duration_range[1] + 1))
            severity = float(rng.uniform(*config.episode_severity_range))
            end = min(n_days, d + duration)
            severity_by_day[d:end] = severity
            episodes.append(IllnessEpisode(pid, config.start_day + timedelta(days=d),
                                           duration, severity))
            blocked_until = d + duration + config.episode_cooldown_days

    # long-range markers (drawn even when the mode is off, to keep the RNG
    # stream layout identical; they only shape data/labels when enabled)
    hr_marker = rng.random(n_days) < config.long_range_marker_prob
    sleep_marker = rng.random(n_days) < config.long_range_marker_prob
    hr_block_starts = rng.integers(500, 1080 - config.long_range_hr_block_minutes, size=n_days)
    if not config.long_range_mode:
        hr_marker = np.zeros(n_days, dtype=bool)
        sleep_marker = np.zeros(n_days, dtype=bool)

    # daily sleep schedule
    wake = wake_base + rng.normal(0.0, 15.0, size=n_days) \
        + severity_by_day * eff.extra_sleep_minutes \
        + sleep_marker * config.long_range_extra_sleep_minutes
    wake = np.clip(wake, 240.0, 900.0)
    bed = np.clip(bed_base + rng.normal(0.0, 15.0, size=n_days), 1140.0, 1439.0)
    minute = _MINUTE_GRID[None, :]
    asleep = (minute < wake[:, None]) | (minute >= bed[:, None])

    # steps: Poisson bursts on active awake minutes, suppressed during episodes
    active = rng.random((n_days, MINUTES_PER_DAY)) < activity_prob * _DIURNAL[None, :]
    suppression = 1.0 - severity_by_day * eff.step_suppression_ratio
    lam = np.broadcast_to((step_rate * suppression)[:, None], (n_days, MINUTES_PER_DAY))
    steps = rng.poisson(lam)
    steps = np.where(asleep | ~active, 0, steps).astype(np.float64)

    # heart rate: personal baseline, sleep dip, activity coupling, planted shifts
    hr = np.where(asleep, rhr - 8.0, rhr + 5.0)
    hr = hr + severity_by_day[:, None] * eff.resting_hr_delta_bpm
    if config.long_range_mode:
        block = (minute >= hr_block_starts[:, None]) \
            & (minute < (hr_block_starts + config.long_range_hr_block_minutes)[:, None])
        hr = hr + (hr_marker[:, None] & block & ~asleep) * config.long_range_hr_bonus_bpm
    hr = hr + 0.3 * np.minimum(steps, 150.0)
    hr = hr + rng.normal(0.0, 3.0, size=(n_days, MINUTES_PER_DAY))
    hr = np.round(np.maximum(hr, 35.0), 1)

    # missingness: whole days, then per-minute per-stream dropouts
    day_missing = rng.random(n_days) < config.missing_day_rate
    miss_steps = rng.random((n_days, MINUTES_PER_DAY)) < config.missing_minute_rate
    miss_hr = rng.random((n_days, MINUTES_PER_DAY)) < config.missing_minute_rate
    miss_sleep = rng.random((n_days, MINUTES_PER_DAY)) < config.missing_minute_rate
    miss_steps |= day_missing[:, None]
    miss_hr |= day_missing[:, None]
    miss_sleep |= day_missing[:, None]

    steps = np.where(miss_steps, 0.0, steps)
    hr = np.where(miss_hr, 0.0, hr)
    sleep = np.where(miss_sleep, 0, asleep.astype(np.uint8))

    series = ParticipantSeries(
        participant_id=pid, start_day=config.start_day, n_days=n_days,
        steps=steps.reshape(-1).astype(np.float32),
        heart_rate=hr.reshape(-1).astype(np.float32),
        sleep=sleep.reshape(-1).astype(np.uint8),
        missing_steps=miss_steps.reshape(-1).astype(np.uint8),
        missing_hr=miss_hr.reshape(-1).astype(np.uint8),
        missing_sleep=miss_sleep.reshape(-1).astype(np.uint8),
    )

    # labels
    episode_symptoms = severity_by_day >= config.symptom_severity_threshold
    pattern = np.zeros(n_days, dtype=bool)
    if config.long_range_mode:
        pattern[4:] = hr_marker[:-4] & sleep_marker[3:-1]
    flu_symptoms = episode_symptoms | pattern
    kit = flu_symptoms & (rng.random(n_days) < config.trigger_given_symptom)
    positive = kit & (rng.random(n_days) < config.positive_given_trigger)
    fatigue = flu_symptoms | (rng.random(n_days) < config.fatigue_false_positive_rate)
    surveyed = rng.random(n_days) >= config.label_missing_rate

    labels = DailyLabels(
        participant_id=pid, start_day=config.start_day, n_days=n_days,
        flu_symptoms=np.where(surveyed, flu_symptoms, -1).astype(np.int8),
        kit_trigger=np.where(surveyed, kit, -1).astype(np.int8),
        flu_positive=np.where(surveyed & kit, positive, -1).astype(np.int8),
        fatigue=np.where(surveyed, fatigue, -1).astype(np.int8),
    )
    truth = ParticipantTruth(episodes, hr_marker, sleep_marker)
    return series, labels, truth


def iter_cohort(config: CohortConfig
                ) -> Iterator[tuple[ParticipantSeries, DailyLabels, ParticipantTruth]]:
    """Stream participants one at a time (constant memory at any cohort size).

    Each participant draws from its own seed stream derived from
    (config.seed, index), so parallel or partial generation reproduces the
    sequential output exactly.
    """
    config.validate()
    for index in range(config.n_participants):
        yield _generate_participant(config, index)


@dataclass
class GroundTruth:
    episodes: list[IllnessEpisode]
    hr_marker_days: dict[str, list[int]]
    sleep_marker_days: dict[str, list[int]]

    def to_dict(self) -> dict:
        return {
            "episodes": [
                {"participant_id": e.participant_id, "onset_day": e.onset_day.isoformat(),
                 "duration_days": e.duration_days, "severity": e.severity}
                for e in self.episodes
            ],
            "hr_marker_days": self.hr_marker_days,
            "sleep_marker_days": self.sleep_marker_days,
        }


def generate_cohort(config: CohortConfig) -> tuple[Dataset, GroundTruth]:
    series: dict[str, ParticipantSeries] = {}
    labels: dict[str, DailyLabels] = {}
    episodes: list[IllnessEpisode] = []
    hr_days: dict[str, list[int]] = {}
    sleep_days: dict[str, list[int]] = {}
    for s, lab, truth in iter_cohort(config):
        series[s.participant_id] = s
        labels[s.participant_id] = lab
        episodes.extend(truth.episodes)
        if config.long_range_mode:
            hr_days[s.participant_id] = np.flatnonzero(truth.hr_marker_days).tolist()
            sleep_days[s.participant_id] = np.flatnonzero(truth.sleep_marker_days).tolist()
    dataset = Dataset(config.start_day, config.n_days, series, labels)
    dataset.validate()
    return dataset, GroundTruth(episodes, hr_days, sleep_days)


def cohort_summary(dataset: Dataset) -> dict:
    present_per_participant = [
        sum(s.day_present(d) for d in range(s.n_days)) for s in dataset.series.values()
    ]
    n_days_labeled = 0
    rates = {}
    for task, attr in (("flu_symptoms", "flu_symptoms"), ("kit_trigger", "kit_trigger"),
                       ("fatigue", "fatigue")):
        pos = 0
        labeled = 0
        for lab in dataset.labels.values():
            arr = getattr(lab, attr)
            labeled += int((arr != -1).sum())
            pos += int((arr == 1).sum())
        rates[task] = pos / labeled if labeled else 0.0
        n_days_labeled = max(n_days_labeled, labeled)
    pos_swabs = sum(int((lab.flu_positive == 1).sum()) for lab in dataset.labels.values())
    return {
        "participants": len(dataset.series),
        "study_days": dataset.n_days,
        "user_days_total": dataset.user_days_total(),
        "user_days_present": dataset.user_days_present(),
        "median_present_days": float(np.median(present_per_participant)) if present_per_participant else 0.0,
        "labeled_user_days": n_days_labeled,
        "prevalence": rates,
        "positive_swab_days": pos_swabs,
    }


@dataclass
class EffectReport:
    hr_delta_measured: float
    hr_delta_expected: float
    step_ratio_measured: float
    step_ratio_expected: float
    n_episode_days: int
    n_clean_days: int

    def check(self, hr_tolerance_bpm: float = 1.0, step_tolerance: float = 0.10) -> None:
        if abs(self.hr_delta_measured - self.hr_delta_expected) > hr_tolerance_bpm:
            raise ValidationError(
                f"planted HR delta {self.hr_delta_expected:.2f} bpm, measured "
                f"{self.hr_delta_measured:.2f} (tolerance {hr_tolerance_bpm})")
        if abs(self.step_ratio_measured - self.step_ratio_expected) > step_tolerance:
            raise ValidationError(
                f"planted step ratio {self.step_ratio_expected:.3f}, measured "
                f"{self.step_ratio_measured:.3f} (tolerance {step_tolerance})")


def verify_planted_signal(dataset: Dataset, episodes: list[IllnessEpisode],
                          config: CohortConfig) -> EffectReport:
    """Measure the realized effect sizes against the configured ones.

    Resting HR is averaged over awake, non-moving, fully recorded minutes.
    The expected step ratio assumes extra_sleep_minutes = 0 (extra sleep also
    reduces stepping time, which this estimate deliberately ignores).
    """
    eff = config.effect_sizes
    episode_days: dict[str, set[int]] = {}
    severity_sum = 0.0
    severity_n = 0
    for e in episodes:
        days = episode_days.setdefault(e.participant_id, set())
        for d in e.day_indices(dataset.start_day):
            if 0 <= d < dataset.n_days:
                days.add(d)
                severity_sum += e.severity
                severity_n += 1
    mean_severity = severity_sum / severity_n if severity_n else 0.0

    hr_deltas = []
    step_ratios = []
    n_ep = 0
    n_clean = 0
    for pid, series in dataset.series.items():
        ep = episode_days.get(pid, set())
        daily_rest = np.full(series.n_days, np.nan)
        daily_steps = np.full(series.n_days, np.nan)
        for d in range(series.n_days):
            sl = series.day_slice(d)
            ok = ((series.missing_hr[sl] == 0) & (series.missing_steps[sl] == 0)
                  & (series.missing_sleep[sl] == 0)
                  & (series.steps[sl] == 0) & (series.sleep[sl] == 0))
            if ok.any():
                daily_rest[d] = series.heart_rate[sl][ok].mean()
            present = series.missing_steps[sl] == 0
            if present.any():
                daily_steps[d] = series.steps[sl][present].sum()
        is_ep = np.zeros(series.n_days, dtype=bool)
        for d in ep:
            is_ep[d] = True
        ok_rest = ~np.isnan(daily_rest)
        ok_steps = ~np.isnan(daily_steps)
        if (is_ep & ok_rest).any() and (~is_ep & ok_rest).any():
            hr_deltas.append(daily_rest[is_ep & ok_rest].mean()
                             - daily_rest[~is_ep & ok_rest].mean())
        base = daily_steps[~is_ep & ok_steps]
        sick = daily_steps[is_ep & ok_steps]
        if sick.size and base.size and base.mean() > 0:
            step_ratios.append(sick.mean() / base.mean())
        n_ep += int(is_ep.sum())
        n_clean += int((~is_ep).sum())

    return EffectReport(
        hr_delta_measured=float(np.mean(hr_deltas)) if hr_deltas else 0.0,
        hr_delta_expected=mean_severity * eff.resting_hr_delta_bpm,
        step_ratio_measured=float(np.mean(step_ratios)) if step_ratios else 1.0,
        step_ratio_expected=1.0 - mean_severity * eff.step_suppression_ratio,
        n_episode_days=n_ep,
        n_clean_days=n_clean,
    )
