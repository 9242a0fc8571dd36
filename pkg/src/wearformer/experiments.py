"""Reproducible desk-scale experiments used by the acceptance suite and the
scripts in scripts/.

Each experiment generates a seeded synthetic cohort, trains at a reduced
input resolution (recorded in the returned manifest), and reports holdout
ROC AUC on the paper-style temporal protocol: train on the first half of the
study, predict every labeled participant-day of the second half.
"""

from __future__ import annotations

import json
from dataclasses import replace
from datetime import timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import GBDTConfig, GBDTScorer, train_gbdt_baseline
from .data import (Dataset, SplitSpec, select_finetune_cohort, temporal_split)
from .evaluation import evaluate_model, roc_auc
from .features import windows_to_feature_windows
from .model import ModelConfig, init_params
from .synth import CohortConfig, EffectSizes, generate_cohort
from .training import (NeuralScorer, TrainConfig, finetune, prepare_model, train)

LOG = print


def _manifest(name: str, **entries) -> dict:
    return {"experiment": name, "package_version": __version__,
            "numpy_version": np.__version__, **entries}


def write_manifest(manifest: dict, out_dir: str | Path | None) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def strong_effect_cohort(n_participants: int = 200, n_days: int = 120, seed: int = 0
                         ) -> CohortConfig:
    """Episode-driven cohort with effects far above sensor noise."""
    return CohortConfig(
        n_participants=n_participants, n_days=n_days, seed=seed,
        symptom_prevalence=0.03,
        effect_sizes=EffectSizes(resting_hr_delta_bpm=15.0,
                                 step_suppression_ratio=0.5,
                                 extra_sleep_minutes=90.0),
        episode_severity_range=(0.7, 1.0),
    )


def long_range_cohort(n_participants: int, n_days: int = 120, seed: int = 0
                      ) -> CohortConfig:
    """Pattern-driven cohort: the label needs an HR marker four days back AND
    a sleep marker one day back, so position-blind pooling cannot nail it."""
    return CohortConfig(
        n_participants=n_participants, n_days=n_days, seed=seed,
        symptom_prevalence=0.0,           # no episodes; the pattern is the signal
        long_range_mode=True,
        long_range_marker_prob=0.4,
    )


def _split_for(dataset: Dataset, boundary_days: int, seed: int = 0) -> SplitSpec:
    return SplitSpec(boundary_day=dataset.start_day + timedelta(days=boundary_days),
                     tuning_fraction=0.10, seed=seed)


def _model_config(resolution_minutes: int, arch: str = "full") -> ModelConfig:
    return ModelConfig(input_length=5760 // resolution_minutes, arch=arch)


def planted_signal_experiment(seed: int = 0, resolution_minutes: int = 20,
                              max_epochs: int = 4, out_dir: str | Path | None = None,
                              log=LOG) -> dict:
    """Strong-effect cohort (200 x 120, split at day 60): train the full
    model on flu symptoms and report holdout AUC."""
    cohort = strong_effect_cohort(seed=seed)
    dataset, _truth = generate_cohort(cohort)
    spec = _split_for(dataset, 60, seed=seed)
    split = temporal_split(dataset, spec, "flu_symptoms")
    if log:
        log(f"planted-signal: {len(split.train)} train / {len(split.tuning)} tuning / "
            f"{len(split.test)} test windows")
    model_config = _model_config(resolution_minutes)
    train_config = TrainConfig(learning_rate=3e-4, batch_size=32, max_epochs=max_epochs,
                               early_stop_patience=max(5, max_epochs),
                               seed=seed, task="flu_symptoms")
    params = prepare_model(model_config, split.train, resolution_minutes, True,
                           train_config.seed)
    trained, report = train(params, split.train, split.tuning, train_config, log=log,
                            train_period=(dataset.start_day, spec.boundary_day))
    period = (spec.boundary_day, dataset.day_of(dataset.n_days))
    predictions = evaluate_model(NeuralScorer(trained), split.test,
                                 task="flu_symptoms", model_name="full", period=period)
    result = {
        "holdout_auc": predictions.auc(),
        "best_tuning_auc": report.best_tuning_auc,
        "epochs_run": len(report.epoch_losses),
        "n_test_predictions": len(predictions),
    }
    manifest = _manifest("planted_signal", seed=seed,
                         resolution_minutes=resolution_minutes,
                         cohort=cohort.to_dict(),
                         boundary_day=spec.boundary_day.isoformat(),
                         max_epochs=max_epochs, result=result)
    write_manifest(manifest, out_dir)
    result["manifest"] = manifest
    return result


def architecture_ablation_experiment(seed: int = 0, n_participants: int = 120,
                                     resolution_minutes: int = 30, max_epochs: int = 6,
                                     out_dir: str | Path | None = None, log=LOG) -> dict:
    """Long-range cohort: full model vs the CNN-only ablation on identical
    windows; reports both holdout AUCs."""
    cohort = long_range_cohort(n_participants, seed=seed)
    dataset, _truth = generate_cohort(cohort)
    spec = _split_for(dataset, 60, seed=seed)
    split = temporal_split(dataset, spec, "flu_symptoms")
    if log:
        log(f"ablation: {len(split.train)} train / {len(split.tuning)} tuning / "
            f"{len(split.test)} test windows")
    period = (spec.boundary_day, dataset.day_of(dataset.n_days))
    aucs: dict[str, float] = {}
    for arch in ("full", "cnn_only"):
        model_config = _model_config(resolution_minutes, arch=arch)
        train_config = TrainConfig(learning_rate=3e-4, batch_size=32,
                                   max_epochs=max_epochs,
                                   early_stop_patience=max(5, max_epochs),
                                   seed=seed, task="flu_symptoms")
        params = prepare_model(model_config, split.train, resolution_minutes, True,
                               train_config.seed)
        trained, _report = train(params, split.train, split.tuning, train_config,
                                 log=log, train_period=(dataset.start_day, spec.boundary_day))
        preds = evaluate_model(NeuralScorer(trained), split.test, task="flu_symptoms",
                               model_name=arch, period=period)
        aucs[arch] = preds.auc()
        if log:
            log(f"ablation: {arch} holdout AUC {aucs[arch]:.4f}")
    result = {"full_auc": aucs["full"], "cnn_only_auc": aucs["cnn_only"],
              "gap": aucs["full"] - aucs["cnn_only"]}
    manifest = _manifest("architecture_ablation", seed=seed,
                         resolution_minutes=resolution_minutes,
                         cohort=cohort.to_dict(),
                         boundary_day=spec.boundary_day.isoformat(),
                         max_epochs=max_epochs, result=result)
    write_manifest(manifest, out_dir)
    result["manifest"] = manifest
    return result


def transfer_experiment(seeds: Sequence[int] = (0, 1, 2, 3, 4),
                        n_participants: int = 100, resolution_minutes: int = 30,
                        pretrain_epochs: int = 5, finetune_epochs: int = 8, k: int = 12,
                        out_dir: str | Path | None = None, log=LOG) -> dict:
    """Pretrain on fatigue over the train period, then per seed: finetune on
    k test-period users, train the same model from scratch on those users,
    and fit the expert-feature booster on the same user-days; evaluate all
    three on the remaining holdout users.
    """
    cohort = long_range_cohort(n_participants, seed=11)
    dataset, _truth = generate_cohort(cohort)
    spec = _split_for(dataset, 60, seed=11)
    period = (spec.boundary_day, dataset.day_of(dataset.n_days))

    model_config = _model_config(resolution_minutes)
    pre_config = TrainConfig(learning_rate=3e-4, batch_size=32,
                             max_epochs=pretrain_epochs,
                             early_stop_patience=max(5, pretrain_epochs),
                             seed=0, task="fatigue")
    fatigue_split = temporal_split(dataset, spec, "fatigue")
    if log:
        log(f"transfer: pretraining on {len(fatigue_split.train)} fatigue windows")
    pre_params = prepare_model(model_config, fatigue_split.train, resolution_minutes,
                               True, pre_config.seed)
    pretrained, pre_report = train(pre_params, fatigue_split.train, fatigue_split.tuning,
                                   pre_config, log=log,
                                   train_period=(dataset.start_day, spec.boundary_day))

    target_split = temporal_split(dataset, spec, "flu_symptoms")
    by_user: dict[str, list] = {}
    for w in target_split.test:
        by_user.setdefault(w.participant_id, []).append(w)
    candidates = sorted(by_user)

    per_seed: list[dict] = []
    for seed in seeds:
        ft_users, holdout_users = select_finetune_cohort(candidates, k, seed)
        ft_windows = [w for u in ft_users for w in by_user[u]]
        holdout_windows = [w for u in holdout_users for w in by_user[u]]
        if log:
            log(f"transfer seed {seed}: {len(ft_windows)} finetune user-days from "
                f"{k} users; {len(holdout_windows)} holdout windows")

        ft_config = TrainConfig(learning_rate=1e-4, batch_size=32,
                                max_epochs=finetune_epochs,
                                early_stop_patience=finetune_epochs,
                                seed=seed, task="flu_symptoms")
        tuned, _ = finetune(pretrained, ft_windows, ft_config,
                            holdout_users=holdout_users, log=log)

        scratch_config = TrainConfig(learning_rate=3e-4, batch_size=32,
                                     max_epochs=finetune_epochs,
                                     early_stop_patience=finetune_epochs,
                                     seed=seed, task="flu_symptoms")
        scratch_params = init_params(model_config, seed=1000 + seed,
                                     transform=pretrained.transform)
        scratch, _ = train(scratch_params, ft_windows, [], scratch_config, log=log)

        ft_features = windows_to_feature_windows(dataset, ft_windows)
        holdout_features = windows_to_feature_windows(dataset, holdout_windows)
        gbdt = train_gbdt_baseline(ft_features, GBDTConfig(feature_set="standard+expert",
                                                           seed=seed))

        row = {"seed": seed}
        row["finetuned"] = evaluate_model(
            NeuralScorer(tuned), holdout_windows, task="flu_symptoms",
            model_name="finetuned", period=period).auc()
        row["scratch"] = evaluate_model(
            NeuralScorer(scratch), holdout_windows, task="flu_symptoms",
            model_name="scratch", period=period).auc()
        row["gbdt_expert"] = evaluate_model(
            GBDTScorer(gbdt, "standard+expert"), holdout_features,
            task="flu_symptoms", model_name="gbdt_expert", period=period).auc()
        if log:
            log(f"transfer seed {seed}: finetuned {row['finetuned']:.4f} "
                f"scratch {row['scratch']:.4f} gbdt_expert {row['gbdt_expert']:.4f}")
        per_seed.append(row)

    medians = {name: float(np.median([r[name] for r in per_seed]))
               for name in ("finetuned", "scratch", "gbdt_expert")}
    result = {"per_seed": per_seed, "medians": medians,
              "pretrain_tuning_auc": pre_report.best_tuning_auc}
    manifest = _manifest("transfer", seeds=list(seeds),
                         resolution_minutes=resolution_minutes,
                         cohort=cohort.to_dict(),
                         boundary_day=spec.boundary_day.isoformat(),
                         pretrain_epochs=pretrain_epochs,
                         finetune_epochs=finetune_epochs, k=k, result=result)
    write_manifest(manifest, out_dir)
    result["manifest"] = manifest
    return result
