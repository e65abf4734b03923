"""Protocol orchestration: presets, budgets, full runs, comparisons.

A run follows the competition shape: split the meta-training pool into
meta-train/meta-valid collections, meta-train with periodic validation and
best-checkpoint selection, then meta-test with a fixed number of tasks per
dataset, repeating everything for run_count seeds (master seed, +1, +2).
Schedule presets hold the protocol's exact counts; a scale divisor maps
them to desk size (floored, minimum 1), so scale=1 reproduces the protocol
shape unchanged.

All reported artifacts (tasks.csv, summary.json, submission.json) are
byte-reproducible for a fixed config and seed: no wall-clock values are
written into them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import scoring
from .api import BatchSource, EpisodeSource, hard_labels, run_meta_fit, run_task
from .baselines import FINETUNE_ID, TrainingSchedule, make_method
from .datastore import (
    Dataset,
    META_TEST,
    MetaDataset,
    SynthSpec,
    concat_for_batches,
    load_meta_dataset,
    split_classes,
    split_datasets,
    synth_meta_dataset,
)
from .ndcore import ConvNetSpec, ParamSet
from .rng import RngStream
from .sampler import (
    EpisodeConfig,
    batch_stream,
    episode_stream,
    sample_any_way_any_shot,
    sample_task,
)
from .scoring import ScoreReport, SubmissionResult, TaskScore, aggregate

CROSS_DOMAIN, WITHIN_DOMAIN = "cross-domain", "within-domain"


class ConfigError(ValueError):
    """Run configuration is invalid."""


# ---------------------------------------------------------------------------
# Presets (exact protocol values before desk scaling)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhasePreset:
    meta_train_count: int
    validate_every: int
    valid_task_count: int
    train_ways: int = 5
    train_shots: int = 10
    valid_ways: int = 5
    valid_shots: int = 5
    queries: int = 20
    batch_size: int = 16


CROSS_DOMAIN_PRESET = PhasePreset(
    meta_train_count=30_000, validate_every=5_000, valid_task_count=300
)
WITHIN_DOMAIN_PRESET = PhasePreset(
    meta_train_count=4_290, validate_every=750, valid_task_count=100
)

#: Meta-test presets: (tasks per dataset, wall-clock budget in seconds).
FEEDBACK_TEST_PRESET = (100, 5 * 3600.0)
FINAL_TEST_PRESET = (600, 9 * 3600.0)

#: Ensemble-method cadences kept for completeness; no bundled method uses
#: them (that baseline is out of scope here).
METADELTA_VALIDATE_EVERY = 50
METADELTA_VALID_TASK_COUNT = 50
METADELTA_VALID_QUERIES = 5
METADELTA_BATCH_SIZE = 64

DEFAULT_DESK_BUDGET_SECONDS = 15 * 60.0

_PRESETS = {CROSS_DOMAIN: CROSS_DOMAIN_PRESET, WITHIN_DOMAIN: WITHIN_DOMAIN_PRESET}


def scaled_count(value: int, scale: float) -> int:
    """Desk-scale divisor with floor and minimum 1."""
    return max(1, int(np.floor(value / scale)))


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------

class BudgetClock:
    """Monotonic wall-clock budget checked at episode/batch boundaries."""

    def __init__(self, limit_seconds: float):
        if limit_seconds <= 0:
            raise ConfigError(f"budget must be positive, got {limit_seconds}")
        self.limit_seconds = float(limit_seconds)
        self.start = time.monotonic()
        self.events: list[dict] = []

    def elapsed(self) -> float:
        return time.monotonic() - self.start

    def exceeded(self) -> bool:
        return self.elapsed() >= self.limit_seconds


def enforce_budget(clock: BudgetClock, phase: str) -> str:
    """Cooperative stop signal; the caller finishes its current step first."""
    if clock.exceeded():
        clock.events.append({"event": "budget-exhausted", "phase": phase})
        return "stop"
    return "continue"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    protocol: str = CROSS_DOMAIN
    method: str = "prototypical-networks"
    seed: int = 0
    run_count: int = 3
    scale: float = 1.0
    backbone: ConvNetSpec = field(default_factory=ConvNetSpec)
    data: Optional[SynthSpec] = None
    data_paths: tuple[str, ...] = ()
    test_data: Optional[SynthSpec] = None
    test_data_paths: tuple[str, ...] = ()
    tasks_per_dataset: Optional[int] = None  # None: scaled feedback preset
    test_ways: Optional[int] = None   # fixed test config; None: any-way
    test_shots: Optional[int] = None
    way_range: tuple[int, int] = (2, 20)
    shot_range: tuple[int, int] = (1, 20)
    queries: int = 20
    budget_seconds: float = DEFAULT_DESK_BUDGET_SECONDS
    pretrained: bool = False
    pretrain_data: Optional[SynthSpec] = None
    pretrain_batches: int = 1500
    hyperparameters: dict = field(default_factory=dict)
    league: str = "meta-learning"
    submission_id: str = "baseline"
    timestamp: float = 0.0
    out_dir: Optional[str] = None

    def validate(self) -> None:
        if self.protocol not in _PRESETS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.run_count < 1:
            raise ConfigError("run_count must be >= 1")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.budget_seconds <= 0:
            raise ConfigError("budget_seconds must be positive")
        if self.data is None and not self.data_paths:
            raise ConfigError("config needs either synthetic data or data_paths")
        if (self.test_ways is None) != (self.test_shots is None):
            raise ConfigError("test_ways and test_shots must be set together")
        if self.pretrained and self.pretrain_data is None and self.data is None:
            raise ConfigError("pretrained runs need pretrain_data")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        d = dict(raw)
        try:
            if "backbone" in d:
                d["backbone"] = ConvNetSpec.from_dict(d["backbone"])
            for key in ("data", "test_data", "pretrain_data"):
                if d.get(key) is not None:
                    d[key] = SynthSpec.from_dict(d[key])
            for key in ("data_paths", "test_data_paths"):
                if key in d:
                    d[key] = tuple(d[key])
            for key in ("way_range", "shot_range"):
                if key in d:
                    d[key] = tuple(d[key])
            config = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        config.validate()
        return config

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "method": self.method,
            "seed": self.seed,
            "run_count": self.run_count,
            "scale": self.scale,
            "backbone": self.backbone.to_dict(),
            "data": self.data.to_dict() if self.data else None,
            "data_paths": list(self.data_paths),
            "test_data": self.test_data.to_dict() if self.test_data else None,
            "test_data_paths": list(self.test_data_paths),
            "tasks_per_dataset": self.tasks_per_dataset,
            "test_ways": self.test_ways,
            "test_shots": self.test_shots,
            "way_range": list(self.way_range),
            "shot_range": list(self.shot_range),
            "queries": self.queries,
            "budget_seconds": self.budget_seconds,
            "pretrained": self.pretrained,
            "pretrain_data": self.pretrain_data.to_dict() if self.pretrain_data else None,
            "pretrain_batches": self.pretrain_batches,
            "hyperparameters": dict(self.hyperparameters),
            "league": self.league,
            "submission_id": self.submission_id,
            "timestamp": self.timestamp,
            "out_dir": self.out_dir,
        }


def _load_pool(config: RunConfig) -> MetaDataset:
    if config.data is not None:
        return synth_meta_dataset(config.data)
    return load_meta_dataset(config.data_paths, "meta-train")


def _load_test_pool(config: RunConfig, fallback: MetaDataset) -> MetaDataset:
    if config.test_data is not None:
        return synth_meta_dataset(config.test_data, META_TEST)
    if config.test_data_paths:
        return load_meta_dataset(config.test_data_paths, META_TEST)
    return fallback.with_role(META_TEST)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def pretrain_backbone(config: RunConfig, stream: RngStream, clock: BudgetClock) -> ParamSet:
    """Emulated pre-training: batch cross-entropy on a disjoint corpus."""
    spec = config.pretrain_data or replace(config.data, seed=config.data.seed + 104729)
    corpus = synth_meta_dataset(spec)
    pool = concat_for_batches(corpus)
    preset = _PRESETS[config.protocol]
    method = make_method(
        FINETUNE_ID,
        config.backbone,
        seed=stream.generator("pretrain-seed").integers(0, 2**31 - 1),
        schedule=TrainingSchedule(config.pretrain_batches, config.pretrain_batches + 1, 0),
        should_stop=lambda: enforce_budget(clock, "pretrain") == "stop",
    )
    source = BatchSource(
        batch_stream(pool, preset.batch_size, stream.child("pretrain"), config.pretrain_batches),
        n_classes=pool.n_classes,
    )
    return method.meta_fit(source, None).params()


def _meta_test_scores(
    learner, test_md: MetaDataset, config: RunConfig, stream: RngStream,
    clock: BudgetClock,
) -> list[TaskScore]:
    """Enumerate tasks_per_dataset tasks per meta-test dataset, in order."""
    preset_tpd, _ = FEEDBACK_TEST_PRESET
    tpd = config.tasks_per_dataset
    if tpd is None:
        tpd = scaled_count(preset_tpd, config.scale)
    if config.test_ways is not None:
        episode = EpisodeConfig(
            ways=config.test_ways, shots=config.test_shots, queries=config.queries
        )
    else:
        episode = EpisodeConfig(
            way_range=config.way_range, shot_range=config.shot_range,
            queries=config.queries,
        )
    scores = []
    index = 0
    stopped = False
    for ds in test_md.datasets:
        ds_stream = stream.child("meta-test", ds.id)
        for j in range(tpd):
            if config.test_ways is not None:
                task = sample_task(
                    MetaDataset((ds,), META_TEST), episode, ds_stream, j
                )
            else:
                task = sample_any_way_any_shot(
                    test_md, episode, ds_stream, j, dataset=ds
                )
            if stopped or enforce_budget(clock, "meta-test") == "stop":
                stopped = True
                scores.append(
                    TaskScore.failed(index, ds.id, task.num_ways, task.num_shots)
                )
                index += 1
                continue
            outcome = run_task(learner, task)
            if outcome.failed:
                scores.append(
                    TaskScore.failed(index, ds.id, task.num_ways, task.num_shots)
                )
            else:
                scores.append(
                    TaskScore.from_labels(
                        index, ds.id, task.num_ways, task.num_shots,
                        hard_labels(outcome.probabilities), task.query_labels,
                    )
                )
            index += 1
    return scores


@dataclass(frozen=True)
class RunResult:
    run_index: int
    seed: int
    scores: list[TaskScore]
    report: ScoreReport
    events: list[dict]
    budget_exhausted: bool


def _single_run(
    config: RunConfig, run_index: int, pool: MetaDataset, test_pool: MetaDataset
) -> RunResult:
    seed = config.seed + run_index
    stream = RngStream(seed)
    preset = _PRESETS[config.protocol]
    clock = BudgetClock(config.budget_seconds)
    schedule = TrainingSchedule(
        meta_train_count=scaled_count(preset.meta_train_count, config.scale),
        validate_every=scaled_count(preset.validate_every, config.scale),
        valid_task_count=scaled_count(preset.valid_task_count, config.scale),
    )

    if config.protocol == CROSS_DOMAIN:
        n = len(pool.datasets)
        if n < 2:
            raise ConfigError("cross-domain protocol needs at least 2 datasets")
        n_valid = max(1, round(0.3 * n))
        train_md, valid_md = split_datasets(pool, (n - n_valid, n_valid), seed)
        test_md = test_pool
    else:
        train_md, valid_md, test_md = _within_domain_splits(config, pool, seed)

    initial_backbone = None
    if config.pretrained:
        initial_backbone = pretrain_backbone(config, stream, clock)

    method = make_method(
        config.method,
        config.backbone,
        seed=seed,
        schedule=schedule,
        hyper_overrides=config.hyperparameters or None,
        initial_backbone=initial_backbone,
        should_stop=lambda: enforce_budget(clock, "meta-train") == "stop",
        train_ways=preset.train_ways,
    )

    train_cfg = EpisodeConfig(
        ways=preset.train_ways, shots=preset.train_shots, queries=preset.queries
    )
    valid_cfg = EpisodeConfig(
        ways=preset.valid_ways, shots=preset.valid_shots, queries=preset.queries
    )
    if method.data_mode == "batches":
        bpool = concat_for_batches(train_md)
        train_source = BatchSource(
            batch_stream(
                bpool, preset.batch_size, stream.child("meta-train"),
                schedule.meta_train_count,
            ),
            n_classes=bpool.n_classes,
        )
    else:
        train_source = EpisodeSource(
            episode_stream(
                train_md, train_cfg, schedule.meta_train_count, stream.child("meta-train")
            )
        )
    valid_source = EpisodeSource(
        episode_stream(
            valid_md, valid_cfg, schedule.valid_task_count, stream.child("meta-valid")
        )
    )
    learner = run_meta_fit(method, train_source, valid_source)
    scores = _meta_test_scores(learner, test_md, config, stream, clock)
    events = list(getattr(method, "events", [])) + clock.events
    return RunResult(
        run_index=run_index,
        seed=seed,
        scores=scores,
        report=aggregate(scores),
        events=events,
        budget_exhausted=any(e.get("event") == "budget-exhausted" for e in clock.events),
    )


def _within_domain_splits(config: RunConfig, pool: MetaDataset, seed: int):
    if len(pool.datasets) != 1:
        raise ConfigError(
            f"within-domain protocol needs exactly 1 dataset, got {len(pool.datasets)}"
        )
    dataset = pool.datasets[0]
    preset = _PRESETS[WITHIN_DOMAIN]
    needed_ways = max(preset.train_ways, preset.valid_ways, config.test_ways or 5)
    c = dataset.n_classes
    n_valid = int(np.floor(0.15 * c))
    n_test = int(np.floor(0.15 * c))
    if min(n_valid, n_test) < needed_ways or (c - n_valid - n_test) < needed_ways:
        minimum = _min_classes_for(needed_ways)
        raise ConfigError(
            f"dataset {dataset.id!r} has {c} classes; within-domain protocol "
            f"with {needed_ways}-way tasks requires at least {minimum}"
        )
    train_ds, valid_ds, test_ds = split_classes(dataset, seed)
    return (
        MetaDataset((train_ds,), "meta-train"),
        MetaDataset((valid_ds,), "meta-valid"),
        MetaDataset((test_ds,), META_TEST),
    )


def _min_classes_for(ways: int) -> int:
    c = ways
    while True:
        if int(np.floor(0.15 * c)) >= ways:
            return c
        c += 1


# ---------------------------------------------------------------------------
# Full protocol runs
# ---------------------------------------------------------------------------

def run_protocol(config: RunConfig) -> tuple[SubmissionResult, list[RunResult]]:
    """Execute run_count seeded runs and write reports if out_dir is set."""
    config.validate()
    if config.protocol == WITHIN_DOMAIN and config.test_ways is None:
        config = replace(config, test_ways=WITHIN_DOMAIN_PRESET.valid_ways,
                         test_shots=WITHIN_DOMAIN_PRESET.valid_shots)
    pool = _load_pool(config)
    test_pool = _load_test_pool(config, pool)
    runs = [
        _single_run(config, i, pool, test_pool) for i in range(config.run_count)
    ]
    per_dataset: dict[str, float] = {}
    if runs:
        keys = sorted(runs[0].report.per_dataset)
        for key in keys:
            per_dataset[key] = float(
                np.mean([r.report.per_dataset[key]["mean"] for r in runs])
            )
    submission = SubmissionResult(
        submission_id=config.submission_id,
        timestamp=config.timestamp,
        league=config.league,
        run_means=tuple(r.report.overall["mean"] for r in runs),
        per_dataset_means=per_dataset,
    )
    if config.out_dir is not None:
        write_reports(config, submission, runs)
    return submission, runs


def run_cross_domain(config: RunConfig) -> tuple[SubmissionResult, list[RunResult]]:
    if config.protocol != CROSS_DOMAIN:
        raise ConfigError(f"expected cross-domain config, got {config.protocol!r}")
    return run_protocol(config)


def run_within_domain(config: RunConfig) -> tuple[SubmissionResult, list[RunResult]]:
    if config.protocol != WITHIN_DOMAIN:
        raise ConfigError(f"expected within-domain config, got {config.protocol!r}")
    return run_protocol(config)


def write_reports(config: RunConfig, submission: SubmissionResult, runs: list[RunResult]) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in runs:
        run_dir = out / f"run_{run.run_index}"
        run_dir.mkdir(parents=True, exist_ok=True)
        scoring.write_tasks_csv(run.scores, run_dir / "tasks.csv")
        summary = scoring.summary_dict(
            run.report,
            league=config.league,
            ranking_inputs={
                "run_index": run.run_index,
                "seed": run.seed,
                "run_mean": run.report.overall["mean"],
                "submission_id": config.submission_id,
                "timestamp": config.timestamp,
            },
        )
        scoring.write_summary_json(summary, run_dir / "summary.json")
        (run_dir / "events.json").write_text(
            json.dumps(run.events, indent=2) + "\n", encoding="utf-8"
        )
    payload = {
        "schema_version": scoring.SCHEMA_VERSION,
        "config": config.to_dict(),
        **submission.to_dict(),
    }
    (out / "submission.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Condition comparison (method x initialization)
# ---------------------------------------------------------------------------

def compare_conditions(
    base_config: RunConfig, cells: list[dict], out_dir=None
) -> dict:
    """Run a (method, init) matrix and emit plot-ready comparison tables.

    Each cell is {"method": ..., "pretrained": bool}; every cell runs once
    (run_count=1) on the shared config. Returns the comparison dict; when
    out_dir is set, writes comparison.csv and comparison.json.
    """
    if len(cells) < 2:
        raise ConfigError("compare_conditions needs at least 2 cells")
    results = {}
    for cell in cells:
        method = cell["method"]
        pretrained = bool(cell.get("pretrained", False))
        cfg = replace(
            base_config, method=method, pretrained=pretrained, run_count=1,
            out_dir=None,
        )
        _, runs = run_protocol(cfg)
        report = runs[0].report
        init = "pretrained" if pretrained else "random"
        ways = sorted(int(k) for k in report.per_ways)
        shots = sorted(int(k) for k in report.per_shots)
        results[f"{method}|{init}"] = {
            "method": method,
            "init": init,
            "overall": report.overall,
            "per_dataset": report.per_dataset,
            "per_ways": report.per_ways,
            "per_shots": report.per_shots,
            "spearman_ways": (
                scoring.spearman_rho(
                    ways, [report.per_ways[str(n)]["mean"] for n in ways]
                )
                if len(ways) >= 2 else None
            ),
            "spearman_shots": (
                scoring.spearman_rho(
                    shots, [report.per_shots[str(k)]["mean"] for k in shots]
                )
                if len(shots) >= 2 else None
            ),
        }
    datasets = sorted(
        {ds for cell in results.values() for ds in cell["per_dataset"]}
    )
    extremes = {}
    for ds in datasets:
        means = {
            key: cell["per_dataset"][ds]["mean"]
            for key, cell in results.items() if ds in cell["per_dataset"]
        }
        worst = min(means, key=lambda k: means[k])
        best = max(means, key=lambda k: means[k])
        extremes[ds] = {
            "worst": {"cell": worst, "mean": means[worst]},
            "best": {"cell": best, "mean": means[best]},
        }
    comparison = {
        "schema_version": scoring.SCHEMA_VERSION,
        "cells": results,
        "per_dataset_extremes": extremes,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["method,init,dataset_id,mean,ci_half_width,n_tasks"]
        for key in sorted(results):
            cell = results[key]
            for ds in sorted(cell["per_dataset"]):
                entry = cell["per_dataset"][ds]
                hw = repr(entry["ci"]["half_width"]) if entry["ci"] else ""
                lines.append(
                    f"{cell['method']},{cell['init']},{ds},{entry['mean']!r},"
                    f"{hw},{entry['n_tasks']}"
                )
        (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / "comparison.json").write_text(
            json.dumps(comparison, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return comparison
