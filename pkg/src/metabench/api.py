"""The three-role contract every method implements.

MetaLearner.meta_fit(meta_train_source, meta_valid_source) returns a
Learner (possibly without any meta-training). Learner.fit(support_set)
returns a Predictor for one task; Learners round-trip through save/load
bit-exactly. Predictor.predict(query_images) returns one probability row
per query example and never sees query labels: the evaluation loop only
touches them after predictions come back.
"""

from __future__ import annotations

import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .sampler import SupportSet, Task

EPISODES, BATCHES, NO_META_TRAINING = "episodes", "batches", "none"

PROBABILITY_ROW_TOL = 1e-9


class ConfigurationError(ValueError):
    """Method and data source disagree (e.g. episodic method, batch data)."""


@dataclass(frozen=True)
class EpisodeSource:
    """Stream of Tasks for episodic meta-training or validation."""

    tasks: Iterable[Task]
    mode: str = EPISODES


@dataclass(frozen=True)
class BatchSource:
    """Stream of (images, global labels) batches over a concatenated pool."""

    batches: Iterable[tuple[np.ndarray, np.ndarray]]
    n_classes: int
    mode: str = BATCHES


DataSource = Union[EpisodeSource, BatchSource]


class Predictor(ABC):
    @abstractmethod
    def predict(self, query_images: np.ndarray) -> np.ndarray:
        """Probability rows, one per query example, columns = episode labels."""


class Learner(ABC):
    @abstractmethod
    def fit(self, support: SupportSet) -> Predictor:
        ...

    @abstractmethod
    def save(self, path) -> None:
        ...


class MetaLearner(ABC):
    #: Declared meta-training data mode: EPISODES, BATCHES or NO_META_TRAINING.
    data_mode: str = NO_META_TRAINING

    @abstractmethod
    def meta_fit(
        self, meta_train_source: Optional[DataSource],
        meta_valid_source: Optional[EpisodeSource],
    ) -> Learner:
        ...


def run_meta_fit(
    method: MetaLearner,
    meta_train_source: Optional[DataSource],
    meta_valid_source: Optional[EpisodeSource] = None,
) -> Learner:
    """Mode-check the sources, then delegate to the method's meta_fit."""
    if method.data_mode == EPISODES and not isinstance(meta_train_source, EpisodeSource):
        raise ConfigurationError(
            f"{type(method).__name__} meta-trains on episodes, got "
            f"{type(meta_train_source).__name__}"
        )
    if method.data_mode == BATCHES and not isinstance(meta_train_source, BatchSource):
        raise ConfigurationError(
            f"{type(method).__name__} meta-trains on batches, got "
            f"{type(meta_train_source).__name__}"
        )
    if meta_valid_source is not None and not isinstance(meta_valid_source, EpisodeSource):
        raise ConfigurationError("meta-validation data must be an EpisodeSource")
    return method.meta_fit(meta_train_source, meta_valid_source)


def hard_labels(probabilities: np.ndarray) -> np.ndarray:
    """Argmax per row; ties break toward the lowest class index."""
    return np.argmax(probabilities, axis=1)


def check_probability_rows(probs: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (n_rows, n_cols):
        raise ValueError(
            f"predictor returned shape {probs.shape}, expected {(n_rows, n_cols)}"
        )
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > PROBABILITY_ROW_TOL) or np.any(probs < 0.0):
        raise ValueError("predictor rows are not probability distributions")
    return probs


@dataclass(frozen=True)
class TaskOutcome:
    """Predictions (or a recorded failure) plus wall-clock spent on the task."""

    probabilities: Optional[np.ndarray]
    elapsed_seconds: float
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.probabilities is None


def run_task(learner: Learner, task: Task) -> TaskOutcome:
    """Fit on the support set and predict the query set, timing the work.

    Query labels are never handed to the learner; any exception it raises
    is recorded as a task failure (scored as zero correct answers upstream).
    """
    start = time.perf_counter()
    try:
        predictor = learner.fit(task.support_set())
        probs = predictor.predict(task.query_images())
        probs = check_probability_rows(
            probs, task.num_ways * task.num_queries, task.num_ways
        )
    except Exception as exc:  # noqa: BLE001 - failures become task scores
        return TaskOutcome(None, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
    return TaskOutcome(probs, time.perf_counter() - start)
