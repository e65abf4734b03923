"""Episode (task) and batch sampling with exact composition rules.

A task is carved from exactly one dataset: N classes sampled without
replacement, k support and q query records per class, also without
replacement and disjoint. Every draw is keyed by (seed, phase key,
task_index), so tasks can be re-materialized independently and in parallel.

Sampling order per task is fixed: dataset choice, then (for any-way
any-shot) ways and shots, then class choice, then per-class record
permutations, support before query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .datastore import Dataset, MetaDataset, BatchPool
from .rng import RngStream

UNLIMITED = None

DEFAULT_QUERIES = 20
DEFAULT_WAY_RANGE = (2, 20)
DEFAULT_SHOT_RANGE = (1, 20)


class InfeasibleTaskError(ValueError):
    """No dataset can host a task with the requested composition."""


@dataclass(frozen=True)
class EpisodeConfig:
    """Fixed (ways, shots) when set; ranges drive any-way any-shot mode."""

    ways: Optional[int] = None
    shots: Optional[int] = None
    queries: int = DEFAULT_QUERIES
    way_range: tuple[int, int] = DEFAULT_WAY_RANGE
    shot_range: tuple[int, int] = DEFAULT_SHOT_RANGE

    def __post_init__(self):
        if self.queries < 1:
            raise ValueError("queries must be >= 1")
        if self.ways is not None and self.ways < 2:
            raise ValueError("ways must be >= 2")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.way_range[0] < 2 or self.way_range[0] > self.way_range[1]:
            raise ValueError(f"invalid way_range {self.way_range}")
        if self.shot_range[0] < 1 or self.shot_range[0] > self.shot_range[1]:
            raise ValueError(f"invalid shot_range {self.shot_range}")

    @property
    def fixed(self) -> bool:
        return self.ways is not None and self.shots is not None


@dataclass(frozen=True)
class SupportSet:
    images: np.ndarray  # (N*k, H, W, 3) float64 in [0,1]
    labels: np.ndarray  # (N*k,) episode labels
    num_ways: int


@dataclass(frozen=True)
class Task:
    """One episode: class remapping plus support/query record references.

    Pixel data is materialized lazily from the owning dataset; query labels
    are stored separately so the evaluation loop can withhold them.
    """

    dataset: Dataset
    dataset_id: str
    task_index: int
    num_ways: int
    num_shots: int
    num_queries: int
    class_map: tuple[int, ...]  # episode label -> original class index
    support_refs: tuple[tuple[int, int], ...]  # (class_idx, record_idx)
    query_refs: tuple[tuple[int, int], ...]
    support_labels: np.ndarray = field(repr=False)
    query_labels: np.ndarray = field(repr=False)

    def support_set(self) -> SupportSet:
        return SupportSet(
            images=self.dataset.gather(self.support_refs),
            labels=self.support_labels.copy(),
            num_ways=self.num_ways,
        )

    def query_images(self) -> np.ndarray:
        return self.dataset.gather(self.query_refs)


def _eligible_classes(dataset: Dataset, needed: int) -> list[int]:
    return [
        c for c in range(dataset.n_classes) if dataset.records_in_class(c) >= needed
    ]


def _eligible_datasets(
    meta_dataset: MetaDataset, ways: int, needed_records: int
) -> list[int]:
    out = []
    for i, d in enumerate(meta_dataset.datasets):
        if len(_eligible_classes(d, needed_records)) >= ways:
            out.append(i)
    return out


def _sample_from_dataset(
    dataset: Dataset,
    ways: int,
    shots: int,
    queries: int,
    rng: np.random.Generator,
    task_index: int,
) -> Task:
    pool = _eligible_classes(dataset, shots + queries)
    if len(pool) < ways:
        raise InfeasibleTaskError(
            f"dataset {dataset.id!r} cannot host N={ways}, k={shots}, q={queries}"
        )
    chosen = rng.choice(np.asarray(pool), size=ways, replace=False)
    support_refs, query_refs = [], []
    for label, cls in enumerate(chosen):
        cls = int(cls)
        perm = rng.permutation(dataset.records_in_class(cls))
        support_refs.extend((cls, int(r)) for r in perm[:shots])
        query_refs.extend((cls, int(r)) for r in perm[shots : shots + queries])
    return Task(
        dataset=dataset,
        dataset_id=dataset.id,
        task_index=task_index,
        num_ways=ways,
        num_shots=shots,
        num_queries=queries,
        class_map=tuple(int(c) for c in chosen),
        support_refs=tuple(support_refs),
        query_refs=tuple(query_refs),
        support_labels=np.repeat(np.arange(ways), shots),
        query_labels=np.repeat(np.arange(ways), queries),
    )


def sample_task(
    meta_dataset: MetaDataset,
    config: EpisodeConfig,
    stream: RngStream,
    task_index: int,
) -> Task:
    """Fixed-configuration task: uniform dataset choice among eligible ones."""
    if not config.fixed:
        raise ValueError("sample_task needs a fixed (ways, shots) config")
    rng = stream.generator("task", task_index)
    eligible = _eligible_datasets(
        meta_dataset, config.ways, config.shots + config.queries
    )
    if not eligible:
        raise InfeasibleTaskError(
            f"no dataset can host N={config.ways}, k={config.shots}, "
            f"q={config.queries}"
        )
    ds = meta_dataset.datasets[int(rng.choice(np.asarray(eligible)))]
    return _sample_from_dataset(
        ds, config.ways, config.shots, config.queries, rng, task_index
    )


def sample_any_way_any_shot(
    meta_dataset: MetaDataset,
    config: EpisodeConfig,
    stream: RngStream,
    task_index: int,
    dataset: Optional[Dataset] = None,
) -> Task:
    """Any-way any-shot task: N and k drawn uniformly from clipped ranges.

    The dataset is chosen first (uniformly among those supporting the range
    minima), then N is clipped to its class count and k so that k + q fits
    in every class. Passing ``dataset`` pins the choice (used by per-dataset
    meta-test enumeration).
    """
    rng = stream.generator("task", task_index)
    q = config.queries
    min_needed = config.shot_range[0] + q
    if dataset is None:
        eligible = _eligible_datasets(meta_dataset, config.way_range[0], min_needed)
        if not eligible:
            raise InfeasibleTaskError(
                f"no dataset can host N={config.way_range[0]}, "
                f"k={config.shot_range[0]}, q={q}"
            )
        dataset = meta_dataset.datasets[int(rng.choice(np.asarray(eligible)))]
    classes = _eligible_classes(dataset, min_needed)
    if len(classes) < config.way_range[0]:
        raise InfeasibleTaskError(
            f"dataset {dataset.id!r} cannot host N={config.way_range[0]}, "
            f"k={config.shot_range[0]}, q={q}"
        )
    n_hi = min(config.way_range[1], len(classes))
    ways = int(rng.integers(config.way_range[0], n_hi + 1))
    min_records = min(dataset.records_in_class(c) for c in classes)
    k_hi = min(config.shot_range[1], min_records - q)
    shots = int(rng.integers(config.shot_range[0], k_hi + 1))
    return _sample_from_dataset(dataset, ways, shots, q, rng, task_index)


def episode_stream(
    meta_dataset: MetaDataset,
    config: EpisodeConfig,
    count: Optional[int],
    stream: RngStream,
) -> Iterator[Task]:
    """Lazily yield ``count`` tasks (unbounded when count is UNLIMITED)."""
    if count is not None and count < 0:
        raise ValueError("count must be >= 0")
    index = 0
    while count is None or index < count:
        if config.fixed:
            yield sample_task(meta_dataset, config, stream, index)
        else:
            yield sample_any_way_any_shot(meta_dataset, config, stream, index)
        index += 1


def batch_stream(
    pool: BatchPool,
    batch_size: int,
    stream: RngStream,
    count: Optional[int] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Epoch-shuffled batches of exactly batch_size examples.

    The pool is reshuffled every epoch; a trailing remainder smaller than
    batch_size is dropped for that epoch. Yields ``count`` batches, or
    forever when count is UNLIMITED.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(pool):
        raise ValueError(
            f"batch_size {batch_size} exceeds pool size {len(pool)}"
        )
    produced = 0
    epoch = 0
    while count is None or produced < count:
        rng = stream.generator("batch-epoch", epoch)
        perm = rng.permutation(len(pool))
        for start in range(0, len(pool) - batch_size + 1, batch_size):
            if count is not None and produced >= count:
                return
            idx = perm[start : start + batch_size]
            yield pool.materialize([int(i) for i in idx])
            produced += 1
        epoch += 1
