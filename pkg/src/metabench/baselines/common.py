"""Shared machinery for the baseline methods.

All five methods serialize to the same Learner format: a manifest.txt with
method id, hyperparameters and seed, plus the parameter manifest/blob pair.
The float32 parameter snapshot taken at the end of meta-training is the
canonical state, so a Learner behaves bit-identically before and after a
save/load round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .. import scoring
from ..api import Learner, Predictor
from ..ndcore import (
    ConvNetSpec,
    ParamSet,
    Tape,
    adam_step,
    AdamState,
    dump_params,
    embed,
    head_logits,
    init_head,
    init_params,
    ops,
    param_nodes,
    parse_params,
)
from ..rng import RngStream
from ..sampler import SupportSet, Task

LEARNER_MANIFEST = "manifest.txt"
_PARAMS_MANIFEST = "params.manifest"
_PARAMS_BLOB = "params.bin"

HYPERPARAM_FIELDS = (
    "opt_fn", "lr", "val_lr", "base_lr", "criterion", "T",
    "batch_size", "val_batch_size", "meta_batch_size",
)


@dataclass(frozen=True)
class Hyperparams:
    opt_fn: str = "adam"
    lr: float = 0.001
    val_lr: float = 0.001
    base_lr: float = 0.01
    criterion: str = "cross-entropy"
    T: int = 100
    batch_size: int = 4
    val_batch_size: int = 4
    meta_batch_size: int = 1

    def __post_init__(self):
        if self.opt_fn != "adam":
            raise ValueError(f"unsupported optimizer {self.opt_fn!r}")
        if self.criterion != "cross-entropy":
            raise ValueError(f"unsupported criterion {self.criterion!r}")
        for name in ("lr", "val_lr", "base_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("T", "batch_size", "val_batch_size", "meta_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in HYPERPARAM_FIELDS}

    def override(self, values: dict) -> "Hyperparams":
        unknown = set(values) - set(HYPERPARAM_FIELDS)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return replace(self, **values)


def parse_hyperparam_overrides(text: str) -> dict:
    """Flat JSON object keyed by the hyperparameter code names."""
    values = json.loads(text)
    if not isinstance(values, dict):
        raise ValueError("hyperparameter override file must be a flat JSON object")
    return values


@dataclass(frozen=True)
class TrainingSchedule:
    """Desk-scaled meta-training counts (tasks or batches)."""

    meta_train_count: int
    validate_every: int
    valid_task_count: int

    def __post_init__(self):
        if self.meta_train_count < 0 or self.validate_every < 1 or self.valid_task_count < 0:
            raise ValueError(f"invalid schedule {self}")


def nchw(images_hwc: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images_hwc.transpose(0, 3, 1, 2))


def backbone_embed(params: ParamSet, spec: ConvNetSpec, images_hwc: np.ndarray) -> np.ndarray:
    """Forward-only embeddings for a batch of HWC images."""
    tape = Tape()
    nodes = param_nodes(tape, params)
    x = tape.leaf(nchw(images_hwc))
    return embed(tape, nodes, x, spec).value


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def class_mean_matrix(labels: np.ndarray, num_ways: int) -> np.ndarray:
    """(N, B) matrix averaging support rows per episode class."""
    onehot = np.zeros((num_ways, labels.size))
    onehot[labels, np.arange(labels.size)] = 1.0
    return onehot / onehot.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, num_ways: int) -> np.ndarray:
    out = np.zeros((labels.size, num_ways))
    out[np.arange(labels.size), labels] = 1.0
    return out


def minibatch_indices(
    rng: np.random.Generator, n: int, batch_size: int
) -> np.ndarray:
    """Without-replacement minibatch, shrunk when the set is smaller."""
    take = min(batch_size, n)
    return rng.choice(n, size=take, replace=False)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

class SoftmaxHeadPredictor(Predictor):
    """Backbone plus linear head; rows are row-softmax of the logits."""

    def __init__(self, params: ParamSet, spec: ConvNetSpec):
        self._params = params
        self._spec = spec

    def predict(self, query_images: np.ndarray) -> np.ndarray:
        tape = Tape()
        nodes = param_nodes(tape, self._params)
        x = tape.leaf(nchw(query_images))
        emb = embed(tape, nodes, x, self._spec)
        return ops.row_softmax(head_logits(nodes, emb)).value


class PrototypePredictor(Predictor):
    """Nearest-prototype classifier: softmax over negative squared distances."""

    def __init__(self, params: ParamSet, spec: ConvNetSpec, prototypes: np.ndarray):
        self._params = params
        self._spec = spec
        self.prototypes = prototypes

    def predict(self, query_images: np.ndarray) -> np.ndarray:
        emb = backbone_embed(self._params, self._spec, query_images)
        d = (
            (emb * emb).sum(axis=1)[:, None]
            + (self.prototypes * self.prototypes).sum(axis=1)[None, :]
            - 2.0 * emb @ self.prototypes.T
        )
        return softmax_rows(-np.maximum(d, 0.0))


class MatchingPredictor(Predictor):
    """Cosine-similarity matching against normalized support embeddings."""

    def __init__(
        self, params: ParamSet, spec: ConvNetSpec,
        support_embeddings: np.ndarray, support_onehot: np.ndarray,
    ):
        self._params = params
        self._spec = spec
        self.support_embeddings = support_embeddings  # already L2-normalized
        self.support_onehot = support_onehot

    def predict(self, query_images: np.ndarray) -> np.ndarray:
        emb = backbone_embed(self._params, self._spec, query_images)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms <= 1e-300):
            raise FloatingPointError("zero-norm query embedding")
        sims = (emb / norms) @ self.support_embeddings.T
        return softmax_rows(sims @ self.support_onehot)


# ---------------------------------------------------------------------------
# The shared Learner
# ---------------------------------------------------------------------------

class BaselineLearner(Learner):
    """Serialized-parameter Learner shared by all baseline methods.

    The canonical state is the (manifest, blob) float32 snapshot; fit always
    starts from it, so save/load round trips cannot change behavior. The fit
    RNG is derived from the stored seed only, keeping per-task adaptation
    deterministic.
    """

    def __init__(
        self,
        method_id: str,
        backbone: ConvNetSpec,
        hyper: Hyperparams,
        seed: int,
        manifest: str,
        blob: bytes,
        fit_fn: Optional[Callable] = None,
    ):
        self.method_id = method_id
        self.backbone = backbone
        self.hyper = hyper
        self.seed = int(seed)
        self.manifest = manifest
        self.blob = blob
        self._fit_fn = fit_fn or _resolve_fit_fn(method_id)

    @classmethod
    def from_params(cls, method_id, backbone, hyper, seed, params: ParamSet):
        manifest, blob = dump_params(params)
        return cls(method_id, backbone, hyper, seed, manifest, blob)

    def params(self) -> ParamSet:
        return parse_params(self.manifest, self.blob)

    def fit_stream(self) -> RngStream:
        return RngStream(self.seed).child("fit", self.method_id)

    def fit(self, support: SupportSet) -> Predictor:
        return self._fit_fn(self, support)

    def save(self, path) -> None:
        d = Path(path)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "method_id": self.method_id,
            "hyperparameters": self.hyper.to_dict(),
            "seed": self.seed,
            "backbone": self.backbone.to_dict(),
        }
        (d / LEARNER_MANIFEST).write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (d / _PARAMS_MANIFEST).write_text(self.manifest, encoding="utf-8")
        (d / _PARAMS_BLOB).write_bytes(self.blob)

    @classmethod
    def load(cls, path) -> "BaselineLearner":
        d = Path(path)
        meta = json.loads((d / LEARNER_MANIFEST).read_text(encoding="utf-8"))
        return cls(
            method_id=meta["method_id"],
            backbone=ConvNetSpec.from_dict(meta["backbone"]),
            hyper=Hyperparams(**meta["hyperparameters"]),
            seed=meta["seed"],
            manifest=(d / _PARAMS_MANIFEST).read_text(encoding="utf-8"),
            blob=(d / _PARAMS_BLOB).read_bytes(),
        )


def _resolve_fit_fn(method_id: str):
    from . import FIT_FNS  # late import: registry lives in the package root

    return FIT_FNS[method_id]


# ---------------------------------------------------------------------------
# Meta-training driver with validation-based selection
# ---------------------------------------------------------------------------

def evaluate_params_on_tasks(
    make_learner: Callable[[ParamSet], Learner], params: ParamSet, tasks: list[Task]
) -> float:
    """Mean normalized accuracy of fit+predict over a fixed task list."""
    from ..api import hard_labels, run_task

    learner = make_learner(params)
    values = []
    for task in tasks:
        outcome = run_task(learner, task)
        if outcome.failed:
            values.append(scoring.normalized_accuracy(0.0, task.num_ways))
        else:
            bac = scoring.balanced_accuracy(
                hard_labels(outcome.probabilities), task.query_labels, task.num_ways
            )
            values.append(scoring.normalized_accuracy(bac, task.num_ways))
    return float(np.mean(values)) if values else 0.0


def run_meta_training(
    params: ParamSet,
    state: AdamState,
    step_fn: Callable,
    schedule: TrainingSchedule,
    validate_fn: Optional[Callable[[ParamSet], float]],
    should_stop: Optional[Callable[[], bool]] = None,
) -> tuple[ParamSet, list[dict]]:
    """Drive meta-training with periodic validation and best-so-far selection.

    step_fn(params, state) -> (consumed, params, state) advances one update
    and reports how many tasks/batches it used; consumed == 0 means the
    source ran dry. Returns the selected parameters (best validation mean,
    earliest checkpoint on ties; final parameters when nothing was
    validated) plus an event log.
    """
    events: list[dict] = []
    consumed = 0
    last_checkpoint = 0
    best: Optional[tuple[float, int, ParamSet]] = None
    while consumed < schedule.meta_train_count:
        if should_stop is not None and should_stop():
            events.append({"event": "budget-stop", "consumed": consumed})
            break
        used, params, state = step_fn(params, state)
        if used == 0:
            events.append({"event": "source-exhausted", "consumed": consumed})
            break
        consumed += used
        checkpoint = consumed // schedule.validate_every
        if validate_fn is not None and checkpoint > last_checkpoint:
            last_checkpoint = checkpoint
            score = validate_fn(params)
            events.append(
                {"event": "validation", "consumed": consumed, "score": score}
            )
            if best is None or score > best[0]:
                best = (score, checkpoint, params.copy())
    if best is not None:
        return best[2], events
    return params, events
