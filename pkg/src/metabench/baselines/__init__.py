"""The five reproducible baseline methods and their default hyperparameters."""

from __future__ import annotations

from typing import Optional

from ..ndcore import ConvNetSpec, ParamSet
from .common import (
    BaselineLearner,
    Hyperparams,
    TrainingSchedule,
    parse_hyperparam_overrides,
)
from .tfs import TFS_ID, TrainFromScratch, fit_tfs
from .finetune import FINETUNE_ID, FineTuning, fit_finetune
from .metric import (
    MATCHING,
    PROTOTYPICAL,
    MatchingNetworks,
    PrototypicalNetworks,
    fit_matching,
    fit_prototypical,
)
from .fomaml import FOMAML, FOMAML_ID, fit_fomaml, inner_adapt, zero_head

METHODS = {
    TFS_ID: TrainFromScratch,
    FINETUNE_ID: FineTuning,
    MATCHING: MatchingNetworks,
    PROTOTYPICAL: PrototypicalNetworks,
    FOMAML_ID: FOMAML,
}

FIT_FNS = {
    TFS_ID: fit_tfs,
    FINETUNE_ID: fit_finetune,
    MATCHING: fit_matching,
    PROTOTYPICAL: fit_prototypical,
    FOMAML_ID: fit_fomaml,
}

_DEFAULTS = {
    TFS_ID: dict(lr=0.001, T=100, batch_size=4),
    FINETUNE_ID: dict(lr=0.001, val_lr=0.001, T=100, val_batch_size=4),
    MATCHING: dict(lr=0.001, meta_batch_size=1),
    PROTOTYPICAL: dict(lr=0.001, meta_batch_size=1),
    FOMAML_ID: dict(lr=0.001, base_lr=0.01, T=5, meta_batch_size=2),
}


def default_hyperparams(method_id: str) -> Hyperparams:
    if method_id not in _DEFAULTS:
        raise KeyError(f"unknown method {method_id!r}; known: {sorted(METHODS)}")
    return Hyperparams(**_DEFAULTS[method_id])


def make_method(
    method_id: str,
    backbone: ConvNetSpec,
    seed: int = 0,
    schedule: Optional[TrainingSchedule] = None,
    hyper_overrides: Optional[dict] = None,
    initial_backbone: Optional[ParamSet] = None,
    should_stop=None,
    train_ways: int = 5,
):
    hyper = default_hyperparams(method_id)
    if hyper_overrides:
        hyper = hyper.override(hyper_overrides)
    kwargs = dict(
        backbone=backbone,
        hyper=hyper,
        seed=seed,
        schedule=schedule,
        initial_backbone=initial_backbone,
        should_stop=should_stop,
    )
    if method_id == FOMAML_ID:
        kwargs["train_ways"] = train_ways
    return METHODS[method_id](**kwargs)


def load_learner(path) -> BaselineLearner:
    return BaselineLearner.load(path)


__all__ = [
    "BaselineLearner",
    "FIT_FNS",
    "FOMAML",
    "FOMAML_ID",
    "FINETUNE_ID",
    "FineTuning",
    "Hyperparams",
    "MATCHING",
    "METHODS",
    "MatchingNetworks",
    "PROTOTYPICAL",
    "PrototypicalNetworks",
    "TFS_ID",
    "TrainFromScratch",
    "TrainingSchedule",
    "default_hyperparams",
    "fit_finetune",
    "fit_fomaml",
    "fit_matching",
    "fit_prototypical",
    "fit_tfs",
    "inner_adapt",
    "load_learner",
    "make_method",
    "parse_hyperparam_overrides",
    "zero_head",
]
