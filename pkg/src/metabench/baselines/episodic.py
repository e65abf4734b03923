"""Episodic meta-training loop shared by the metric-based methods and FOMAML.

One meta-update averages per-task parameter gradients over meta_batch_size
tasks and applies them with Adam. How a task turns into a gradient is the
method-specific part (plain episode loss for the metric methods, inner-loop
adaptation for FOMAML).
"""

from __future__ import annotations

from itertools import islice
from typing import Callable, Optional

import numpy as np

from ..api import EPISODES, MetaLearner
from ..ndcore import AdamState, ConvNetSpec, ParamSet, adam_step, init_params
from ..rng import RngStream
from ..sampler import Task
from .common import (
    BaselineLearner,
    Hyperparams,
    TrainingSchedule,
    evaluate_params_on_tasks,
    run_meta_training,
)


class EpisodicMetaLearner(MetaLearner):
    data_mode = EPISODES
    method_id: str = ""

    def __init__(
        self,
        backbone: ConvNetSpec,
        hyper: Hyperparams,
        seed: int = 0,
        schedule: Optional[TrainingSchedule] = None,
        initial_backbone: Optional[ParamSet] = None,
        should_stop: Optional[Callable[[], bool]] = None,
    ):
        self.backbone = backbone
        self.hyper = hyper
        self.seed = int(seed)
        self.schedule = schedule or TrainingSchedule(0, 1, 0)
        self.initial_backbone = initial_backbone
        self.should_stop = should_stop
        self.events: list[dict] = []

    def initial_params(self) -> ParamSet:
        if self.initial_backbone is not None:
            return self._adopt_pretrained(self.initial_backbone)
        rng = RngStream(self.seed).generator("init", self.method_id)
        return init_params(self._train_spec(), rng)

    def _train_spec(self) -> ConvNetSpec:
        return self.backbone

    def _adopt_pretrained(self, backbone_params: ParamSet) -> ParamSet:
        return backbone_params.copy()

    def task_gradient(self, params: ParamSet, task: Task) -> dict:
        raise NotImplementedError

    def _learner_from(self, params: ParamSet) -> BaselineLearner:
        return BaselineLearner.from_params(
            self.method_id, self.backbone, self.hyper, self.seed, params
        )

    def meta_fit(self, meta_train_source, meta_valid_source) -> BaselineLearner:
        params = self.initial_params()
        if self.schedule.meta_train_count == 0:
            return self._learner_from(params)
        state = AdamState.init(params, lr=self.hyper.lr)
        task_iter = iter(meta_train_source.tasks)
        m = self.hyper.meta_batch_size

        def step(params, state):
            tasks = list(islice(task_iter, m))
            if not tasks:
                return 0, params, state
            grads: dict[str, np.ndarray] = {}
            for task in tasks:
                g = self.task_gradient(params, task)
                for path, value in g.items():
                    grads[path] = grads.get(path, 0.0) + value / len(tasks)
            params, state = adam_step(params, grads, state)
            return len(tasks), params, state

        validate_fn = None
        if meta_valid_source is not None and self.schedule.valid_task_count > 0:
            valid_tasks = list(
                islice(iter(meta_valid_source.tasks), self.schedule.valid_task_count)
            )
            if valid_tasks:
                validate_fn = lambda p: evaluate_params_on_tasks(
                    self._learner_from, p, valid_tasks
                )
        best, events = run_meta_training(
            params, state, step, self.schedule, validate_fn, self.should_stop
        )
        self.events = events
        return self._learner_from(best)
