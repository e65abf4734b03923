"""Fine-tuning baseline: batch pre-training, head-only adaptation.

Meta-training runs plain supervised cross-entropy over batches from the
concatenated meta-training pool with a head covering the global label
space. At meta-test time the backbone is frozen bit-for-bit; only a fresh
N-way head is trained on the support set.
"""

from __future__ import annotations

from itertools import islice
from typing import Callable, Optional

import numpy as np

from ..api import MetaLearner, BATCHES
from ..ndcore import (
    AdamState,
    ConvNetSpec,
    ParamSet,
    Tape,
    adam_step,
    head_logits,
    init_head,
    init_params,
    logits,
    ops,
    param_nodes,
)
from ..rng import RngStream
from ..sampler import SupportSet
from .common import (
    BaselineLearner,
    Hyperparams,
    SoftmaxHeadPredictor,
    TrainingSchedule,
    backbone_embed,
    evaluate_params_on_tasks,
    minibatch_indices,
    run_meta_training,
)

FINETUNE_ID = "fine-tuning"


def _strip_head(params: ParamSet) -> ParamSet:
    return ParamSet({k: v for k, v in params.items() if not k.startswith("head.")})


class FineTuning(MetaLearner):
    data_mode = BATCHES

    def __init__(
        self,
        backbone: ConvNetSpec,
        hyper: Hyperparams,
        seed: int = 0,
        schedule: Optional[TrainingSchedule] = None,
        initial_backbone: Optional[ParamSet] = None,
        should_stop: Optional[Callable[[], bool]] = None,
        **_unused,
    ):
        self.backbone = backbone
        self.hyper = hyper
        self.seed = int(seed)
        self.schedule = schedule or TrainingSchedule(0, 1, 0)
        self.initial_backbone = initial_backbone
        self.should_stop = should_stop
        self.events: list[dict] = []

    def _learner_from(self, params: ParamSet) -> BaselineLearner:
        return BaselineLearner.from_params(
            FINETUNE_ID, self.backbone, self.hyper, self.seed, _strip_head(params)
        )

    def meta_fit(self, meta_train_source, meta_valid_source) -> BaselineLearner:
        stream = RngStream(self.seed)
        spec = self.backbone.with_head(meta_train_source.n_classes)
        if self.initial_backbone is not None:
            entries = dict(self.initial_backbone)
            entries.update(
                init_head(
                    stream.generator("init", FINETUNE_ID, "head"),
                    spec.width,
                    meta_train_source.n_classes,
                )
            )
            params = ParamSet(entries)
        else:
            params = init_params(spec, stream.generator("init", FINETUNE_ID))
        if self.schedule.meta_train_count == 0:
            return self._learner_from(params)
        state = AdamState.init(params, lr=self.hyper.lr)
        batch_iter = iter(meta_train_source.batches)

        def step(params, state):
            item = next(batch_iter, None)
            if item is None:
                return 0, params, state
            x, y = item
            tape = Tape()
            nodes = param_nodes(tape, params)
            loss = ops.softmax_cross_entropy(
                logits(tape, nodes, tape.leaf(x.transpose(0, 3, 1, 2)), spec), y
            )
            grads = tape.backward(loss, nodes)
            params, state = adam_step(params, grads, state)
            return 1, params, state

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


def fit_finetune(learner: BaselineLearner, support: SupportSet) -> SoftmaxHeadPredictor:
    """Train a fresh N-way head on frozen-backbone support embeddings."""
    hyper = learner.hyper
    backbone_params = learner.params()
    emb = backbone_embed(backbone_params, learner.backbone, support.images)
    rng = learner.fit_stream().generator("adapt")
    head = ParamSet(init_head(rng, learner.backbone.width, support.num_ways))
    y = support.labels
    state = AdamState.init(head, lr=hyper.val_lr)
    for _ in range(hyper.T):
        idx = minibatch_indices(rng, emb.shape[0], hyper.val_batch_size)
        tape = Tape()
        nodes = param_nodes(tape, head)
        loss = ops.softmax_cross_entropy(
            head_logits(nodes, tape.leaf(emb[idx])), y[idx]
        )
        grads = tape.backward(loss, nodes)
        head, state = adam_step(head, grads, state)
    merged = ParamSet(dict(backbone_params) | dict(head))
    return SoftmaxHeadPredictor(merged, learner.backbone.with_head(support.num_ways))
