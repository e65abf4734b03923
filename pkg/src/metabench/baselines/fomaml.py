"""First-order MAML.

Per task: T full-batch gradient descent steps on the support loss at step
size base_lr, then the query cross-entropy gradient is taken at the adapted
parameters and applied to the initial parameters as-is (the first-order
approximation drops all second derivatives). Outer gradients are averaged
over meta_batch_size tasks and applied with Adam.

The meta-learned model carries a head sized for the meta-training ways;
when a meta-test task has a different number of ways the head is replaced
by a zero-initialized one before the inner loop.
"""

from __future__ import annotations

import numpy as np

from ..ndcore import ConvNetSpec, ParamSet, Tape, logits, ops, param_nodes
from ..sampler import SupportSet, Task
from .common import BaselineLearner, SoftmaxHeadPredictor, nchw
from .episodic import EpisodicMetaLearner

FOMAML_ID = "fomaml"


def _support_loss_grads(
    params: ParamSet, spec: ConvNetSpec, x: np.ndarray, y: np.ndarray
) -> dict:
    tape = Tape()
    nodes = param_nodes(tape, params)
    loss = ops.softmax_cross_entropy(logits(tape, nodes, tape.leaf(x), spec), y)
    return tape.backward(loss, nodes)


def inner_adapt(
    params: ParamSet,
    spec: ConvNetSpec,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    base_lr: float,
) -> ParamSet:
    """T plain gradient-descent steps on the full support batch."""
    for _ in range(steps):
        grads = _support_loss_grads(params, spec, x, y)
        params = ParamSet(
            {path: value - base_lr * grads[path] for path, value in params.items()}
        )
    return params


def zero_head(params: ParamSet, width: int, n_classes: int) -> ParamSet:
    """Swap in an all-zero head of the requested width."""
    entries = {k: v for k, v in params.items() if not k.startswith("head.")}
    entries["head.weight"] = np.zeros((width, n_classes))
    entries["head.bias"] = np.zeros(n_classes)
    return ParamSet(entries)


class FOMAML(EpisodicMetaLearner):
    method_id = FOMAML_ID

    def __init__(self, *args, train_ways: int = 5, **kwargs):
        super().__init__(*args, **kwargs)
        self.train_ways = int(train_ways)
        # the learner serializes the headed spec so fit can rebuild it
        self.backbone = self.backbone.with_head(self.train_ways)

    def _train_spec(self) -> ConvNetSpec:
        return self.backbone

    def _adopt_pretrained(self, backbone_params: ParamSet) -> ParamSet:
        return zero_head(backbone_params, self.backbone.width, self.train_ways)

    def task_gradient(self, params: ParamSet, task: Task) -> dict:
        spec = self.backbone
        x_s = nchw(task.dataset.gather(task.support_refs))
        adapted = inner_adapt(
            params, spec, x_s, task.support_labels, self.hyper.T, self.hyper.base_lr
        )
        tape = Tape()
        nodes = param_nodes(tape, adapted)
        x_q = tape.leaf(nchw(task.dataset.gather(task.query_refs)))
        loss = ops.softmax_cross_entropy(
            logits(tape, nodes, x_q, spec), task.query_labels
        )
        # gradient at the adapted weights, applied to the initial weights
        return tape.backward(loss, nodes)


def fit_fomaml(learner: BaselineLearner, support: SupportSet) -> SoftmaxHeadPredictor:
    spec = learner.backbone
    params = learner.params()
    if spec.head_classes != support.num_ways:
        spec = spec.with_head(support.num_ways)
        params = zero_head(params, spec.width, support.num_ways)
    adapted = inner_adapt(
        params,
        spec,
        nchw(support.images),
        support.labels,
        learner.hyper.T,
        learner.hyper.base_lr,
    )
    return SoftmaxHeadPredictor(adapted, spec)
