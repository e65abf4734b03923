"""Train-from-scratch baseline: no meta-training at all.

Each task trains the whole backbone plus a fresh N-way head on the support
set alone: T Adam iterations of cross-entropy on support mini-batches. The
starting backbone weights are the seed-determined random initialization
captured when the Learner is created.
"""

from __future__ import annotations

from typing import Optional

from ..api import MetaLearner, NO_META_TRAINING
from ..ndcore import (
    AdamState,
    ConvNetSpec,
    ParamSet,
    Tape,
    adam_step,
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
    minibatch_indices,
    nchw,
)

TFS_ID = "train-from-scratch"


class TrainFromScratch(MetaLearner):
    data_mode = NO_META_TRAINING

    def __init__(
        self,
        backbone: ConvNetSpec,
        hyper: Hyperparams,
        seed: int = 0,
        initial_backbone: Optional[ParamSet] = None,
        **_unused,
    ):
        self.backbone = backbone
        self.hyper = hyper
        self.seed = int(seed)
        self.initial_backbone = initial_backbone

    def meta_fit(self, meta_train_source, meta_valid_source) -> BaselineLearner:
        # returns immediately; the sources are never consumed
        if self.initial_backbone is not None:
            params = self.initial_backbone.copy()
        else:
            rng = RngStream(self.seed).generator("init", TFS_ID)
            params = init_params(self.backbone, rng)
        return BaselineLearner.from_params(
            TFS_ID, self.backbone, self.hyper, self.seed, params
        )


def fit_tfs(learner: BaselineLearner, support: SupportSet) -> SoftmaxHeadPredictor:
    hyper = learner.hyper
    spec = learner.backbone.with_head(support.num_ways)
    rng = learner.fit_stream().generator("adapt")
    params = ParamSet(
        dict(learner.params())
        | init_head(rng, spec.width, support.num_ways)
    )
    x = nchw(support.images)
    y = support.labels
    state = AdamState.init(params, lr=hyper.lr)
    for _ in range(hyper.T):
        idx = minibatch_indices(rng, x.shape[0], hyper.batch_size)
        tape = Tape()
        nodes = param_nodes(tape, params)
        loss = ops.softmax_cross_entropy(
            logits(tape, nodes, tape.leaf(x[idx]), spec), y[idx]
        )
        grads = tape.backward(loss, nodes)
        params, state = adam_step(params, grads, state)
    return SoftmaxHeadPredictor(params, spec)
