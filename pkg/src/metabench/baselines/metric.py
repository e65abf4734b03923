"""Matching Networks and Prototypical Networks.

Matching Networks: L2-normalize support and query embeddings, take the
cosine similarity matrix, multiply by the one-hot support labels to get
per-class summed similarities, and classify by row-softmax. Prototypical
Networks: per-class mean embeddings, logits are negative squared Euclidean
distances to the prototypes. Both meta-train episodically with
cross-entropy on those probability rows.
"""

from __future__ import annotations

import numpy as np

from ..ndcore import ParamSet, Tape, embed, ops, param_nodes
from ..sampler import SupportSet, Task
from .common import (
    BaselineLearner,
    MatchingPredictor,
    PrototypePredictor,
    backbone_embed,
    class_mean_matrix,
    nchw,
    one_hot,
)
from .episodic import EpisodicMetaLearner

MATCHING = "matching-networks"
PROTOTYPICAL = "prototypical-networks"


def _embed_episode(tape, nodes, task: Task, spec):
    """Embed support and query in one batch; split rows by selector matmuls."""
    x = np.concatenate(
        [task.dataset.gather(task.support_refs), task.dataset.gather(task.query_refs)]
    )
    e_all = embed(tape, nodes, tape.leaf(nchw(x)), spec)
    n_s = len(task.support_refs)
    n_q = len(task.query_refs)
    sel_s = np.zeros((n_s, n_s + n_q))
    sel_s[np.arange(n_s), np.arange(n_s)] = 1.0
    sel_q = np.zeros((n_q, n_s + n_q))
    sel_q[np.arange(n_q), n_s + np.arange(n_q)] = 1.0
    return ops.matmul(tape.leaf(sel_s), e_all), ops.matmul(tape.leaf(sel_q), e_all)


class MatchingNetworks(EpisodicMetaLearner):
    method_id = MATCHING

    def task_gradient(self, params: ParamSet, task: Task) -> dict:
        tape = Tape()
        nodes = param_nodes(tape, params)
        e_s, e_q = _embed_episode(tape, nodes, task, self.backbone)
        sims = ops.pairwise_cosine_similarity(
            ops.l2_normalize_rows(e_q), ops.l2_normalize_rows(e_s)
        )
        onehot = tape.leaf(one_hot(task.support_labels, task.num_ways))
        scores = ops.matmul(sims, onehot)
        loss = ops.softmax_cross_entropy(scores, task.query_labels)
        return tape.backward(loss, nodes)


class PrototypicalNetworks(EpisodicMetaLearner):
    method_id = PROTOTYPICAL

    def task_gradient(self, params: ParamSet, task: Task) -> dict:
        tape = Tape()
        nodes = param_nodes(tape, params)
        e_s, e_q = _embed_episode(tape, nodes, task, self.backbone)
        means = tape.leaf(class_mean_matrix(task.support_labels, task.num_ways))
        prototypes = ops.matmul(means, e_s)
        logits = ops.scalar_mul(
            ops.pairwise_squared_euclidean(e_q, prototypes), -1.0
        )
        loss = ops.softmax_cross_entropy(logits, task.query_labels)
        return tape.backward(loss, nodes)


def fit_matching(learner: BaselineLearner, support: SupportSet) -> MatchingPredictor:
    params = learner.params()
    emb = backbone_embed(params, learner.backbone, support.images)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms <= 1e-300):
        raise FloatingPointError("zero-norm support embedding")
    return MatchingPredictor(
        params,
        learner.backbone,
        support_embeddings=emb / norms,
        support_onehot=one_hot(support.labels, support.num_ways),
    )


def fit_prototypical(learner: BaselineLearner, support: SupportSet) -> PrototypePredictor:
    params = learner.params()
    emb = backbone_embed(params, learner.backbone, support.images)
    prototypes = class_mean_matrix(support.labels, support.num_ways) @ emb
    return PrototypePredictor(params, learner.backbone, prototypes)
