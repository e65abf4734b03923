"""Configurable conv-net backbone built from the primitive set.

The default architecture is a "conv-4": four conv3x3 -> relu -> maxpool2x2
blocks followed by global average pooling, giving one embedding row per
image. An optional linear head maps embeddings to class logits. Weights use
Kaiming-uniform fan-in scaling (bound sqrt(6/fan_in), variance 2/fan_in);
biases start at zero, so initialization is fully determined by the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .params import ParamSet
from .tape import ShapeError, Tape, TensorNode


@dataclass(frozen=True)
class ConvNetSpec:
    """Backbone description; head_classes=None means embedding-only."""

    input_side: int = 32
    in_channels: int = 3
    width: int = 64
    depth: int = 4
    kernel: int = 3
    head_classes: int | None = None

    @property
    def embedding_dim(self) -> int:
        return self.width

    def validate(self) -> None:
        if self.input_side < 2**self.depth:
            raise ShapeError(
                f"input side {self.input_side} too small for {self.depth} pooling stages"
            )
        if self.input_side % (2**self.depth):
            raise ShapeError(
                f"input side {self.input_side} must be divisible by {2 ** self.depth}"
            )
        if self.width < 1 or self.depth < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"invalid backbone spec {self}")

    def with_head(self, n_classes: int | None) -> "ConvNetSpec":
        return replace(self, head_classes=n_classes)

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "width": self.width,
            "depth": self.depth,
            "kernel": self.kernel,
            "head_classes": self.head_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvNetSpec":
        return cls(**d)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ConvNetSpec, rng: np.random.Generator) -> ParamSet:
    """Draw backbone (and head, if any) weights; draw order is fixed."""
    spec.validate()
    entries = {}
    cin = spec.in_channels
    k = spec.kernel
    for i in range(1, spec.depth + 1):
        fan_in = cin * k * k
        entries[f"block{i}.weight"] = kaiming_uniform(
            rng, (spec.width, cin, k, k), fan_in
        )
        entries[f"block{i}.bias"] = np.zeros(spec.width)
        cin = spec.width
    if spec.head_classes is not None:
        entries["head.weight"] = kaiming_uniform(
            rng, (spec.width, spec.head_classes), spec.width
        )
        entries["head.bias"] = np.zeros(spec.head_classes)
    return ParamSet(entries)


def init_head(rng: np.random.Generator, width: int, n_classes: int) -> dict:
    return {
        "head.weight": kaiming_uniform(rng, (width, n_classes), width),
        "head.bias": np.zeros(n_classes),
    }


def embed(
    tape: Tape, nodes: dict[str, TensorNode], x: TensorNode, spec: ConvNetSpec
) -> TensorNode:
    """Backbone forward pass: NCHW image batch -> (B, width) embeddings."""
    out = x
    for i in range(1, spec.depth + 1):
        out = ops.conv2d(out, nodes[f"block{i}.weight"])
        out = ops.add(out, nodes[f"block{i}.bias"])
        out = ops.relu(out)
        out = ops.max_pool_2x2(out)
    return ops.global_average_pool(out)


def head_logits(
    nodes: dict[str, TensorNode], embeddings: TensorNode
) -> TensorNode:
    out = ops.matmul(embeddings, nodes["head.weight"])
    return ops.add(out, nodes["head.bias"])


def logits(
    tape: Tape, nodes: dict[str, TensorNode], x: TensorNode, spec: ConvNetSpec
) -> TensorNode:
    if spec.head_classes is None:
        raise ShapeError("backbone spec has no head")
    return head_logits(nodes, embed(tape, nodes, x, spec))
