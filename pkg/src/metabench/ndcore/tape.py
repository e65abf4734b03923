"""Recording tape for reverse-mode differentiation over dense float64 arrays.

A Tape is a single-use, append-only sequence of operation records. Every
operation appends one node whose operands are earlier nodes, so the tape is
topologically ordered by construction and the backward pass is a single
reverse sweep. Tensors are plain C-contiguous float64 numpy arrays; a
TensorNode is a lightweight handle (tape, node id, value).

A tape and the parameters registered on it belong to one logical context and
must not be shared across threads. The arrays themselves are treated as
immutable once recorded.
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation's shape rule."""


class NumericError(ValueError):
    """Non-finite values or numerically invalid inputs (e.g. zero-norm rows)."""


def all_finite(arr: np.ndarray) -> bool:
    """Cheap finiteness test: NaN poisons min(), infinities survive it."""
    if arr.size == 0:
        return True
    return bool(np.isfinite(arr.min()) and np.isfinite(arr.max()))


def as_tensor(value, check_finite: bool = True) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if check_finite and not all_finite(arr):
        raise NumericError("tensor contains non-finite values")
    return arr


class TensorNode:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "needs_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, needs_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"TensorNode(index={self.index}, shape={self.value.shape})"


class _Node:
    __slots__ = ("value", "parents", "backward_fn")

    def __init__(self, value, parents, backward_fn):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation record supporting one reverse-mode sweep.

    Gradients are accumulated in exact reverse insertion order, which makes
    the backward pass deterministic: identical op sequences on identical
    inputs produce bit-identical gradients.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value, needs_grad: bool = False) -> TensorNode:
        """Record an input tensor on the tape.

        Constants default to needs_grad=False so reverse rules can skip the
        corresponding gradient work; parameters are recorded with True.
        """
        arr = as_tensor(value)
        index = len(self._nodes)
        self._nodes.append(_Node(arr, (), None))
        return TensorNode(self, index, arr, needs_grad)

    def _record(
        self,
        value: np.ndarray,
        parents: Sequence[TensorNode],
        backward_fn: Optional[Callable],
    ) -> TensorNode:
        needs_grad = False
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands recorded on different tapes")
            needs_grad = needs_grad or p.needs_grad
        index = len(self._nodes)
        self._nodes.append(
            _Node(value, tuple(p.index for p in parents), backward_fn if needs_grad else None)
        )
        return TensorNode(self, index, value, needs_grad)

    def backward(
        self, loss: TensorNode, params: Mapping[str, TensorNode]
    ) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss with respect to every entry of ``params``.

        Parameters not reachable from the loss get zero gradients of matching
        shape. Raises ShapeError if the loss is not a scalar.
        """
        if loss.tape is not self:
            raise ValueError("loss recorded on a different tape")
        if not self._nodes:
            raise ValueError("empty tape")
        if loss.value.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss.index] = np.ones((), dtype=np.float64)
        for i in range(loss.index, -1, -1):
            node = self._nodes[i]
            g = grads[i]
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for pidx, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if grads[pidx] is None:
                    grads[pidx] = pg
                else:
                    grads[pidx] = grads[pidx] + pg
        out = {}
        for path, node in params.items():
            if node.tape is not self:
                raise ValueError(f"parameter {path!r} recorded on a different tape")
            g = grads[node.index]
            out[path] = np.zeros_like(node.value) if g is None else g
        return out
