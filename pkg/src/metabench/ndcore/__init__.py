"""Dense float64 tensor core: tape autodiff, primitives, Adam, conv backbones."""

from .tape import NumericError, ShapeError, Tape, TensorNode, all_finite, as_tensor
from .ops import PRIMITIVES, forward
from .params import (
    BLOB_NAME,
    MANIFEST_NAME,
    ParamSet,
    dump_params,
    load_params,
    param_nodes,
    parse_params,
    save_params,
)
from .optim import AdamState, adam_step
from .nn import ConvNetSpec, embed, head_logits, init_head, init_params, logits

from . import ops

__all__ = [
    "AdamState",
    "BLOB_NAME",
    "ConvNetSpec",
    "MANIFEST_NAME",
    "NumericError",
    "PRIMITIVES",
    "ParamSet",
    "ShapeError",
    "Tape",
    "TensorNode",
    "adam_step",
    "as_tensor",
    "dump_params",
    "embed",
    "forward",
    "head_logits",
    "init_head",
    "init_params",
    "load_params",
    "logits",
    "ops",
    "param_nodes",
    "parse_params",
    "save_params",
]
