"""Minimal differentiable-computation substrate."""

from .gradcheck import finite_difference_check
from .layers import (
    MaskMode,
    bilstm_fuse,
    dense,
    embedding_lookup,
    feed_forward,
    init_attention,
    init_bilstm,
    init_dense,
    init_layer_norm,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)
from .params import Adam, CheckpointError, ParamStore, adam_step, load_checkpoint, save_checkpoint
from .tensor import Tensor

__all__ = [
    "Adam",
    "CheckpointError",
    "MaskMode",
    "ParamStore",
    "Tensor",
    "adam_step",
    "bilstm_fuse",
    "dense",
    "embedding_lookup",
    "feed_forward",
    "finite_difference_check",
    "init_attention",
    "init_bilstm",
    "init_dense",
    "init_layer_norm",
    "layer_norm",
    "load_checkpoint",
    "multi_head_attention",
    "positional_encoding",
    "save_checkpoint",
]
