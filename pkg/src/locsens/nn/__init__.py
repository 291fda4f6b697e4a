"""Minimal differentiable building blocks: dense/ReLU/L2-normalize/group-norm
layers with exact backward passes, Adam, finite-difference gradient checking,
and binary checkpoints."""

from .checkpoint import CheckpointError, load_params, save_params
from .gradcheck import GradCheckReport, gradcheck
from .layers import (
    Dense,
    GroupNorm,
    default_group_count,
    dense_backward,
    dense_forward,
    group_norm_backward,
    group_norm_forward,
    l2_normalize,
    l2norm_backward,
    l2norm_forward,
    relu_backward,
    relu_forward,
)
from .optim import AdamState, TrainingDivergence, adam_step, clip_grad_norm, global_grad_norm
from .precision import default_dtype, set_default_dtype

__all__ = [
    "AdamState",
    "CheckpointError",
    "Dense",
    "GradCheckReport",
    "GroupNorm",
    "TrainingDivergence",
    "adam_step",
    "clip_grad_norm",
    "default_dtype",
    "default_group_count",
    "dense_backward",
    "dense_forward",
    "global_grad_norm",
    "gradcheck",
    "group_norm_backward",
    "group_norm_forward",
    "l2_normalize",
    "l2norm_backward",
    "l2norm_forward",
    "load_params",
    "relu_backward",
    "relu_forward",
    "save_params",
    "set_default_dtype",
]
