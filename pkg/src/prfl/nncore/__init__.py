"""Dense numerics: models, reverse-mode gradients, SGD and SVD."""
from .linalg import svd, truncated_svd
from .model import (
    BACKBONE,
    HEAD,
    ForwardOutput,
    ModelParams,
    ModelSpec,
    Param,
    accuracy,
    build_model,
    cross_entropy,
    cross_entropy_node,
    forward,
    forward_on_tape,
    sgd_step,
    softmax,
    zeros_like_model,
)
from .tape import Tape, backward

__all__ = [
    "BACKBONE", "HEAD", "ForwardOutput", "ModelParams", "ModelSpec", "Param", "Tape",
    "accuracy", "backward", "build_model", "cross_entropy", "cross_entropy_node", "forward",
    "forward_on_tape", "sgd_step", "softmax", "svd", "truncated_svd", "zeros_like_model",
]
