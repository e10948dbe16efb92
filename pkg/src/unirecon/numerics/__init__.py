from .checkpoint import CheckpointManifest, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .params import Adam, ParameterStore, clip_grad_norm
from .rng import SeededRng, sample_gaussian
from .tensor import (
    MASK_VALUE,
    Tensor,
    concat,
    embedding,
    gaussian_log_density,
    layer_norm,
    log_softmax,
    matmul,
    minimum,
    no_grad,
    precision,
    softmax,
    stack,
    tensor,
    where,
)

__all__ = [
    "Adam",
    "CheckpointManifest",
    "MASK_VALUE",
    "ParameterStore",
    "SeededRng",
    "Tensor",
    "clip_grad_norm",
    "concat",
    "embedding",
    "gaussian_log_density",
    "grad_check",
    "layer_norm",
    "load_checkpoint",
    "log_softmax",
    "matmul",
    "minimum",
    "no_grad",
    "precision",
    "sample_gaussian",
    "save_checkpoint",
    "softmax",
    "stack",
    "tensor",
    "where",
]
