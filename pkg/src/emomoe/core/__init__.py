from .tensor import (
    ContractViolation,
    NumericFault,
    Tensor,
    backward,
    no_grad,
)
from .optim import Adam
from .rng import RngStream
from .linalg import kmeans, orthogonal_init

__all__ = [
    "Adam",
    "ContractViolation",
    "NumericFault",
    "RngStream",
    "Tensor",
    "backward",
    "kmeans",
    "no_grad",
    "orthogonal_init",
]
