from mixedprefix.autodiff.graph import (
    IGNORE_TARGET,
    PRIMITIVES,
    ForwardPass,
    Graph,
    Node,
    Tensor,
    backward,
    checksum,
    forward,
)
from mixedprefix.autodiff.gradcheck import CheckReport, gradient_check, relative_error
from mixedprefix.autodiff.rng import RngStream

__all__ = [
    "IGNORE_TARGET",
    "PRIMITIVES",
    "CheckReport",
    "ForwardPass",
    "Graph",
    "Node",
    "RngStream",
    "Tensor",
    "backward",
    "checksum",
    "forward",
    "gradient_check",
    "relative_error",
]
