from canseg.tensor.gradcheck import grad_check, param_errors
from canseg.tensor.tensor import CostTracer, Graph, Precision, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "CostTracer",
    "Graph",
    "Precision",
    "Tensor",
    "backward",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "param_errors",
]
