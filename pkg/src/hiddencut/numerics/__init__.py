"""Float64 dense kernels and a small reverse-mode tape."""
from . import autodiff, kernels
from .autodiff import Node, backward, const, param
from .dense import LAYER_NORM_EPS, gelu, layer_norm, matmul, softmax_rows
from .gradcheck import grad_check

__all__ = [
    "LAYER_NORM_EPS", "Node", "autodiff", "backward", "const", "gelu", "grad_check",
    "kernels", "layer_norm", "matmul", "param", "softmax_rows",
]
