from .autodiff import Tensor, backward, no_grad
from .gradcheck import finite_diff_check
from .layers import ffn, layer_norm, linear, multi_head_attention, softmax_rows
from .params import ParamStore

__all__ = [
    "Tensor", "backward", "no_grad", "finite_diff_check", "ffn", "layer_norm",
    "linear", "multi_head_attention", "softmax_rows", "ParamStore",
]
