from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    div,
    exp,
    gelu,
    getitem,
    gru_cell,
    layer_norm,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    relu,
    repeat_interleave,
    reshape,
    scaled_dot_product_attention,
    sigmoid,
    softmax,
    softmax_sorted,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
from .optim import EMA, Adam, AdamState, NonFiniteGradient, adam_step
from .io import load_weights, save_weights, architecture_hash, WeightFormatError
