from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    div,
    embedding_lookup,
    exp,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    leaky_relu,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    power,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where,
    zero_grad,
)
from .gradcheck import GradCheckReport, finite_difference_check
from .nn import BatchNorm1d, LayerNorm, Linear, Module, MultiHeadSelfAttention, sinusoidal_embedding
from .optim import AdamW, AdamWState, adamw_step
