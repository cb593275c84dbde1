from .archive import ArchiveError, load_archive, save_archive
from .gradcheck import GradcheckError, KinkError, gradcheck, gradcheck_random
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from .optim import AdamState, AdamW, ConfigError, adamw_step
from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    as_tensor,
    clamp,
    concat,
    conv2d,
    exp,
    gather,
    getitem,
    index_select,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    make,
    matmul,
    max_,
    maximum,
    mean,
    memory,
    minimum,
    no_grad,
    power,
    relu,
    report_kink,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    sum_,
    swapaxes,
    tanh,
    top_k,
    transpose,
    unbroadcast,
    watch_kinks,
    where,
)
