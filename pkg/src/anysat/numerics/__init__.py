"""Tensor arithmetic, reverse-mode differentiation, optimisation."""

from .gradcheck import GradCheckReport, grad_check
from .optim import (
    Constant,
    LrSchedule,
    MissingGradientError,
    OptimizerState,
    ReduceOnPlateau,
    WarmupCosine,
    adamw_step,
    make_schedule,
    schedule_lr,
)
from .tensor import (
    OP_NAMES,
    AxisOutOfRangeError,
    Parameter,
    ShapeMismatchError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cos,
    cosine_similarity,
    custom_op,
    div,
    eval_op,
    exp,
    gelu,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    normalize,
    power,
    reshape,
    sigmoid,
    sin,
    slice_,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)
