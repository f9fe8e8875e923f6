from .tensor import (
    MASK_SENTINEL,
    ComputeGraph,
    DimensionError,
    NoLegalEntryError,
    Tensor,
    add,
    backward,
    clip,
    concat,
    exp,
    gather,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    masked_fill,
    masked_softmax,
    matmul,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    slice_,
    square,
    sub,
    sum_,
    tensor,
    transpose,
)
from .gradcheck import GradCheckContractError, grad_check
from .optim import Adam
from .checkpoint import MAGIC, CheckpointFormatError, load_checkpoint, save_checkpoint
