from .tensor import (
    Tensor, Tape, AutodiffError, ShapeError, NonFiniteError,
    astensor, parameter, backward, forward, PRIMITIVES,
    set_default_dtype, get_default_dtype,
    add, subtract, multiply, divide, negate, power, tabs, maximum, minimum,
    sigmoid, softplus, relu, tsin, tcos, texp, tlog, tsqrt, softmax, l2norm,
    tsum, tmean, reshape, swapaxes, tslice, concat, matmul,
    gather, scatter_add, exclusive_cumprod,
)
from .params import ParameterStore, Adam, save_checkpoint, load_checkpoint
from .gradcheck import check_gradients
