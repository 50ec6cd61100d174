from . import functional
from .gradcheck import check_gradients, rel_error
from .optim import SGD, SgdState, cosine_lr, sgd_step
from .tensor import (NumericalError, ShapeError, Tensor, as_tensor, backward, build_tape,
                     concat, finite_checks, no_grad, stack, where)

__all__ = [
    "SGD", "NumericalError", "SgdState", "ShapeError", "Tensor", "as_tensor", "backward",
    "build_tape", "check_gradients", "concat", "cosine_lr", "finite_checks", "functional",
    "no_grad", "rel_error", "sgd_step", "stack", "where",
]
