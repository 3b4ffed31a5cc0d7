from .tensor import (  # noqa: F401
    FlopCounter, NonFiniteError, ShapeError, Tape, Tensor, add, apply_op, backward, batch_norm,
    bce_with_logits, concat, dropout, embedding, exp, layer_norm, log, log_softmax, matmul,
    mean_pool, mul, relu, reshape, scale, sigmoid, slice_, softmax, stable_sigmoid, sub, sum_pool, transpose,
)
from .nn import (  # noqa: F401
    EVAL, BatchNorm, Context, Embedding, Initializer, LayerNorm, Linear, Module, Parameter, load_state,
)
from .optim import Adam, ConfigError, adam_step  # noqa: F401
from .gradcheck import GradCheckError, NondeterministicFunctionError, grad_check  # noqa: F401
