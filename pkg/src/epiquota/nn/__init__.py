from .tape import Tensor, NumericError, concat
from .optim import Adam
from . import layers

__all__ = ["Tensor", "NumericError", "concat", "Adam", "layers"]
