from .tensor import Tensor, GraphStateError, ShapeError, concat, no_grad
from .layers import (Module, Linear, MLP, Attention, SetAbstraction,
                     FeaturePropagation, UserEmbeddingTable,
                     farthest_point_sample, ball_query, interpolation_weights)
from .optim import SGD, Adam, make_optimizer
from . import checkpoint
from .gradcheck import max_relative_error, numeric_grad
