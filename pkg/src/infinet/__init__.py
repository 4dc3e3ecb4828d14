"""InfiNet: infinite-order feature interactions through an RBF kernel, in numpy."""

from .autograd import Node, Parameter, backward, grad_check, no_grad
from .interaction import Add, Hadamard, Polynomial, Rbf, interact, interaction_dim
from .model import (BlockConfig, DemoNet, InfiBlock, InfiNet, ModelConfig, build_demo_net, build_model,
                    count_parameters, get_variant, load_checkpoint, save_checkpoint)
from .tensor import Tensor
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Add", "BlockConfig", "DemoNet", "Hadamard", "InfiBlock", "InfiNet", "ModelConfig", "Node",
    "Parameter", "Polynomial", "Rbf", "Tensor", "TrainConfig", "backward", "build_demo_net",
    "build_model", "count_parameters", "evaluate", "get_variant", "grad_check", "interact",
    "interaction_dim", "load_checkpoint", "no_grad", "save_checkpoint", "train", "__version__",
]
