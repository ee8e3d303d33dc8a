"""Small differentiable-network substrate: autodiff, layers, models, SGD."""

from . import autodiff, layers
from .autodiff import Tape, Var
from .checkpoint import checkpoint_bytes, load_checkpoint, loads_checkpoint, save_checkpoint
from .model import ARCHITECTURES, DenseStack, ForwardResult, LayeredModel, register_architecture, sgd_step


def forward(model, x, capture=()):
    return model.forward(x, capture)


def backward(tape, loss, seed=None):
    """Gradients of ``loss`` for every parameter touched under ``tape``."""
    return tape.gradient(loss, seed)


__all__ = [
    "ARCHITECTURES", "DenseStack", "ForwardResult", "LayeredModel", "Tape", "Var",
    "autodiff", "backward", "checkpoint_bytes", "forward", "layers", "load_checkpoint",
    "loads_checkpoint", "register_architecture", "save_checkpoint", "sgd_step",
]
