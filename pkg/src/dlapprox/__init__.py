"""Post-training FLOP reduction for convolutional networks.

Lossless graph fusion followed by score-driven low-rank factorization
of convolution, deconvolution and fully-connected layers.
"""
from .builder import GraphBuilder
from .evaluator import compare_models, forward
from .flops import layer_flops, model_cost
from .fusion import run_lossless_pass
from .model_ir import LayerKind, Model, Node, validate
from .selector import SelectorConfig, optimize_model
from .serialization import load_model, read_model, save_model, write_model

__all__ = [
    "GraphBuilder",
    "LayerKind",
    "Model",
    "Node",
    "SelectorConfig",
    "compare_models",
    "forward",
    "layer_flops",
    "load_model",
    "model_cost",
    "optimize_model",
    "read_model",
    "run_lossless_pass",
    "save_model",
    "validate",
    "write_model",
]

__version__ = "0.1.0"
