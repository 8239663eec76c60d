"""Computationally efficient visual saliency engine.

A MobileNetV2 feature backbone with 18 intermediate taps feeds one of two
lightweight decoders (channel concatenation or top-down addition) to produce a
full-resolution saliency map. The package also provides the distillation
losses used to train the model from teacher pseudo-labels, a saliency metric
suite, a parameter/FLOP analyzer, and a latency benchmark.
"""

from .tensor import Tensor, Tape, backward, grad_check
from .network import (NetworkGraph, WeightStore, build_backbone, build_fastsal,
                      fold_batch_norm, group_feature_blocks, init_weights,
                      load_weights, save_weights)

__all__ = [
    "Tensor", "Tape", "backward", "grad_check",
    "NetworkGraph", "WeightStore", "build_backbone", "build_fastsal",
    "fold_batch_norm", "group_feature_blocks", "init_weights",
    "load_weights", "save_weights",
]

__version__ = "0.1.0"
