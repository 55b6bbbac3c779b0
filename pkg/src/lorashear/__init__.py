"""Structured pruning of LoRA-augmented transformers at desk scale.

Pipeline: trace-graph discovery of minimally removal structures ->
knowledge-distribution analysis -> progressive half-space pruning over
LoRA factors -> structural compression -> dynamic knowledge recovery.
"""

__version__ = "0.1.0"

from .model import LoraModel, ModelConfig, build_model  # noqa: F401
from .tensor import Tape, Tensor  # noqa: F401
