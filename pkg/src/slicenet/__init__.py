"""SliceNet: depthwise-separable convolutional sequence-to-sequence models in numpy."""

from .convops import ConvSpec, Mode, Padding
from .decoding import DecodeConfig, beam_search, greedy_decode, score_sequence
from .kernels import BACKEND
from .model import ModelConfig, SliceNet, load_checkpoint, save_checkpoint
from .tensor import Rng, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConvSpec",
    "DecodeConfig",
    "Mode",
    "ModelConfig",
    "Padding",
    "Rng",
    "SliceNet",
    "Tape",
    "Tensor",
    "beam_search",
    "greedy_decode",
    "load_checkpoint",
    "save_checkpoint",
    "score_sequence",
]
