"""Symbolic regression with a masked discrete-diffusion expression generator
trained by risk-seeking, token-wise clipped policy optimisation."""

from .expr import Node, TokenLibrary, bfs_decode, bfs_encode, parse_prefix, simplify, to_infix
from .trainer import TrainerConfig, train

__version__ = "0.1.0"
__all__ = [
    "Node",
    "TokenLibrary",
    "TrainerConfig",
    "bfs_decode",
    "bfs_encode",
    "parse_prefix",
    "simplify",
    "to_infix",
    "train",
]
