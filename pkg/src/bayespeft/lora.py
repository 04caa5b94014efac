"""Low-rank adapters: effective weight W0 + gamma * A @ B.T.

``A`` has shape (d_out, r) and ``B`` has shape (d_in, r). ``gamma`` is used
as given; there is no implicit division by the rank.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Node, Tape, seeded_gaussian

DEFAULT_RANK = 16
DEFAULT_GAMMA = 2.0
INIT_STD = 0.02


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    gamma: float
    rank: int

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")
        if self.A.shape[1] != self.rank or self.B.shape[1] != self.rank:
            raise ShapeError(f"adapter factors {self.A.shape}, {self.B.shape} disagree with rank {self.rank}")


def attach_lora(layer, rank: int = DEFAULT_RANK, gamma: float = DEFAULT_GAMMA, seed: int = 0):
    """Attach a fresh adapter to ``layer`` (A ~ N(0, 0.02^2), B = 0) and freeze W0."""
    if layer.adapter is not None:
        raise ContractError(f"layer {layer.name!r} already has an adapter")
    d_out, d_in = layer.weight.shape
    if rank < 1 or rank > min(d_out, d_in):
        raise ContractError(f"rank {rank} invalid for a {d_out}x{d_in} layer")
    layer.adapter = LoraAdapter(
        A=seeded_gaussian(d_out, rank, 0.0, INIT_STD, seed),
        B=np.zeros((d_in, rank)),
        gamma=float(gamma),
        rank=rank,
    )
    layer.trainable = False
    return layer


def delta_weight(layer) -> np.ndarray:
    """gamma * A @ B.T for an adapted layer."""
    ad = layer.adapter
    if ad is None:
        raise ContractError(f"layer {layer.name!r} has no adapter")
    return ad.gamma * (ad.A @ ad.B.T)


def delta_weight_node(tape: Tape, a: Node, b: Node, gamma: float) -> Node:
    """Differentiable gamma * A @ B.T on ``tape``."""
    return tape.scale(tape.matmul(a, tape.transpose(b)), gamma)


def merge(layer):
    """Fold the adapter into the base weight and drop it."""
    if layer.adapter is None:
        raise ContractError(f"layer {layer.name!r} has no adapter to merge")
    layer.weight = layer.weight + delta_weight(layer)
    layer.adapter = None
    return layer


def trainable_fraction(d_out: int, d_in: int, rank: int) -> float:
    return rank * (d_out + d_in) / (d_out * d_in)
