"""Graph-convolutional diffusion of modality embeddings over the shared adjacency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .kgdata import NormalizedAdjacency
from .tensor import Tensor


@dataclass
class DiffusionConfig:
    alpha: float = 0.1     # residual retention
    beta: float = 0.9      # neighbourhood propagation
    k: int = 4
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if gamma(self) <= 0:
            raise ValueError("alpha and beta give a zero stabilisation factor")


def gamma(config: DiffusionConfig) -> float:
    """beta^k + alpha * sum_{c<k} beta^c, summed term by term."""
    acc = 0.0
    term = 1.0
    for _ in range(config.k):
        acc += term
        term *= config.beta
    return term + config.alpha * acc


def diffuse(h0: Tensor, adj: NormalizedAdjacency, config: DiffusionConfig,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """k steps of H <- beta * A H + alpha * H0, scaled by 1/gamma.

    Dropout is applied to the input before the first step and to the output.
    """
    if adj.dimension != h0.rows:
        raise ValueError(f"adjacency is {adj.dimension}x{adj.dimension}, features have {h0.rows} rows")
    base = T.dropout(h0, config.dropout_rate, training, rng)
    h = base
    for _ in range(config.k):
        h = T.spmm(adj.entries, h) * config.beta + base * config.alpha
    return T.dropout(h * (1.0 / gamma(config)), config.dropout_rate, training, rng)
