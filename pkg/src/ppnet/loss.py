"""Split prediction error and the adaptively weighted sequence loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError
from .tensor import Tensor

__all__ = ["LossConfig", "split_error", "adaptive_weight", "step_loss", "sequence_loss", "trace_loss"]

LAYER_SCOPES = ("layer0_only", "all_layers_mean")


@dataclass
class LossConfig:
    """``p == 0`` disables weighting and the loss is the plain mean error.

    ``lambda0`` weights the first formable error; later steps get 1.0.
    """

    p: float = 1000.0
    lambda0: float = 0.5
    detach_weight: bool = True
    layer_scope: str = "layer0_only"

    def __post_init__(self):
        if self.p < 0:
            raise ConfigError("p must be >= 0")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be >= 0")
        if self.layer_scope not in LAYER_SCOPES:
            raise ConfigError(f"layer_scope must be one of {LAYER_SCOPES}, got {self.layer_scope!r}")

    def step_weights(self, n: int) -> List[float]:
        return [self.lambda0] + [1.0] * (n - 1) if n else []


def split_error(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"split_error: prediction {pred.shape} vs target {target.shape}")
    return T.concat_channels(T.relu(T.sub(pred, target)), T.relu(T.sub(target, pred)))


def adaptive_weight(E: Tensor, p: float, detach: bool = True) -> Tensor:
    """W = p * E. With ``p == 0`` the weight is 1 everywhere (raw error)."""
    if p == 0:
        return Tensor(np.ones_like(E.data))
    if detach:
        return Tensor(E.data * E.dtype.type(p))
    return T.scale(E, p)


def step_loss(E: Tensor, config: LossConfig) -> Tensor:
    """mean(W * E) for one time step."""
    return T.mean_all(T.mul(adaptive_weight(E, config.p, config.detach_weight), E))


def sequence_loss(errors: Sequence[Tensor], config: LossConfig) -> Tensor:
    """Sum over steps of lambda_t * mean(W_t * E_t).

    ``errors`` holds one error tensor per formable step, first step first.
    """
    errors = list(errors)
    if not errors:
        raise ContractError("sequence_loss: no errors to aggregate")
    total = None
    for lam, E in zip(config.step_weights(len(errors)), errors):
        term = T.scale(step_loss(E, config), lam)
        total = term if total is None else T.add(total, term)
    return total


def trace_loss(trace, config: LossConfig) -> Tensor:
    """Training loss of a forward trace under ``config.layer_scope``."""
    if config.layer_scope == "layer0_only":
        return sequence_loss(trace.layer_errors(0), config)
    rows = [[E for E in row if E is not None] for row in trace.errors]
    rows = [row for row in rows if row]
    if not rows:
        raise ContractError("trace_loss: trace holds no errors")
    total = None
    for lam, row in zip(config.step_weights(len(rows)), rows):
        per_layer = None
        for E in row:
            term = step_loss(E, config)
            per_layer = term if per_layer is None else T.add(per_layer, term)
        term = T.scale(per_layer, lam / len(row))
        total = term if total is None else T.add(total, term)
    return total
