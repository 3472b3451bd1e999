"""Training objective: weighted MSE plus cross-sectional correlation loss.

The correlation term is the negative Pearson coefficient computed across
the N nodes within each horizon step, averaged over steps, so the model
is rewarded for ranking the cross-section correctly rather than for
matching absolute levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParameterError, ShapeError, Tensor, mean, sqrt, sum_, take_lastaxis


@dataclass(frozen=True)
class LossConfig:
    lambda_m: float = 0.1
    eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_m < 0:
            raise ParameterError(f"lambda_m must be non-negative, got {self.lambda_m}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")


def _pair(y_hat, y) -> tuple[Tensor, Tensor]:
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} does not match target {y.shape}")
    return y_hat, y


def mse(y_hat, y) -> Tensor:
    """Mean squared error over every element of the N x t panel."""
    y_hat, y = _pair(y_hat, y)
    diff = y_hat - y
    return mean(diff * diff)


def pearson_loss(y_hat, y, eps: float = 1e-8) -> Tensor:
    """Negative Pearson correlation across nodes, averaged over horizon steps.

    A step where either side's variance falls below `eps` contributes 0
    instead of dividing by (near) zero.
    """
    y_hat, y = _pair(y_hat, y)
    if y_hat.ndim != 2:
        raise ShapeError(f"expected N x t inputs, got shape {y_hat.shape}")
    n, t = y_hat.shape
    if n < 2:
        raise ParameterError(f"Pearson loss needs at least 2 nodes, got {n}")

    total = Tensor(0.0)
    for step in range(t):
        a = take_lastaxis(y_hat, step)
        b = take_lastaxis(y, step)
        var_a = float(np.var(a.data))
        var_b = float(np.var(b.data))
        if var_a < eps or var_b < eps:
            continue
        ac = a - mean(a)
        bc = b - mean(b)
        r = sum_(ac * bc) / (sqrt(sum_(ac * ac)) * sqrt(sum_(bc * bc)))
        total = total - r
    return total * (1.0 / t)


def total_loss(y_hat, y, cfg: LossConfig = LossConfig()) -> Tensor:
    """lambda_m * MSE + negative cross-sectional Pearson correlation."""
    return mse(y_hat, y) * cfg.lambda_m + pearson_loss(y_hat, y, cfg.eps)
