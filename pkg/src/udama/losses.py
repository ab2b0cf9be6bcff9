"""Regression, coarse-domain and fine-domain losses, and the signed objective.

Each loss exists in two forms: a tape form (``*_tape``) used during training,
and a float-returning convenience wrapper that evaluates the very same tape
code on constant inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from udama.errors import ConfigError, ContractViolation
from udama.numerics import Tape, Tensor

GLL_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights of the signed objective ``alpha*mse - lambda1*cse - lambda2*gll``."""

    alpha: float = 0.01
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise ConfigError(
                f"lambda1 + lambda2 must equal 1 (got {self.lambda1} + {self.lambda2})"
            )

    @classmethod
    def regression_only(cls, alpha: float = 0.01) -> "LossWeights":
        """Both discriminator weights zero.

        Deliberately bypasses the sum-to-one rule; it exists so adaptation
        can be checked against plain fine-tuning.
        """
        if not alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {alpha}")
        w = object.__new__(cls)
        object.__setattr__(w, "alpha", alpha)
        object.__setattr__(w, "lambda1", 0.0)
        object.__setattr__(w, "lambda2", 0.0)
        return w


def _column(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr.reshape(-1, 1)


def mse_tape(tape: Tape, pred: Tensor, truth) -> Tensor:
    truth = _column(truth)
    if pred.value.size != truth.size:
        raise ContractViolation(f"mse: {pred.value.size} predictions vs {truth.size} targets")
    if truth.size == 0:
        raise ContractViolation("mse of empty input")
    return tape.mean(tape.square(tape.sub(pred, Tensor(truth))))


def cross_entropy_tape(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Mean two-class cross entropy from raw logits of shape (n, 2).

    ``-log softmax(l)[y] = softplus(l[1-y] - l[y])``, which is the two-term
    log-sum-exp evaluated without overflow.
    """
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ContractViolation("cross entropy of empty input")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractViolation("cross entropy labels must be 0 or 1")
    if logits.value.ndim != 2 or logits.shape != (labels.size, 2):
        raise ContractViolation(f"logits{logits.shape} vs {labels.size} labels")
    margin = tape.sub(tape.slice(logits, 1, 2, axis=1), tape.slice(logits, 0, 1, axis=1))
    sign = Tensor(_column(1.0 - 2.0 * labels))
    return tape.mean(tape.softplus(tape.mul(margin, sign)))


def gaussian_nll_tape(tape: Tape, mu: Tensor, sigma2: Tensor, target) -> Tensor:
    """Mean ``0.5 * (log v + (target - mu)^2 / v)`` with ``v = max(sigma2, 1e-6)``."""
    target = _column(target)
    if np.any(np.isnan(target)) or np.any(np.isnan(mu.value)) or np.any(np.isnan(sigma2.value)):
        raise ContractViolation("gaussian nll received NaN")
    if target.size == 0:
        raise ContractViolation("gaussian nll of empty input")
    var = tape.maximum(sigma2, GLL_FLOOR)
    resid = tape.square(tape.sub(Tensor(target), mu))
    return tape.scale(tape.mean(tape.add(tape.log(var), tape.div(resid, var))), 0.5)


def mse_loss(pred, truth) -> float:
    pred, truth = _column(pred), _column(truth)
    if pred.size != truth.size or pred.size == 0:
        raise ContractViolation("mse needs two equal-length non-empty vectors")
    return mse_tape(Tape(record=False), Tensor(pred), truth).item()


def cross_entropy_loss(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    return cross_entropy_tape(Tape(record=False), Tensor(logits.reshape(-1, 2)), labels).item()


def gaussian_nll_loss(mu, sigma2, target) -> float:
    mu, sigma2 = _column(mu), _column(sigma2)
    if np.any(sigma2 <= 0):
        raise ContractViolation("sigma2 must be positive")
    return gaussian_nll_tape(Tape(record=False), Tensor(mu), Tensor(sigma2), target).item()


def combined_loss(l_mse: float, l_cse: float, l_gll: float, w: LossWeights) -> float:
    """Signed objective as logged: ``alpha*mse - lambda1*cse - lambda2*gll``.

    Training minimises ``alpha*mse + lambda1*cse + lambda2*gll`` and gets the
    minus signs on the encoder side from gradient reversal.
    """
    if not isinstance(w, LossWeights):
        raise ConfigError("combined_loss needs LossWeights")
    value = w.alpha * l_mse - w.lambda1 * l_cse - w.lambda2 * l_gll
    if math.isnan(value):
        raise ContractViolation("combined loss is NaN")
    return value
