"""Angular margin function and classification losses.

The margin function is the multiplicative-angle form used by angular softmax:
``psi(theta) = (-1)^k cos(m theta) - 2k`` for ``theta in [k pi/m, (k+1) pi/m]``.
At an interval boundary the left interval is used; the derivative in theta is
zero there from either side, so the choice only matters for bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev

from ldelab.errors import ArgumentError, NumericError
from ldelab.substrate import tensor as ops
from ldelab.substrate.tensor import Tensor

OBJECTIVES = ("softmax", "a_softmax")


@dataclass(frozen=True)
class MarginConfig:
    objective: str = "softmax"
    margin: int = 2
    lambda_start: float = 1000.0
    lambda_end: float = 5.0
    lambda_decay: float = 0.1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ArgumentError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective == "a_softmax" and (int(self.margin) != self.margin or self.margin < 1):
            raise ArgumentError(f"a_softmax needs an integer margin >= 1, got {self.margin}")

    def anneal(self, step: int) -> float:
        """lambda = max(lambda_end, lambda_start / (1 + decay * step))."""
        return max(self.lambda_end, self.lambda_start / (1.0 + self.lambda_decay * step))


def _interval(theta, m: int):
    k = np.ceil(m * np.asarray(theta) / np.pi) - 1
    return np.clip(k, 0, m - 1)


def psi(theta, m: int):
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > np.pi) or np.any(~np.isfinite(theta)):
        raise ArgumentError("theta must lie in [0, pi]")
    if m < 1:
        raise ArgumentError(f"margin must be >= 1, got {m}")
    k = _interval(theta, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    out = sign * np.cos(m * theta) - 2.0 * k
    return float(out) if out.ndim == 0 else out


def psi_op(theta: Tensor, m: int) -> Tensor:
    """``psi`` as a tape primitive on angles."""
    td = theta.data
    if np.any(td < 0) or np.any(td > np.pi):
        raise ArgumentError("theta must lie in [0, pi]")
    k = _interval(td, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0).astype(td.dtype)
    out = sign * np.cos(m * td) - 2.0 * k.astype(td.dtype)
    return theta.tape.record("psi", (theta,), out, lambda g: (g * sign * (-m) * np.sin(m * td),))


def margin_cos(cos: Tensor, m: int) -> Tensor:
    """``psi(arccos(c))`` evaluated through the Chebyshev polynomial T_m.

    Working in cosine space avoids the unbounded derivative of arccos at
    +-1: ``d/dc psi = (-1)^k T_m'(c)``.
    """
    cd = cos.data
    theta = np.arccos(np.clip(cd, -1.0, 1.0))
    k = _interval(theta, m)
    sign = np.where(k % 2 == 0, 1.0, -1.0).astype(cd.dtype)
    coeffs = np.zeros(m + 1)
    coeffs[m] = 1.0
    deriv = chebyshev.chebder(coeffs)
    out = sign * chebyshev.chebval(cd, coeffs).astype(cd.dtype) - 2.0 * k.astype(cd.dtype)
    slope = sign * chebyshev.chebval(cd, deriv).astype(cd.dtype)
    return cos.tape.record("margin_cos", (cos,), out, lambda g: (g * slope,))


def _one_hot(labels, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ArgumentError(f"label out of range [0, {n_classes})")
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def margin_logits(emb: Tensor, weights: Tensor, labels, cfg: MarginConfig, lam: float = 0.0) -> Tensor:
    """Logits fed to the cross-entropy for either objective.

    ``emb`` is (batch, dim) and ``weights`` is (dim, classes).
    """
    if emb.ndim == 1:
        emb = emb.reshape(1, -1)
    if cfg.objective == "softmax":
        return emb @ weights
    tape = emb.tape
    onehot = tape.const(_one_hot(labels, weights.shape[1], emb.dtype))
    xnorm = ops.l2norm(emb, axis=1, keepdims=True)
    if np.any(xnorm.data <= 0):
        raise NumericError("zero-norm embedding under a_softmax")
    wn = weights / ops.l2norm(weights, axis=0, keepdims=True)
    cos = (emb @ wn) / xnorm
    cos_y = ops.sum_(cos * onehot, axis=1, keepdims=True)
    target = xnorm * (lam * cos_y + margin_cos(cos_y, int(cfg.margin))) / (1.0 + lam)
    return xnorm * cos * (1.0 - onehot) + target * onehot


def classify_loss(emb: Tensor, weights: Tensor, labels, cfg: MarginConfig, lam: float = 0.0) -> Tensor:
    """Mean cross-entropy over the batch."""
    logits = margin_logits(emb, weights, labels, cfg, lam)
    onehot = emb.tape.const(_one_hot(labels, weights.shape[1], logits.dtype))
    picked = ops.sum_(ops.log_softmax(logits, axis=1) * onehot, axis=1)
    return -ops.mean(picked)
