"""Training losses (L1, gradient-matching, heteroscedastic) and depth metrics.

All losses are masked means over the valid-pixel count ``N``. Image
gradients are forward differences; a difference counts only when both of its
pixels are valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, UsageError
from .tensorcore import Tensor

DELTA1_THRESHOLD = 1.25


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85  # L1
    beta: float = 0.15  # gradient matching
    gamma: float = 0.50  # uncertainty

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l1: Tensor
    grad: Tensor
    unc: Tensor | None
    total: Tensor
    weights: LossWeights

    def values(self) -> dict[str, float]:
        return {
            "l1": self.l1.item(),
            "grad": self.grad.item(),
            "unc": self.unc.item() if self.unc is not None else 0.0,
            "total": self.total.item(),
        }

    def contributions(self) -> dict[str, float]:
        v = self.values()
        w = self.weights
        return {"l1": w.alpha * v["l1"], "grad": w.beta * v["grad"],
                "unc": w.gamma * v["unc"] if self.unc is not None else 0.0}


def _prepare(pred: Tensor, truth, mask):
    y = np.asarray(truth, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ConfigurationError(f"prediction {pred.shape} and truth {y.shape} differ")
    m = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != y.shape:
        raise ConfigurationError(f"mask {m.shape} does not match {y.shape}")
    n = int(m.sum())
    if n == 0:
        raise UsageError("no valid pixels in mask")
    return y, m, n


def _masked_mean(x: Tensor, m: np.ndarray, n: int) -> Tensor:
    return tc.scale(tc.sum_over(tc.mul(x, Tensor(m.astype(x.dtype)))), 1.0 / n)


def l1_and_gradient_loss(pred: Tensor, truth, mask=None) -> tuple[Tensor, Tensor]:
    """Masked mean |D - Y| and masked mean of forward-difference gradient mismatch."""
    y, m, n = _prepare(pred, truth, mask)
    err = tc.sub(pred, Tensor(y))
    l1 = _masked_mean(tc.abs_(err), m, n)
    terms = []
    for axis in (-1, -2):  # x then y
        size = pred.shape[axis]
        if size < 2:
            continue
        d = tc.sub(tc.slice_axis(err, axis, 1, size), tc.slice_axis(err, axis, 0, size - 1))
        both = np.take(m, range(1, size), axis=axis) & np.take(m, range(0, size - 1), axis=axis)
        terms.append(tc.sum_over(tc.mul(tc.abs_(d), Tensor(both.astype(pred.dtype)))))
    if not terms:
        return l1, Tensor(np.zeros((), dtype=pred.dtype))
    grad = terms[0] if len(terms) == 1 else tc.add(terms[0], terms[1])
    return l1, tc.scale(grad, 1.0 / n)


def uncertainty_loss(pred: Tensor, log_var: Tensor, truth, mask=None) -> Tensor:
    """Masked mean of ``|y - D| * exp(-s) + s``."""
    y, m, n = _prepare(pred, truth, mask)
    if log_var.shape != pred.shape:
        raise ConfigurationError(f"log-variance {log_var.shape} does not match prediction {pred.shape}")
    err = tc.abs_(tc.sub(pred, Tensor(y)))
    per_pixel = tc.add(tc.mul(err, tc.exp(tc.neg(log_var))), log_var)
    return _masked_mean(per_pixel, m, n)


def total_loss(l1: Tensor, grad: Tensor, unc: Tensor | None, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum; the uncertainty term is dropped when ``unc`` is None."""
    total = tc.add(tc.scale(l1, weights.alpha), tc.scale(grad, weights.beta))
    if unc is not None:
        total = tc.add(total, tc.scale(unc, weights.gamma))
    return LossBreakdown(l1, grad, unc, total, weights)


def depth_loss(pred: Tensor, log_var: Tensor | None, truth, mask=None,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    l1, grad = l1_and_gradient_loss(pred, truth, mask)
    unc = uncertainty_loss(pred, log_var, truth, mask) if log_var is not None else None
    return total_loss(l1, grad, unc, weights)


def compute_metrics(pred, truth, mask=None) -> dict[str, float]:
    """RMSE, mean absolute relative error, delta<1.25 accuracy and MAE over valid pixels."""
    d = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    m = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if d.shape != y.shape or m.shape != y.shape:
        raise ConfigurationError("prediction, truth and mask shapes differ")
    if not m.any():
        raise UsageError("no valid pixels in mask")
    d, y = d[m], y[m]
    if np.any(y <= 0):
        raise UsageError("truth depth must be positive on valid pixels")
    err = d - y
    with np.errstate(divide="ignore"):
        ratio = np.maximum(d / y, np.where(d > 0, y / np.where(d > 0, d, 1), np.inf))
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "abs_rel": float(np.mean(np.abs(err) / y)),
        "delta1": float(np.mean(ratio < DELTA1_THRESHOLD)),
        "mae": float(np.mean(np.abs(err))),
    }


def bad_pixel_rate(pred, truth, mask=None, threshold: float = 2.0) -> float:
    """Fraction of valid pixels with ``|D - Y| > threshold`` (depth units)."""
    d = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    m = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return float(np.mean(np.abs(d - y)[m] > threshold))
