"""Masked training loss and depth-completion metrics.

Pixels whose ground truth does not exceed ``VALID_THRESHOLD`` (meters) are
ignored everywhere.  The loss mixes mean squared error and its square root;
the mixing weights follow an epoch schedule so training can move from an
MSE phase to an RMSE fine-tuning phase.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

VALID_THRESHOLD = 1e-3
SQRT_EPS = 1e-12  # keeps d sqrt / d mse finite when the error is exactly zero
PRED_FLOOR = 1e-6  # clamp for inverse-depth metrics


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    # (first epoch, alpha, beta); the last entry whose epoch <= current wins
    schedule: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.schedule = sorted((int(e), float(a), float(b)) for e, a, b in self.schedule)
        for _, a, b in [(0, self.alpha, self.beta), *self.schedule]:
            if a < 0 or b < 0 or a + b <= 0:
                raise ValueError(f"loss weights need alpha, beta >= 0 and alpha + beta > 0, got ({a}, {b})")

    def at(self, epoch: int) -> tuple[float, float]:
        alpha, beta = self.alpha, self.beta
        for start, a, b in self.schedule:
            if start <= epoch:
                alpha, beta = a, b
        return alpha, beta

    @classmethod
    def pretrain_then_finetune(cls, epochs: int) -> "LossWeights":
        """MSE for most of training, RMSE for the last sixth of the epochs."""
        finetune = max(1, math.ceil(epochs / 6))
        return cls(1.0, 0.0, [(max(epochs - finetune, 1), 0.0, 1.0)])


def valid_mask(gt, threshold: float = VALID_THRESHOLD) -> np.ndarray:
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    return gt > threshold


def masked_loss(pred: Tensor, gt, weights=(1.0, 0.0), threshold: float = VALID_THRESHOLD) -> Tensor:
    """``alpha * mse + beta * sqrt(mse)`` over pixels with ``gt > threshold``.

    ``weights`` is an ``(alpha, beta)`` pair.  Masked pixels are multiplied
    by zero before squaring, so their gradient is exactly zero.
    """
    pred = T.as_tensor(pred)
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_arr.shape:
        raise ValueError(f"masked_loss: pred {pred.shape} and gt {gt_arr.shape} differ")
    mask = valid_mask(gt_arr, threshold)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_loss: no valid ground-truth pixels")
    alpha, beta = weights
    m = mask.astype(np.float64)
    diff = (pred - gt_arr * m) * m
    mse = T.square(diff).sum() * (1.0 / n)
    loss = None
    if alpha:
        loss = mse * alpha
    if beta:
        term = T.sqrt(mse + SQRT_EPS) * beta
        loss = term if loss is None else loss + term
    return loss


@dataclass
class MetricReport:
    rmse: float
    mae: float
    irmse: float
    imae: float
    rel: float
    delta_1_25: float
    valid_pixel_count: int
    unit_scale: float = 1000.0
    clamped_count: int = 0  # valid pixels whose prediction was raised to PRED_FLOOR

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate(pred, gt, unit_scale: float = 1000.0, threshold: float = VALID_THRESHOLD) -> MetricReport:
    """Metrics over valid pixels; depths are in meters.

    ``rmse`` and ``mae`` are multiplied by ``unit_scale`` (1000 reports mm).
    ``irmse`` and ``imae`` compare inverse depths in 1/km.  ``rel`` is the
    mean absolute relative error and ``delta_1_25`` the fraction of pixels
    with ``max(pred/gt, gt/pred) < 1.25``.
    """
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"evaluate: pred {p.shape} and gt {g.shape} differ")
    mask = valid_mask(g, threshold)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("evaluate: no valid ground-truth pixels")
    p, g = p[mask], g[mask]
    err = p - g
    clamped = int(np.count_nonzero(p < PRED_FLOOR))
    pc = np.maximum(p, PRED_FLOOR)
    inv_err = 1000.0 / pc - 1000.0 / g
    ratio = np.maximum(pc / g, g / pc)
    return MetricReport(
        rmse=float(np.sqrt(np.mean(err * err)) * unit_scale),
        mae=float(np.mean(np.abs(err)) * unit_scale),
        irmse=float(np.sqrt(np.mean(inv_err * inv_err))),
        imae=float(np.mean(np.abs(inv_err))),
        rel=float(np.mean(np.abs(err) / g)),
        delta_1_25=float(np.mean(ratio < 1.25)),
        valid_pixel_count=n,
        unit_scale=float(unit_scale),
        clamped_count=clamped,
    )
