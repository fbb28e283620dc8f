"""Regression metrics: MAE, RMSE and Pearson correlation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateVariance, EmptyBatch, LengthMismatch


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    pearson: float | None
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise LengthMismatch(f"{y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise EmptyBatch("no samples")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        raise DegenerateVariance("Pearson correlation needs at least two samples")
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    syy = float(np.dot(dy, dy))
    spp = float(np.dot(dp, dp))
    if syy == 0.0 or spp == 0.0:
        raise DegenerateVariance("Pearson correlation undefined for a constant vector")
    r = float(np.dot(dy, dp)) / math.sqrt(syy * spp)
    return min(1.0, max(-1.0, r))


def compute_metrics(y, yhat) -> MetricsReport:
    """All three metrics; raises ``DegenerateVariance`` if either vector is constant."""
    y, yhat = _pair(y, yhat)
    return MetricsReport(mae(y, yhat), rmse(y, yhat), pearson(y, yhat), int(y.size))


def compute_metrics_lenient(y, yhat) -> tuple[MetricsReport, str | None]:
    """Like ``compute_metrics`` but keeps MAE/RMSE when the correlation is undefined."""
    y, yhat = _pair(y, yhat)
    try:
        pc, err = pearson(y, yhat), None
    except DegenerateVariance as exc:
        pc, err = None, str(exc)
    return MetricsReport(mae(y, yhat), rmse(y, yhat), pc, int(y.size)), err
