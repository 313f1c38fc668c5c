"""Server-side fusion rules combining K client models into a global model.

Every rule works parameter-wise on stacked ``(K, P)`` float64 arrays with the
client axis in ascending client-id order, so reductions are reproducible
bit for bit.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import IncompatibleShapeError, InvalidArgumentError, UnsupportedModelError
from .gaussian import PointSet, PosteriorSet, check_compatible

log = logging.getLogger(__name__)

PREC_FLOOR = 1e-8
WEIGHT_SUM_TOL = 1e-9


class AggregationStrategy(str, enum.Enum):
    NWA = "nwa"
    WS = "ws"
    LP = "lp"
    CONFLATION = "conflation"
    WC = "wc"
    DWC = "dwc"

    @classmethod
    def parse(cls, value: "str | AggregationStrategy") -> "AggregationStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise InvalidArgumentError(f"unknown aggregation {value!r}; expected one of {choices}")


class WeightVector:
    """Nonnegative client weights summing to one."""

    __slots__ = ("weights",)

    def __init__(self, weights: Sequence[float] | np.ndarray):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if w.size == 0:
            raise InvalidArgumentError("weight vector is empty")
        if not np.isfinite(w).all() or (w < 0).any():
            raise InvalidArgumentError(f"weights must be finite and nonnegative: {w}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidArgumentError(f"weights sum to {w.sum()!r}, not 1")
        w.flags.writeable = False
        self.weights = w

    @classmethod
    def normalized(cls, raw: Sequence[float] | np.ndarray) -> "WeightVector":
        raw = np.asarray(raw, dtype=np.float64)
        total = raw.sum()
        if not np.isfinite(total) or total <= 0:
            raise InvalidArgumentError("cannot normalize weights with nonpositive total")
        return cls(raw / total)

    @property
    def max(self) -> float:
        return float(self.weights.max())

    def __len__(self) -> int:
        return self.weights.size

    def __iter__(self):
        return iter(self.weights.tolist())

    def __getitem__(self, k):
        return self.weights[k]

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)

    def __repr__(self) -> str:
        return f"WeightVector({self.weights.tolist()})"


def _as_weights(w, k: int) -> np.ndarray:
    if not isinstance(w, WeightVector):
        w = WeightVector(w)
    if len(w) != k:
        raise InvalidArgumentError(f"{len(w)} weights for {k} clients")
    return w.weights


def _stack(clients: Sequence[PosteriorSet]) -> tuple[np.ndarray, np.ndarray, str]:
    if len(clients) == 0:
        raise InvalidArgumentError("no clients to aggregate")
    if not all(isinstance(c, PosteriorSet) for c in clients):
        raise UnsupportedModelError("expected PosteriorSet clients")
    check_compatible(clients)
    means = np.array([c.mean for c in clients])
    variances = np.array([c.variance for c in clients])
    return means, variances, clients[0].shape_tag


def aggregate_nwa(clients: Sequence[PosteriorSet], w) -> PosteriorSet:
    means, variances, tag = _stack(clients)
    w = _as_weights(w, len(clients))[:, None]
    return PosteriorSet((w * means).sum(axis=0), (w * variances).sum(axis=0), tag)


def aggregate_ws(clients: Sequence[PosteriorSet], w) -> PosteriorSet:
    means, variances, tag = _stack(clients)
    w = _as_weights(w, len(clients))[:, None]
    return PosteriorSet((w * means).sum(axis=0), (w ** 2 * variances).sum(axis=0), tag)


def aggregate_lp(clients: Sequence[PosteriorSet], w) -> PosteriorSet:
    """Moment-matched linear pool: averaged variance plus client disagreement."""
    means, variances, tag = _stack(clients)
    w = _as_weights(w, len(clients))[:, None]
    mean = (w * means).sum(axis=0)
    disagreement = (w * (means - mean) ** 2).sum(axis=0)
    return PosteriorSet(mean, (w * variances).sum(axis=0) + disagreement, tag)


def aggregate_conflation(clients: Sequence[PosteriorSet], w=None) -> PosteriorSet:
    """Normalized product of the client Gaussians. ``w`` is accepted and ignored."""
    means, variances, tag = _stack(clients)
    if len(clients) == 1:
        # 1 / (1 / v) can round one ulp above v
        return clients[0]
    precision = 1.0 / variances
    total = precision.sum(axis=0)
    return PosteriorSet((precision * means).sum(axis=0) / total, 1.0 / total, tag)


def aggregate_wc(clients: Sequence[PosteriorSet], w) -> PosteriorSet:
    means, variances, tag = _stack(clients)
    w = _as_weights(w, len(clients))
    if len(clients) == 1:
        return clients[0]
    w_max = w.max()
    keep = w > 0
    weighted_precision = w[keep, None] / variances[keep]
    total = weighted_precision.sum(axis=0)
    mean = (weighted_precision * means[keep]).sum(axis=0) / total
    return PosteriorSet(mean, w_max / total, tag)


def dwc_fuse(clients: Sequence[PosteriorSet],
             prev_global: PosteriorSet) -> tuple[PosteriorSet, int]:
    """Distributed weight consolidation; returns the fused set and clamp count.

    The (K-1) copies of the previous global's precision are subtracted from
    the summed client precisions. Denominators at or below ``PREC_FLOOR``
    are clamped and counted.
    """
    means, variances, tag = _stack(clients)
    if not isinstance(prev_global, PosteriorSet) or not prev_global.compatible_with(clients[0]):
        raise IncompatibleShapeError("previous global is not compatible with the clients")
    k = len(clients)
    if k == 1:
        return clients[0], 0
    prev_precision = 1.0 / prev_global.variance
    denom = (1.0 / variances).sum(axis=0) - (k - 1) * prev_precision
    numer = (means / variances).sum(axis=0) - (k - 1) * prev_global.mean * prev_precision
    clamped = denom <= PREC_FLOOR
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.warning("dwc: %d of %d precision denominators clamped to %g",
                    n_clamped, denom.size, PREC_FLOOR)
        denom = np.where(clamped, PREC_FLOOR, denom)
    return PosteriorSet(numer / denom, 1.0 / denom, tag), n_clamped


def aggregate_dwc(clients: Sequence[PosteriorSet], prev_global: PosteriorSet) -> PosteriorSet:
    return dwc_fuse(clients, prev_global)[0]


def aggregate_point_nwa(clients: Sequence[PointSet], w) -> PointSet:
    """Weighted element-wise average of point parameters (FedAvg)."""
    if len(clients) == 0:
        raise InvalidArgumentError("no clients to aggregate")
    if not all(isinstance(c, PointSet) for c in clients):
        raise UnsupportedModelError("expected PointSet clients")
    check_compatible(clients)
    w = _as_weights(w, len(clients))[:, None]
    values = np.stack([c.values for c in clients])
    return PointSet((w * values).sum(axis=0), clients[0].shape_tag)


@dataclass(frozen=True)
class AggregationResult:
    model: PosteriorSet | PointSet
    dwc_clamps: int = 0


_POSTERIOR_RULES = {
    AggregationStrategy.NWA: aggregate_nwa,
    AggregationStrategy.WS: aggregate_ws,
    AggregationStrategy.LP: aggregate_lp,
    AggregationStrategy.CONFLATION: aggregate_conflation,
    AggregationStrategy.WC: aggregate_wc,
}


def aggregate(strategy, clients: Sequence[PosteriorSet | PointSet], w,
              prev_global: PosteriorSet | PointSet | None = None) -> AggregationResult:
    """Dispatch on ``strategy`` with one call signature for every rule."""
    strategy = AggregationStrategy.parse(strategy)
    if clients and isinstance(clients[0], PointSet):
        if strategy is not AggregationStrategy.NWA:
            raise UnsupportedModelError(
                f"point-parameter models only support nwa aggregation, not {strategy.value}")
        return AggregationResult(aggregate_point_nwa(clients, w))
    if strategy is AggregationStrategy.DWC:
        if prev_global is None:
            raise InvalidArgumentError("dwc needs the previous global model")
        model, clamps = dwc_fuse(clients, prev_global)
        return AggregationResult(model, clamps)
    return AggregationResult(_POSTERIOR_RULES[strategy](clients, w))
