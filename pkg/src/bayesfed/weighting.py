"""Client weighting schemes producing the WeightVector used by aggregation."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import WeightVector
from .errors import InvalidArgumentError, UnsupportedModelError
from .gaussian import PointSet, PosteriorSet, check_compatible, kl_posterior

log = logging.getLogger(__name__)

KL_FLOOR = 1e-9


class WeightingScheme(str, enum.Enum):
    EQUAL = "equal"
    TRAIN_SIZE = "train_size"
    MAX_DISCREPANCY = "max_discrepancy"
    DISTANCE = "distance"

    @classmethod
    def parse(cls, value: "str | WeightingScheme") -> "WeightingScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise InvalidArgumentError(f"unknown weighting {value!r}; expected one of {choices}")

    @property
    def needs_posterior(self) -> bool:
        return self in (WeightingScheme.MAX_DISCREPANCY, WeightingScheme.DISTANCE)


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    train_size: int
    posterior: PosteriorSet | None = None
    point: PointSet | None = None

    def __post_init__(self):
        if (self.posterior is None) == (self.point is None):
            raise InvalidArgumentError("a report carries exactly one of posterior or point")
        if self.train_size < 1:
            raise InvalidArgumentError(f"train_size must be >= 1, got {self.train_size}")

    @property
    def model(self) -> PosteriorSet | PointSet:
        return self.posterior if self.posterior is not None else self.point


def weights_equal(k: int) -> WeightVector:
    if k < 1:
        raise InvalidArgumentError(f"need at least one client, got K={k}")
    return WeightVector(np.full(k, 1.0 / k))


def weights_train_size(reports: Sequence[ClientReport]) -> WeightVector:
    if not reports:
        raise InvalidArgumentError("no client reports")
    sizes = np.array([r.train_size for r in reports], dtype=np.float64)
    if sizes.sum() <= 0:
        raise InvalidArgumentError("all client train sizes are zero")
    if np.all(sizes == sizes[0]):
        return weights_equal(len(reports))
    return WeightVector(sizes / sizes.sum())


def _posteriors(reports: Sequence[ClientReport]) -> list[PosteriorSet]:
    missing = [r.client_id for r in reports if r.posterior is None]
    if missing:
        raise UnsupportedModelError(
            f"KL-based weighting needs posterior reports; clients {missing} sent point sets")
    posts = [r.posterior for r in reports]
    check_compatible(posts)
    return posts


def _floored_inverse(kl: np.ndarray, what: str) -> np.ndarray:
    hits = int(np.count_nonzero(kl < KL_FLOOR))
    if hits:
        log.info("%s: %d KL values floored at %g", what, hits, KL_FLOOR)
    return 1.0 / np.maximum(kl, KL_FLOOR)


def weights_max_discrepancy(reports: Sequence[ClientReport]) -> WeightVector:
    """gamma_k = max over j != k of 1 / KL(q_k || q_j), then normalized."""
    if len(reports) < 2:
        raise InvalidArgumentError("max-discrepancy weighting needs at least two clients")
    posts = _posteriors(reports)
    k = len(posts)
    kl = np.full((k, k), np.inf)
    for i in range(k):
        for j in range(k):
            if i != j:
                kl[i, j] = kl_posterior(posts[i], posts[j])
    gamma = _floored_inverse(kl, "max_discrepancy").max(axis=1)
    return WeightVector.normalized(gamma)


def weights_distance_to_global(reports: Sequence[ClientReport],
                               global_model: PosteriorSet) -> WeightVector:
    """gamma_k = 1 / KL(q_global || q_k), then normalized."""
    if not reports:
        raise InvalidArgumentError("no client reports")
    posts = _posteriors(reports)
    kl = np.array([kl_posterior(global_model, p) for p in posts])
    return WeightVector.normalized(_floored_inverse(kl, "distance"))


def compute_weights(scheme, reports: Sequence[ClientReport],
                    global_model: PosteriorSet | PointSet | None = None) -> WeightVector:
    scheme = WeightingScheme.parse(scheme)
    if scheme is WeightingScheme.EQUAL:
        return weights_equal(len(reports))
    if scheme is WeightingScheme.TRAIN_SIZE:
        return weights_train_size(reports)
    if scheme is WeightingScheme.MAX_DISCREPANCY:
        return weights_max_discrepancy(reports)
    if not isinstance(global_model, PosteriorSet):
        raise UnsupportedModelError("distance weighting needs a posterior global model")
    return weights_distance_to_global(reports, global_model)
