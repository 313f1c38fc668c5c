"""Reductions of Monte Carlo prediction blocks.

A block holds ``M`` sampled class-probability rows for one input. The
functions here work on a single ``(M, C)`` block; the ``*_batch`` variants
take a stack ``(N, M, C)`` and are what evaluation uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError

PROB_FLOOR = 1e-12
DEFAULT_FRACTIONS = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))
RETENTION_METRICS = ("entropy", "aleatoric", "epistemic")


def _block(block) -> np.ndarray:
    b = np.asarray(block, dtype=np.float64)
    if b.ndim == 1:
        b = b[None, :]
    if b.ndim != 2 or b.shape[0] < 1:
        raise InvalidArgumentError(f"expected an (M, C) block, got shape {b.shape}")
    if np.any(np.abs(b.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidArgumentError("every block row must sum to 1")
    return b


def mean_probability(block) -> np.ndarray:
    return _block(block).mean(axis=0)


def predicted_class(p_bar) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(p_bar))


def normalized_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(normalized_entropy_batch(p[None, :])[0])


def normalized_entropy_batch(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1) / math.log(c)
    # the sum for an exactly uniform row can land an ulp below 1
    h = np.where(np.all(p == p[..., :1], axis=-1), 1.0, h)
    return np.clip(h, 0.0, 1.0) + 0.0  # + 0.0 turns -0.0 into 0.0


def decompose_variance(block) -> tuple[np.ndarray, np.ndarray]:
    """(aleatoric, epistemic) covariance matrices of an MC block."""
    b = _block(block)
    p_bar = b.mean(axis=0)
    aleatoric = np.diag(p_bar) - (b.T @ b) / b.shape[0]
    centred = b - p_bar
    epistemic = (centred.T @ centred) / b.shape[0]
    return aleatoric, epistemic


def variance_traces_batch(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Traces of both decomposition matrices for each block in ``(N, M, C)``."""
    p_bar = blocks.mean(axis=1)
    aleatoric = (p_bar - (blocks ** 2).mean(axis=1)).sum(axis=1)
    # centred form avoids the cancellation in E[p^2] - p_bar^2
    epistemic = ((blocks - p_bar[:, None, :]) ** 2).mean(axis=1).sum(axis=1)
    return aleatoric, epistemic


def nll(p_bar, label: int) -> float:
    return float(-math.log(max(float(np.asarray(p_bar)[label]), PROB_FLOOR)))


def dataset_nll(p_bar: np.ndarray, labels: np.ndarray) -> float:
    picked = p_bar[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


@dataclass(frozen=True)
class UncertaintyRecord:
    mean_prob: np.ndarray
    predicted_class: int
    entropy_norm: float
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def aleatoric_trace(self) -> float:
        return float(np.trace(self.aleatoric))

    @property
    def epistemic_trace(self) -> float:
        return float(np.trace(self.epistemic))


def summarize(block) -> UncertaintyRecord:
    b = _block(block)
    p_bar = b.mean(axis=0)
    aleatoric, epistemic = decompose_variance(b)
    return UncertaintyRecord(p_bar, predicted_class(p_bar), normalized_entropy(p_bar),
                             aleatoric, epistemic)


def _discard_count(fraction: float, n: int) -> int:
    # rounding guards against e.g. (1 - 0.95) * 40 = 2.0000000000000018
    return math.ceil(round((1.0 - fraction) * n, 9))


def retention_curve(scores: Sequence[float], correct: Sequence[bool],
                    fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[tuple[float, float]]:
    """Accuracy after discarding the most uncertain ``1 - f`` of the examples.

    Examples are ranked by score ascending with ties broken by index, and the
    lowest ``N - ceil((1 - f) N)`` are kept.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    correct = np.asarray(correct, dtype=bool).reshape(-1)
    if scores.size == 0 or scores.size != correct.size:
        raise InvalidArgumentError("scores and correctness flags must be nonempty and equal length")
    n = scores.size
    order = np.lexsort((np.arange(n), scores))
    hits = np.cumsum(correct[order])
    curve = []
    for f in fractions:
        if not 0 < f <= 1:
            raise InvalidArgumentError(f"fraction {f} outside (0, 1]")
        keep = n - _discard_count(f, n)
        curve.append((float(f), float(hits[keep - 1] / keep) if keep > 0 else float("nan")))
    return curve
