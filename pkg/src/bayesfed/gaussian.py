"""Diagonal-Gaussian posteriors, point parameter sets and KL utilities.

A ``PosteriorSet`` stores one independent Gaussian per network parameter as
two flat float64 arrays. It is the unit exchanged between clients and the
server. Variances are stored directly and floored at ``VAR_FLOOR``.

Binary serialization layout (all little-endian)::

    magic      4 bytes   b"BFPS"
    version    uint16    1
    tag_len    uint32    length of the UTF-8 shape tag in bytes
    tag        tag_len bytes
    P          uint64    number of Gaussians
    mean       P x float64
    variance   P x float64

The text layout is line oriented: ``bayesfed-posterior 1``, ``tag <tag>``,
``size <P>``, then ``P`` lines of ``<mean> <variance>`` written with
``float.hex`` so values round-trip exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import IncompatibleShapeError, InvalidArgumentError

VAR_FLOOR = 1e-12

_MAGIC = b"BFPS"
_VERSION = 1
_TEXT_HEADER = "bayesfed-posterior 1"


def _floor_variance(variance: np.ndarray) -> np.ndarray:
    if (variance < 0).any():
        raise InvalidArgumentError("variance must be non-negative")
    return np.maximum(variance, VAR_FLOOR)


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True).reshape(-1)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float

    def __post_init__(self):
        mean = float(self.mean)
        variance = float(self.variance)
        if not (math.isfinite(mean) and math.isfinite(variance)):
            raise InvalidArgumentError(f"non-finite Gaussian ({mean!r}, {variance!r})")
        if variance < 0:
            raise InvalidArgumentError(f"negative variance {variance!r}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", max(variance, VAR_FLOOR))

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True, eq=False)
class PosteriorSet:
    """Mean-field Gaussian posterior over ``P`` parameters.

    ``mean`` and ``variance`` are read-only float64 arrays of length ``P``.
    Two sets are aggregation-compatible iff their ``shape_tag`` and length
    match.
    """

    mean: np.ndarray
    variance: np.ndarray
    shape_tag: str = ""

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        variance = np.array(self.variance, dtype=np.float64).reshape(-1)
        if mean.shape != variance.shape:
            raise IncompatibleShapeError(
                f"mean has {mean.size} entries but variance has {variance.size}")
        if not (np.isfinite(mean).all() and np.isfinite(variance).all()):
            raise InvalidArgumentError("posterior contains non-finite values")
        variance = _floor_variance(variance)
        mean.flags.writeable = False
        variance.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @classmethod
    def from_gaussians(cls, params: Sequence[Gaussian], shape_tag: str = "") -> "PosteriorSet":
        return cls(np.array([g.mean for g in params]), np.array([g.variance for g in params]),
                   shape_tag)

    @property
    def params(self) -> tuple[Gaussian, ...]:
        return tuple(Gaussian(m, v) for m, v in zip(self.mean, self.variance))

    @property
    def parameter_count(self) -> int:
        """Trainable scalars (a mean and a variance per Gaussian)."""
        return 2 * self.mean.size

    def __len__(self) -> int:
        return self.mean.size

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mean[i], self.variance[i])

    def __iter__(self) -> Iterator[Gaussian]:
        return iter(self.params)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PosteriorSet):
            return NotImplemented
        return (self.shape_tag == other.shape_tag
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.variance, other.variance))

    def compatible_with(self, other: "PosteriorSet") -> bool:
        return self.shape_tag == other.shape_tag and len(self) == len(other)

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        tag = self.shape_tag.encode("utf-8")
        head = _MAGIC + struct.pack("<HI", _VERSION, len(tag)) + tag + struct.pack("<Q", len(self))
        return (head + self.mean.astype("<f8").tobytes()
                + self.variance.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PosteriorSet":
        if blob[:4] != _MAGIC:
            raise InvalidArgumentError("not a serialized PosteriorSet (bad magic)")
        version, tag_len = struct.unpack_from("<HI", blob, 4)
        if version != _VERSION:
            raise InvalidArgumentError(f"unsupported PosteriorSet version {version}")
        offset = 10
        tag = blob[offset:offset + tag_len].decode("utf-8")
        offset += tag_len
        (size,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        expected = offset + 16 * size
        if len(blob) != expected:
            raise InvalidArgumentError(f"expected {expected} bytes, got {len(blob)}")
        mean = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        variance = np.frombuffer(blob, dtype="<f8", count=size, offset=offset + 8 * size)
        return cls(mean, variance, tag)

    def to_text(self) -> str:
        lines = [_TEXT_HEADER, f"tag {self.shape_tag}", f"size {len(self)}"]
        lines += [f"{float(m).hex()} {float(v).hex()}" for m, v in zip(self.mean, self.variance)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PosteriorSet":
        lines = text.splitlines()
        if len(lines) < 3 or lines[0] != _TEXT_HEADER:
            raise InvalidArgumentError("not a textual PosteriorSet record")
        tag = lines[1][4:] if lines[1].startswith("tag ") else None
        if tag is None or not lines[2].startswith("size "):
            raise InvalidArgumentError("malformed PosteriorSet header")
        size = int(lines[2][5:])
        body = lines[3:3 + size]
        if len(body) != size:
            raise InvalidArgumentError(f"expected {size} rows, got {len(body)}")
        pairs = [row.split() for row in body]
        mean = np.array([float.fromhex(p[0]) for p in pairs])
        variance = np.array([float.fromhex(p[1]) for p in pairs])
        return cls(mean, variance, tag)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".txt":
            path.write_text(self.to_text(), encoding="utf-8")
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorSet":
        path = Path(path)
        if path.suffix == ".txt":
            return cls.from_text(path.read_text(encoding="utf-8"))
        return cls.from_bytes(path.read_bytes())


@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered real parameter values (deterministic or MC-dropout weights)."""

    values: np.ndarray
    shape_tag: str = ""

    def __post_init__(self):
        values = _frozen(self.values)
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("point set contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointSet):
            return NotImplemented
        return self.shape_tag == other.shape_tag and np.array_equal(self.values, other.values)

    def compatible_with(self, other: "PointSet") -> bool:
        return self.shape_tag == other.shape_tag and len(self) == len(other)


def kl_divergence_arrays(p_mean, p_var, q_mean, q_var) -> np.ndarray:
    """Elementwise KL(N(p_mean, p_var) || N(q_mean, q_var)), clipped at 0."""
    p_mean, p_var, q_mean, q_var = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (p_mean, p_var, q_mean, q_var)))
    kl = 0.5 * (np.log(q_var) - np.log(p_var) + (p_var + (p_mean - q_mean) ** 2) / q_var - 1.0)
    return np.maximum(kl, 0.0)


def kl_gaussian(p: Gaussian, q: Gaussian) -> float:
    values = (p.mean, p.variance, q.mean, q.variance)
    if not all(math.isfinite(v) for v in values):
        raise InvalidArgumentError("kl_gaussian received non-finite input")
    return float(kl_divergence_arrays(*values))


def kl_posterior(p: PosteriorSet, q: PosteriorSet) -> float:
    """KL(p || q) summed over independent per-parameter Gaussians."""
    if not p.compatible_with(q):
        raise IncompatibleShapeError(
            f"cannot compare posteriors {p.shape_tag!r}/{len(p)} and {q.shape_tag!r}/{len(q)}")
    return float(np.sum(kl_divergence_arrays(p.mean, p.variance, q.mean, q.variance)))


def sample_point(post: PosteriorSet, noise: Sequence[float] | np.ndarray) -> PointSet:
    """Pathwise sample ``mean + sqrt(variance) * noise``."""
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    if noise.size != len(post):
        raise InvalidArgumentError(f"noise has length {noise.size}, posterior has {len(post)}")
    return PointSet(post.mean + np.sqrt(post.variance) * noise, post.shape_tag)


def check_compatible(models: Sequence[PosteriorSet | PointSet]) -> None:
    """Raise unless every model shares the first model's kind, tag and length."""
    first = models[0]
    for k, other in enumerate(models[1:], start=1):
        if type(other) is not type(first) or not first.compatible_with(other):
            raise IncompatibleShapeError(
                f"model {k} ({other.shape_tag!r}, {len(other)}) does not match "
                f"model 0 ({first.shape_tag!r}, {len(first)})")


__all__ = [
    "VAR_FLOOR", "Gaussian", "PosteriorSet", "PointSet", "kl_gaussian", "kl_posterior",
    "kl_divergence_arrays", "sample_point", "check_compatible",
]
