"""Feed-forward classifiers in deterministic, MC-dropout and mean-field VI modes.

Parameters live in one flat vector: for each layer the ``(fan_in, fan_out)``
weight matrix in row-major order followed by its bias. VI models carry a
``PosteriorSet`` over that vector; the other modes carry a ``PointSet``.

VI training minimizes, per minibatch of size ``B`` drawn from a local set of
``N`` examples::

    (B / N) * KL[q || prior] + mean cross-entropy under one pathwise sample

so that one pass over the data accumulates exactly one KL term. Variances are
updated through ``s = log(variance)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import IncompatibleShapeError, InvalidArgumentError, TrainingDivergedError
from .gaussian import VAR_FLOOR, PointSet, PosteriorSet
from .weighting import ClientReport

INIT_VARIANCE = 1e-4
_LOG_VAR_FLOOR = math.log(VAR_FLOOR)
# keeps exp(s) finite; far above any prior variance in use
_LOG_VAR_CEIL = 50.0


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    MC_DROPOUT = "mc_dropout"
    VI = "vi"


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    mode: Mode = Mode.VI
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise InvalidArgumentError("an architecture needs at least an input and output layer")
        if any(s < 1 for s in sizes):
            raise InvalidArgumentError(f"layer sizes must be positive: {sizes}")
        if sizes[-1] < 2:
            raise InvalidArgumentError("need at least two classes")
        if self.activation != "relu":
            raise InvalidArgumentError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def shape_tag(self) -> str:
        return f"mlp-{'x'.join(map(str, self.layer_sizes))}-{self.activation}"

    @cached_property
    def layers(self) -> tuple[tuple[slice, slice, int, int], ...]:
        """(weight slice, bias slice, fan_in, fan_out) per layer."""
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            out.append((w, b, fan_in, fan_out))
        return tuple(out)

    @property
    def n_weights(self) -> int:
        return self.layers[-1][1].stop

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]


@dataclass(frozen=True)
class Prior:
    """Gaussian prior; ``mean``/``variance`` are scalars or per-parameter arrays."""

    mean: float | np.ndarray = 0.0
    variance: float | np.ndarray = 100.0

    def __post_init__(self):
        if np.any(np.asarray(self.variance) <= 0):
            raise InvalidArgumentError("prior variance must be positive")

    @classmethod
    def from_posterior(cls, post: PosteriorSet) -> "Prior":
        return cls(post.mean.copy(), post.variance.copy())


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.001
    dropout_rate: float = 0.2
    mc_samples: int = 20
    seed: int = 0
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise InvalidArgumentError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        if self.mc_samples < 1:
            raise InvalidArgumentError("mc_samples must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidArgumentError("grad_clip must be positive or None")


Model = PosteriorSet | PointSet


def init_model(arch: Architecture, prior: Prior | None = None, seed: int = 0) -> Model:
    """He-uniform weight means, zero biases; VI variances start at 1e-4.

    ``prior`` is accepted for signature symmetry and does not affect the draw.
    """
    rng = np.random.default_rng(seed)
    mean = np.zeros(arch.n_weights)
    for w, _, fan_in, _ in arch.layers:
        limit = math.sqrt(6.0 / fan_in)
        mean[w] = rng.uniform(-limit, limit, size=w.stop - w.start)
    if arch.mode is Mode.VI:
        return PosteriorSet(mean, np.full(arch.n_weights, INIT_VARIANCE), arch.shape_tag)
    return PointSet(mean, arch.shape_tag)


def _check_model(arch: Architecture, model: Model) -> None:
    if len(model) != arch.n_weights or model.shape_tag != arch.shape_tag:
        raise IncompatibleShapeError(
            f"model ({model.shape_tag!r}, {len(model)}) does not fit "
            f"{arch.shape_tag!r} with {arch.n_weights} weights")
    expect = PosteriorSet if arch.mode is Mode.VI else PointSet
    if not isinstance(model, expect):
        raise IncompatibleShapeError(f"{arch.mode.value} mode expects a {expect.__name__}")


def _as_batch(arch: Architecture, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != arch.n_inputs:
        raise IncompatibleShapeError(f"expected inputs of width {arch.n_inputs}, got {x.shape}")
    return x, single


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(arch, theta, x, masks):
    """Return (layer inputs, pre-activations, probabilities)."""
    inputs, pre = [], []
    h = x
    n_layers = len(arch.layers)
    for i, (w, b, fan_in, fan_out) in enumerate(arch.layers):
        inputs.append(h)
        z = h @ theta[w].reshape(fan_in, fan_out) + theta[b]
        if i == n_layers - 1:
            return inputs, pre, _softmax(z)
        pre.append(z)
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]


def forward(arch: Architecture, point: PointSet | np.ndarray, x,
            dropout_mask: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Class probabilities for one input (shape ``(C,)``) or a batch (``(n, C)``).

    ``dropout_mask`` holds one multiplicative mask per hidden layer, already
    scaled; an all-ones mask reproduces the unmasked forward pass.
    """
    theta = point.values if isinstance(point, PointSet) else np.asarray(point, dtype=np.float64)
    if theta.size != arch.n_weights:
        raise IncompatibleShapeError(f"expected {arch.n_weights} parameters, got {theta.size}")
    if dropout_mask is not None and len(dropout_mask) != len(arch.hidden_sizes):
        raise IncompatibleShapeError("need one dropout mask per hidden layer")
    xb, single = _as_batch(arch, x)
    probs = _forward_cache(arch, theta, xb, dropout_mask)[2]
    return probs[0] if single else probs


def _backward(arch, theta, inputs, pre, probs, y, masks) -> np.ndarray:
    """Gradient of mean cross-entropy with respect to the flat parameters."""
    n = y.shape[0]
    grad = np.empty_like(theta)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for i in range(len(arch.layers) - 1, -1, -1):
        w, b, fan_in, fan_out = arch.layers[i]
        grad[w] = (inputs[i].T @ delta).reshape(-1)
        grad[b] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ theta[w].reshape(fan_in, fan_out).T
        if masks is not None:
            delta = delta * masks[i - 1]
        delta = delta * (pre[i - 1] > 0)
    return grad


def _cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(probs[np.arange(y.shape[0]), y], 1e-300))))


def cross_entropy_grad(arch: Architecture, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
                       masks=None) -> tuple[float, np.ndarray]:
    inputs, pre, probs = _forward_cache(arch, theta, x, masks)
    return _cross_entropy(probs, y), _backward(arch, theta, inputs, pre, probs, y, masks)


@dataclass(frozen=True)
class ElboResult:
    loss: float
    kl: float
    nll: float
    grad_mean: np.ndarray
    grad_variance: np.ndarray
    grad_log_variance: np.ndarray


def _elbo_arrays(arch, mean, log_var, prior_mean, prior_var, x, y, noise, kl_scale, var=None):
    if var is None:
        var = np.exp(log_var)
    std = np.sqrt(var)
    theta = mean + std * noise
    nll, g_theta = cross_entropy_grad(arch, theta, x, y)
    kl_terms = 0.5 * (np.log(prior_var) - log_var + (var + (mean - prior_mean) ** 2) / prior_var - 1.0)
    kl = float(np.sum(kl_terms))
    g_mean = g_theta + kl_scale * (mean - prior_mean) / prior_var
    g_log_var = 0.5 * g_theta * noise * std + kl_scale * 0.5 * (var / prior_var - 1.0)
    return kl_scale * kl + nll, kl, nll, g_mean, g_log_var


def elbo_loss(posterior: PosteriorSet, prior: Prior, batch: tuple[np.ndarray, np.ndarray],
              noise, arch: Architecture, dataset_size: int) -> ElboResult:
    """Minibatch negative ELBO and its gradient under one pathwise sample."""
    x, y = batch
    x, _ = _as_batch(arch, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0 or y.size != x.shape[0]:
        raise InvalidArgumentError("batch must be nonempty with one label per row")
    if dataset_size < y.size:
        raise InvalidArgumentError("dataset_size smaller than the batch")
    _check_model(arch, posterior)
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    if noise.size != len(posterior):
        raise InvalidArgumentError("noise length does not match the posterior")
    kl_scale = y.size / dataset_size
    loss, kl, nll, g_mean, g_log_var = _elbo_arrays(
        arch, posterior.mean, np.log(posterior.variance), prior.mean, prior.variance,
        x, y, noise, kl_scale, var=posterior.variance)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite ELBO {loss!r}")
    return ElboResult(loss, kl, nll, g_mean, g_log_var / posterior.variance, g_log_var)


def _draw_masks(rng, arch, n, keep):
    return [(rng.random((n, h)) < keep) / keep for h in arch.hidden_sizes]


def _clip(grads: list[np.ndarray], limit: float | None) -> None:
    if limit is None:
        return
    norm = math.sqrt(sum(float(g @ g) for g in grads))
    if norm > limit:
        for g in grads:
            g *= limit / norm


def client_update(global_model: Model, data, cfg: TrainConfig, arch: Architecture,
                  prior: Prior | None = None, client_id: int = 0) -> ClientReport:
    """Run ``cfg.local_epochs`` of minibatch SGD from a copy of ``global_model``.

    ``data`` is an ``(x, y)`` pair or any object with ``features``/``labels``.
    The received model is never modified.
    """
    x, y = _unpack(data)
    if y.size == 0:
        raise InvalidArgumentError("client has no data")
    _check_model(arch, global_model)
    rng = np.random.default_rng(cfg.seed)
    prior = prior or Prior()
    n = y.size
    eta = cfg.learning_rate
    keep = 1.0 - cfg.dropout_rate

    if arch.mode is Mode.VI:
        mean = global_model.mean.copy()
        log_var = np.log(global_model.variance)
    else:
        theta = global_model.values.copy()

    for epoch in range(1, cfg.local_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if arch.mode is Mode.VI:
                noise = rng.standard_normal(mean.size)
                _, _, _, g_mean, g_log_var = _elbo_arrays(
                    arch, mean, log_var, prior.mean, prior.variance, xb, yb, noise, idx.size / n)
                _clip([g_mean, g_log_var], cfg.grad_clip)
                mean -= eta * g_mean
                log_var -= eta * g_log_var
                np.clip(log_var, _LOG_VAR_FLOOR, _LOG_VAR_CEIL, out=log_var)
            else:
                masks = None
                if arch.mode is Mode.MC_DROPOUT and cfg.dropout_rate > 0:
                    masks = _draw_masks(rng, arch, idx.size, keep)
                _, g = cross_entropy_grad(arch, theta, xb, yb, masks)
                _clip([g], cfg.grad_clip)
                theta -= eta * g
        state = (mean, log_var) if arch.mode is Mode.VI else (theta,)
        if not all(np.all(np.isfinite(a)) for a in state):
            raise TrainingDivergedError("non-finite parameters after local training",
                                        client_id=client_id, epoch=epoch)

    if arch.mode is Mode.VI:
        # exp(log(v)) need not return v bit-exactly; keep untouched variances as received
        start = np.log(global_model.variance)
        variance = np.where(log_var == start, global_model.variance, np.exp(log_var))
        post = PosteriorSet(mean, variance, arch.shape_tag)
        return ClientReport(client_id, n, posterior=post)
    return ClientReport(client_id, n, point=PointSet(theta, arch.shape_tag))


def _unpack(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "features"):
        x, y = data.features, data.labels
    else:
        x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64).reshape(-1)


def predict_mc_batch(model: Model, arch: Architecture, x, m: int, seed: int,
                     dropout_rate: float = 0.2) -> np.ndarray:
    """Monte Carlo class probabilities with shape ``(n, M, C)``.

    VI draws one parameter sample per MC row shared across the batch;
    MC-dropout draws fresh masks per example and row (inverted scaling).
    """
    if m < 1:
        raise InvalidArgumentError("need at least one MC sample")
    _check_model(arch, model)
    xb, _ = _as_batch(arch, x)
    rng = np.random.default_rng(seed)
    out = np.empty((xb.shape[0], m, arch.n_classes))
    if arch.mode is Mode.VI:
        std = np.sqrt(model.variance)
        for j in range(m):
            theta = model.mean + std * rng.standard_normal(len(model))
            out[:, j] = _forward_cache(arch, theta, xb, None)[2]
    elif arch.mode is Mode.MC_DROPOUT and dropout_rate > 0:
        keep = 1.0 - dropout_rate
        for j in range(m):
            masks = _draw_masks(rng, arch, xb.shape[0], keep)
            out[:, j] = _forward_cache(arch, model.values, xb, masks)[2]
    else:
        out[:] = _forward_cache(arch, model.values, xb, None)[2][:, None, :]
    return out


def predict_mc(model: Model, arch: Architecture, x, m: int, seed: int,
               dropout_rate: float = 0.2) -> np.ndarray:
    """MC prediction block ``(M, C)`` for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise IncompatibleShapeError("predict_mc takes one feature vector; use predict_mc_batch")
    return predict_mc_batch(model, arch, x[None, :], m, seed, dropout_rate)[0]


def with_learning_rate(cfg: TrainConfig, eta: float, seed: int | None = None) -> TrainConfig:
    if seed is None:
        return replace(cfg, learning_rate=eta)
    return replace(cfg, learning_rate=eta, seed=seed)
