"""Round-based federation loop: distribute, train locally, weight, aggregate, evaluate.

All randomness derives from the experiment seed through ``derive_seed`` with
a stream tag and the (round, client) coordinates, so results do not depend on
how client work is scheduled across threads.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import AggregationStrategy, aggregate
from .bnn import Architecture, Mode, Model, Prior, TrainConfig, client_update, init_model, predict_mc_batch
from .config import ExperimentConfig, LRSchedule, PretrainConfig
from .datasets import (LabeledDataset, PartitionPlan, generate_blobs, load_delimited,
                       partition_2class, partition_dirichlet, partition_iid, stratified_split)
from .errors import InvalidArgumentError, TrainingDivergedError
from .gaussian import PosteriorSet
from .uncertainty import (DEFAULT_FRACTIONS, dataset_nll, normalized_entropy_batch,
                          retention_curve, variance_traces_batch)
from .weighting import compute_weights

log = logging.getLogger(__name__)

# stream tags for derive_seed
STREAM_DATA, STREAM_PARTITION, STREAM_INIT, STREAM_CLIENT, STREAM_EVAL, STREAM_PRETRAIN = range(1, 7)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for the stream identified by ``keys``."""
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(state.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def lr_at(r: int, schedule: LRSchedule) -> float:
    """Constant for ``silent_rounds`` rounds, then multiplied by ``1 - decay`` per round."""
    if r < 0:
        raise InvalidArgumentError("round index must be nonnegative")
    if r < schedule.silent_rounds:
        return schedule.eta0
    return schedule.eta0 * (1.0 - schedule.decay) ** (r - schedule.silent_rounds)


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    nll: float
    entropy: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    correct: np.ndarray

    def retention(self, fractions=DEFAULT_FRACTIONS) -> list[tuple[str, float, float]]:
        rows = []
        for metric, scores in (("entropy", self.entropy), ("aleatoric", self.aleatoric),
                               ("epistemic", self.epistemic)):
            rows += [(metric, f, acc) for f, acc in retention_curve(scores, self.correct, fractions)]
        return rows


def evaluate(model: Model, arch: Architecture, ds: LabeledDataset, m: int, seed: int,
             dropout_rate: float = 0.2) -> Evaluation:
    blocks = predict_mc_batch(model, arch, ds.features, m, seed, dropout_rate)
    p_bar = blocks.mean(axis=1)
    correct = np.argmax(p_bar, axis=1) == ds.labels
    aleatoric, epistemic = variance_traces_batch(blocks)
    return Evaluation(float(correct.mean()), dataset_nll(p_bar, ds.labels),
                      normalized_entropy_batch(p_bar), aleatoric, epistemic, correct)


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    nll: float
    entropy: float
    aleatoric: float
    epistemic: float
    weights: tuple[float, ...]
    learning_rate: float
    dwc_clamps: int
    wall_time: float = 0.0


@dataclass
class PretrainResult:
    model: Model
    indices: np.ndarray
    epochs_run: int
    val_history: list[float]


@dataclass
class FederationResult:
    metrics: list[RoundMetrics]
    global_model: Model
    initial_model: Model
    retention: list[tuple[str, float, float]]
    client_sizes: list[int]
    pretrain: PretrainResult | None = None
    final_eval: Evaluation | None = field(default=None, repr=False)


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement of the monitored value."""

    def __init__(self, patience: int):
        if patience < 0:
            raise InvalidArgumentError("patience must be nonnegative")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.source == "file":
        from .datasets import DelimitedSchema
        schema = DelimitedSchema(has_header=d.header)
        train = load_delimited(d.train_path, schema)
        test = load_delimited(d.test_path, schema) if d.test_path else train
        c = max(train.class_count, test.class_count)
        return (LabeledDataset(train.features, train.labels, c),
                LabeledDataset(test.features, test.labels, c))
    train = generate_blobs(d.classes, d.dim, d.per_class, d.spread,
                           derive_seed(cfg.seed, STREAM_DATA, 0), d.spacing)
    test = generate_blobs(d.classes, d.dim, d.test_per_class, d.spread,
                          derive_seed(cfg.seed, STREAM_DATA, 1), d.spacing)
    return train, test


def make_partition(cfg: ExperimentConfig, ds: LabeledDataset) -> PartitionPlan:
    seed = derive_seed(cfg.seed, STREAM_PARTITION)
    kind = cfg.partition.kind
    if kind == "iid":
        return partition_iid(ds, cfg.clients, seed)
    if kind == "two_class":
        return partition_2class(ds, cfg.clients, seed)
    return partition_dirichlet(ds, cfg.clients, cfg.partition.alpha, seed)


def pretrain_global(cfg: ExperimentConfig, train_ds: LabeledDataset,
                    initial: Model | None = None) -> PretrainResult:
    """Centrally train the initial global model on a stratified slice of the data.

    Early stopping monitors validation accuracy; the best-scoring epoch's
    model is returned together with every index used (training and
    validation).
    """
    pre = cfg.pretrain or PretrainConfig()
    chosen, _ = stratified_split(train_ds, pre.fraction, derive_seed(cfg.seed, STREAM_PRETRAIN, 0))
    if chosen.size == 0:
        raise InvalidArgumentError(f"pretrain fraction {pre.fraction} selects no examples")
    subset = train_ds.subset(chosen)
    val_local, fit_local = stratified_split(subset, pre.val_fraction,
                                            derive_seed(cfg.seed, STREAM_PRETRAIN, 1))
    if fit_local.size == 0 or val_local.size == 0:
        raise InvalidArgumentError("pretrain slice too small to hold out a validation split")
    fit, val = subset.subset(fit_local), subset.subset(val_local)

    model = initial if initial is not None else init_model(
        cfg.arch, cfg.prior, derive_seed(cfg.seed, STREAM_INIT))
    stopper = EarlyStopping(pre.patience)
    best = model
    history: list[float] = []
    epoch = 0
    for epoch in range(1, pre.max_epochs + 1):
        train_cfg = replace(cfg.train, local_epochs=1, learning_rate=cfg.lr_schedule.eta0,
                            seed=derive_seed(cfg.seed, STREAM_PRETRAIN, 2, epoch))
        try:
            model = client_update(model, fit, train_cfg, cfg.arch, cfg.prior, client_id=-1).model
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"pretraining diverged: {exc}", epoch=epoch) from exc
        acc = evaluate(model, cfg.arch, val, cfg.train.mc_samples,
                       derive_seed(cfg.seed, STREAM_PRETRAIN, 3, epoch),
                       cfg.train.dropout_rate).accuracy
        history.append(acc)
        improved = acc > stopper.best
        stop = stopper.update(acc, epoch)
        if improved:
            best = model
        if stop:
            break
    log.info("pretraining stopped after %d epochs (best val acc %.4f at epoch %d)",
             epoch, stopper.best, stopper.best_epoch)
    return PretrainResult(best, chosen, epoch, history)


def _train_clients(cfg, global_model, prior, client_sets, r, eta):
    def work(k):
        train_cfg = replace(cfg.train, learning_rate=eta,
                            seed=derive_seed(cfg.seed, STREAM_CLIENT, r, k))
        try:
            return client_update(global_model, client_sets[k], train_cfg, cfg.arch, prior, client_id=k)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError("client training diverged", client_id=k,
                                        epoch=exc.epoch, round_index=r) from exc

    ids = range(len(client_sets))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(work, ids))
    return [work(k) for k in ids]


def run_federation(cfg: ExperimentConfig, train_ds: LabeledDataset, test_ds: LabeledDataset,
                   initial_model: Model | None = None, progress=None) -> FederationResult:
    """Run ``cfg.rounds`` federation rounds and evaluate after each one."""
    arch = cfg.arch
    if train_ds.dim != arch.n_inputs or train_ds.class_count != arch.n_classes:
        raise InvalidArgumentError(
            f"data has {train_ds.dim} features / {train_ds.class_count} classes but the "
            f"architecture expects {arch.n_inputs} / {arch.n_classes}")
    plan = make_partition(cfg, train_ds)
    client_sets = plan.client_data(train_ds)

    pretrain = None
    if initial_model is not None:
        global_model = initial_model
    elif cfg.pretrain is not None:
        pretrain = pretrain_global(cfg, train_ds)
        global_model = pretrain.model
    else:
        global_model = init_model(arch, cfg.prior, derive_seed(cfg.seed, STREAM_INIT))
    start_model = global_model

    prior = cfg.prior
    metrics: list[RoundMetrics] = []
    evaluation = None
    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        eta = lr_at(r, cfg.lr_schedule)
        reports = _train_clients(cfg, global_model, prior, client_sets, r, eta)
        weights = compute_weights(cfg.weighting, reports, global_model)
        result = aggregate(cfg.aggregation, [rep.model for rep in reports], weights,
                           prev_global=global_model)
        global_model = result.model
        if cfg.refresh_prior and isinstance(global_model, PosteriorSet):
            prior = Prior.from_posterior(global_model)
        evaluation = evaluate(global_model, arch, test_ds, cfg.train.mc_samples,
                              derive_seed(cfg.seed, STREAM_EVAL, r), cfg.train.dropout_rate)
        row = RoundMetrics(
            round=r, accuracy=evaluation.accuracy, nll=evaluation.nll,
            entropy=float(evaluation.entropy.mean()),
            aleatoric=float(evaluation.aleatoric.mean()),
            epistemic=float(evaluation.epistemic.mean()),
            weights=tuple(float(w) for w in weights), learning_rate=eta,
            dwc_clamps=result.dwc_clamps, wall_time=time.perf_counter() - t0)
        metrics.append(row)
        if progress is not None:
            progress(row)

    return FederationResult(metrics, global_model, start_model, evaluation.retention(),
                            plan.sizes, pretrain, evaluation)


def train_centralized(cfg: ExperimentConfig, train_ds: LabeledDataset, test_ds: LabeledDataset,
                      epochs: int | None = None) -> tuple[Model, Evaluation]:
    """Train the same architecture from the same initialization on pooled data.

    Defaults to ``rounds * local_epochs`` passes at the round-0 learning rate
    schedule, one learning rate per pass.
    """
    epochs = epochs or cfg.rounds * cfg.train.local_epochs
    model = init_model(cfg.arch, cfg.prior, derive_seed(cfg.seed, STREAM_INIT))
    for e in range(epochs):
        eta = lr_at(e // cfg.train.local_epochs, cfg.lr_schedule)
        train_cfg = replace(cfg.train, local_epochs=1, learning_rate=eta,
                            seed=derive_seed(cfg.seed, STREAM_CLIENT, e, 1 << 20))
        model = client_update(model, train_ds, train_cfg, cfg.arch, cfg.prior).model
    ev = evaluate(model, cfg.arch, test_ds, cfg.train.mc_samples,
                  derive_seed(cfg.seed, STREAM_EVAL, 1 << 20), cfg.train.dropout_rate)
    return model, ev


def rounds_to_fraction(accuracies, fraction: float = 0.8) -> int:
    """First round (1-based) whose accuracy reaches ``fraction`` of the final accuracy."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise InvalidArgumentError("empty learning curve")
    target = fraction * acc[-1]
    return int(np.flatnonzero(acc >= target)[0]) + 1


__all__ = [
    "derive_seed", "lr_at", "evaluate", "Evaluation", "RoundMetrics", "FederationResult",
    "PretrainResult", "EarlyStopping", "load_datasets", "make_partition", "pretrain_global",
    "run_federation", "train_centralized", "rounds_to_fraction", "AggregationStrategy",
    "TrainConfig", "Mode",
]
