"""Acceptance checks, one test per criterion.

Each test records a PASS or FAIL line with the measured quantity; the lines
are repeated in the terminal summary. Run on its own with
``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from bayesfed.aggregation import (WeightVector, aggregate, aggregate_conflation, aggregate_lp,
                                  aggregate_nwa, aggregate_wc, aggregate_ws, dwc_fuse)
from bayesfed.bnn import Architecture, Prior, elbo_loss
from bayesfed.cli import cmd_run
from bayesfed.config import load_config
from bayesfed.datasets import (LabeledDataset, partition_2class, partition_dirichlet,
                               partition_iid)
from bayesfed.gaussian import Gaussian, PointSet, PosteriorSet, kl_gaussian
from bayesfed.orchestrator import (load_datasets, rounds_to_fraction, run_federation,
                                   train_centralized)
from bayesfed.uncertainty import decompose_variance, normalized_entropy, normalized_entropy_batch
from bayesfed.weighting import ClientReport, WeightingScheme, compute_weights, weights_equal

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
STRATEGIES = ("nwa", "ws", "lp", "conflation", "wc", "dwc")


def random_clients(rng, k, p):
    clients = [PosteriorSet(rng.normal(0, 2, p), rng.uniform(0.01, 5, p)) for _ in range(k)]
    return clients, WeightVector.normalized(rng.uniform(0.01, 1, k))


def test_aggregation_identities(criterion):
    rng = np.random.default_rng(1)
    draws = []
    for _ in range(1000):
        k, p = int(rng.integers(1, 8)), int(rng.integers(1, 20))
        prev = PosteriorSet(rng.normal(size=p), rng.uniform(0.01, 5, p))
        draws.append((k, *random_clients(rng, k, p), prev))
    worst_identity = worst_conflation = worst_mean = 0.0
    start = time.perf_counter()
    for k, clients, w, prev in draws:
        single = clients[0]
        for s in STRATEGIES:
            out = aggregate(s, [single], [1.0], prev_global=prev).model
            worst_identity = max(worst_identity, np.max(np.abs(out.mean - single.mean)),
                                 np.max(np.abs(out.variance - single.variance)))
        equal = weights_equal(k)
        a, b = aggregate_wc(clients, equal), aggregate_conflation(clients)
        worst_conflation = max(worst_conflation, np.max(np.abs(a.mean - b.mean)),
                               np.max(np.abs(a.variance - b.variance)))
        m = [f(clients, w).mean for f in (aggregate_nwa, aggregate_ws, aggregate_lp)]
        worst_mean = max(worst_mean, np.max(np.abs(m[0] - m[1])), np.max(np.abs(m[0] - m[2])))
    elapsed = time.perf_counter() - start
    ok = worst_identity < 1e-12 and worst_conflation < 1e-12 and worst_mean == 0.0 and elapsed < 1.0
    criterion(1, ok, f"identity dev {worst_identity:.1e}, wc-vs-conflation {worst_conflation:.1e}, "
                     f"mean dev {worst_mean:.1e}, {elapsed:.2f}s for 1000 draws")


def test_variance_ordering(criterion):
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(1000):
        k, p = int(rng.integers(1, 8)), int(rng.integers(1, 20))
        clients, w = random_clients(rng, k, p)
        ws, nwa, lp = (f(clients, w).variance for f in (aggregate_ws, aggregate_nwa, aggregate_lp))
        violations += int(np.sum(ws > nwa) + np.sum(nwa > lp))
        variances = np.stack([c.variance for c in clients])
        top = variances[int(np.argmax(np.asarray(w)))]
        violations += int(np.sum(aggregate_wc(clients, w).variance > top))
        violations += int(np.sum(aggregate_conflation(clients).variance > variances.min(axis=0)))
    criterion(2, violations == 0, f"{violations} ordering violations over 1000 draws")


def test_dwc_algebra(criterion):
    out, clamps_fixture = dwc_fuse(
        [PosteriorSet([1.0], [0.5]), PosteriorSet([-1.0], [0.5])], PosteriorSet([0.0], [1.0]))
    fixture_err = max(abs(out.mean[0]), abs(out.variance[0] - 1 / 3))
    rng = np.random.default_rng(3)
    telescope_err = 0.0
    clean_clamps = 0
    for k in (1, 2, 5, 10):
        prev = PosteriorSet(rng.normal(size=30), rng.uniform(0.01, 5, 30))
        same, c = dwc_fuse([prev] * k, prev)
        clean_clamps += c
        telescope_err = max(telescope_err, np.max(np.abs(same.mean - prev.mean)),
                            np.max(np.abs(same.variance - prev.variance)))
    # clients far less certain than the previous global drive the denominator negative
    _, bad_clamps = dwc_fuse([PosteriorSet([0.0], [10.0])] * 3, PosteriorSet([0.0], [0.1]))
    ok = (fixture_err < 1e-12 and telescope_err < 1e-12 and clamps_fixture == 0
          and clean_clamps == 0 and bad_clamps > 0)
    criterion(3, ok, f"fixture err {fixture_err:.1e}, telescoping err {telescope_err:.1e}, "
                     f"clamps {clamps_fixture + clean_clamps} clean / {bad_clamps} constructed")


def test_kl_oracle(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        p = Gaussian(rng.uniform(-3, 3), rng.uniform(0.1, 4))
        q = Gaussian(rng.uniform(-3, 3), rng.uniform(0.1, 4))
        lo, hi = p.mean - 15 * p.std, p.mean + 15 * p.std
        numeric = integrate.quad(
            lambda x: stats.norm.pdf(x, p.mean, p.std)
            * (stats.norm.logpdf(x, p.mean, p.std) - stats.norm.logpdf(x, q.mean, q.std)),
            lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        worst = max(worst, abs(kl_gaussian(p, q) - numeric))
    criterion(4, worst < 1e-6, f"max |closed form - quadrature| = {worst:.2e} over 100 pairs")


def _reference_neg_elbo(sizes, mean, var, noise, x, y, prior_mean, prior_var, kl_scale):
    theta = mean + np.sqrt(var) * noise
    h, pos = x, 0
    pairs = list(zip(sizes[:-1], sizes[1:]))
    for i, (a, b) in enumerate(pairs):
        h = h @ theta[pos:pos + a * b].reshape(a, b) + theta[pos + a * b:pos + a * b + b]
        pos += a * b + b
        if i < len(pairs) - 1:
            h = np.maximum(h, 0)
    h = h - h.max(axis=1, keepdims=True)
    logp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
    kl = 0.5 * np.sum(np.log(prior_var / var) + (var + (mean - prior_mean) ** 2) / prior_var - 1)
    return kl_scale * kl - logp[np.arange(len(y)), y].mean()


def test_elbo_gradient(criterion):
    rng = np.random.default_rng(5)
    arch = Architecture((2, 8, 3))
    p = arch.n_weights
    mean, var = rng.normal(size=p) * 0.5, rng.uniform(0.05, 1.0, p)
    noise = rng.normal(size=p)
    x, y = rng.normal(size=(16, 2)), rng.integers(0, 3, 16)
    n = 64
    res = elbo_loss(PosteriorSet(mean, var, arch.shape_tag), Prior(0.0, 1.0), (x, y), noise, arch, n)
    h = 1e-5
    worst = 0.0
    for c in rng.choice(2 * p, size=100, replace=False):
        i = c % p
        dm, dv = np.zeros(p), np.zeros(p)
        (dv if c >= p else dm)[i] = h
        up = _reference_neg_elbo(arch.layer_sizes, mean + dm, var + dv, noise, x, y, 0.0, 1.0, 16 / n)
        down = _reference_neg_elbo(arch.layer_sizes, mean - dm, var - dv, noise, x, y, 0.0, 1.0, 16 / n)
        numeric = (up - down) / (2 * h)
        analytic = res.grad_variance[i] if c >= p else res.grad_mean[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    post = PosteriorSet(mean, var, arch.shape_tag)
    kl_self = elbo_loss(post, Prior.from_posterior(post), (x, y), noise, arch, n).kl
    criterion(5, worst < 1e-4 and kl_self == 0.0,
              f"max relative error {worst:.2e} on 100 coordinates; KL(prior=posterior) = {kl_self}")


def test_uncertainty_decomposition(criterion):
    rng = np.random.default_rng(6)
    min_eig, asym = math.inf, 0.0
    for _ in range(1000):
        m, c = int(rng.integers(1, 30)), int(rng.integers(2, 11))
        block = rng.dirichlet(np.full(c, rng.uniform(0.1, 3)), size=m)
        for mat in decompose_variance(block):
            asym = max(asym, np.max(np.abs(mat - mat.T)))
            min_eig = min(min_eig, np.linalg.eigvalsh(mat).min())
    al, ep = decompose_variance([[1.0, 0.0], [0.0, 1.0]])
    _, ep_single = decompose_variance([[0.3, 0.3, 0.4]])
    ok = (asym == 0.0 and min_eig >= -1e-9 and np.all(al == 0) and np.trace(ep) == 0.5
          and np.all(ep_single == 0))
    criterion(6, ok, f"min eigenvalue {min_eig:.1e}, max asymmetry {asym:.1e}; "
                     f"disagreement fixture trace {np.trace(ep)}; M=1 epistemic zero")


def test_entropy_bounds(criterion):
    rng = np.random.default_rng(7)
    lo, hi = math.inf, -math.inf
    for c in (2, 3, 5, 10, 100):
        h = normalized_entropy_batch(rng.dirichlet(np.full(c, 0.5), size=20_000))
        lo, hi = min(lo, h.min()), max(hi, h.max())
    uniform = all(normalized_entropy(np.full(c, 1 / c)) == 1.0 for c in range(2, 101))
    one_hot = all(normalized_entropy(np.eye(c)[c // 2]) == 0.0 for c in range(2, 101))
    criterion(7, lo >= 0 and hi <= 1 and uniform and one_hot,
              f"range [{lo:.3g}, {hi:.3g}] over 1e5 vectors; uniform -> 1: {uniform}; "
              f"one-hot -> 0: {one_hot}")


def test_weighting(criterion):
    rng = np.random.default_rng(8)
    invalid = 0
    for _ in range(300):
        k, p = int(rng.integers(2, 10)), int(rng.integers(1, 10))
        reps = [ClientReport(i, int(rng.integers(1, 1000)),
                             posterior=PosteriorSet(rng.normal(size=p), rng.uniform(0.01, 4, p)))
                for i in range(k)]
        g = PosteriorSet(rng.normal(size=p), rng.uniform(0.01, 4, p))
        for scheme in WeightingScheme:
            w = np.asarray(compute_weights(scheme, reps, g))
            invalid += int(w.shape != (k,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9)
    fixture = np.asarray(compute_weights("max_discrepancy", [
        ClientReport(i, 10, posterior=PosteriorSet([m], [1.0])) for i, m in enumerate((0.0, 0.1, 5.0))]))
    fixture_err = np.max(np.abs(fixture - [0.49990, 0.49990, 0.00021]))
    same = [ClientReport(i, 250, posterior=PosteriorSet([0.0], [1.0])) for i in range(7)]
    exact = list(compute_weights("train_size", same)) == list(weights_equal(7))
    criterion(8, invalid == 0 and fixture_err < 1e-4 and exact,
              f"{invalid} invalid vectors; fixture {np.round(fixture, 5).tolist()} "
              f"(err {fixture_err:.1e}); equal sizes exact: {exact}")


def test_partitions(criterion):
    y = np.repeat(np.arange(10), 1000)
    ds = LabeledDataset(np.zeros((y.size, 1)), y, 10)
    two_class_ok = all(
        all(len(set(y[list(a)])) == 2 for a in partition_2class(ds, 10, seed).assignments)
        for seed in range(100))
    worst_dev = 0.0
    for seed in range(10):
        for a in partition_dirichlet(ds, 10, 1000.0, seed).assignments:
            props = np.bincount(y[list(a)], minlength=10) / len(a)
            worst_dev = max(worst_dev, np.max(np.abs(props - 0.1)))
    disjoint = True
    repeatable = True
    for make in (lambda s: partition_iid(ds, 10, s), lambda s: partition_2class(ds, 10, s),
                 lambda s: partition_dirichlet(ds, 10, 0.5, s)):
        plan = make(3)
        flat = [i for a in plan.assignments for i in a]
        disjoint &= len(flat) == len(set(flat)) == len(ds)
        repeatable &= plan == make(3)
    criterion(9, two_class_ok and worst_dev <= 0.05 and disjoint and repeatable,
              f"2-class over 100 seeds: {two_class_ok}; dirichlet(1000) max deviation "
              f"{worst_dev:.3f}; disjoint cover: {disjoint}; seeded: {repeatable}")


def test_federated_vs_centralized(criterion):
    cfg = load_config(CONFIGS / "desk_iid.cfg")
    start = time.perf_counter()
    train, test = load_datasets(cfg)
    fed = run_federation(cfg, train, test).metrics[-1].accuracy
    _, central = train_centralized(cfg, train, test)
    elapsed = time.perf_counter() - start
    gap = abs(fed - central.accuracy)
    criterion(10, gap <= 0.03 and fed >= 0.90 and elapsed < 300,
              f"federated {fed:.4f} vs centralized {central.accuracy:.4f} "
              f"(gap {100 * gap:.2f} pp), {elapsed:.1f}s")


@pytest.mark.slow
def test_convergence_ordering(criterion):
    base = load_config(CONFIGS / "desk_two_class.cfg")
    medians = {}
    for agg in ("ws", "wc", "conflation", "nwa", "lp"):
        rounds = []
        for seed in range(3):
            cfg = base.with_overrides({"aggregation": agg, "seed": seed})
            train, test = load_datasets(cfg)
            acc = [m.accuracy for m in run_federation(cfg, train, test).metrics]
            rounds.append(rounds_to_fraction(acc, 0.8))
        medians[agg] = float(np.median(rounds))
    fast = max(medians["ws"], medians["wc"], medians["conflation"])
    slow = min(medians["nwa"], medians["lp"])
    criterion(11, fast <= slow, "median rounds to 80% of final: "
              + ", ".join(f"{k} {v:g}" for k, v in medians.items()))


def test_prior_refresh_degrades(criterion):
    base = load_config(CONFIGS / "desk_iid.cfg")
    acc = {}
    for refresh in (False, True):
        cfg = base.with_overrides({"refresh_prior": refresh})
        train, test = load_datasets(cfg)
        acc[refresh] = run_federation(cfg, train, test).metrics[-1].accuracy
    drop = acc[False] - acc[True]
    criterion(12, drop >= 0.10, f"final accuracy {acc[False]:.4f} fixed prior vs {acc[True]:.4f} "
                                f"refreshed (drop {100 * drop:.1f} pp)")


@pytest.mark.slow
def test_dwc_pretraining(criterion):
    base = load_config(CONFIGS / "desk_dwc.cfg")
    acc = {True: [], False: []}
    clamps = 0
    for pre in (True, False):
        for seed in range(3):
            cfg = base.with_overrides({"pretrain": pre, "seed": seed})
            train, test = load_datasets(cfg)
            last = run_federation(cfg, train, test).metrics[-1]
            acc[pre].append(last.accuracy)
            clamps += last.dwc_clamps
    gap = float(np.mean(acc[True]) - np.mean(acc[False]))
    criterion(13, gap >= 0.15,
              f"mean accuracy {np.mean(acc[True]):.4f} pretrained vs {np.mean(acc[False]):.4f} "
              f"random init (gap {100 * gap:.1f} pp; per seed "
              f"{np.round(acc[True], 3).tolist()} vs {np.round(acc[False], 3).tolist()}; "
              f"{clamps} clamps)")


def test_fedavg_equivalence(criterion):
    reports = [ClientReport(0, 100, point=PointSet([1.0, 2.0, 3.0])),
               ClientReport(1, 300, point=PointSet([5.0, -2.0, 0.0]))]
    w = compute_weights("train_size", reports)
    out = aggregate("nwa", [r.model for r in reports], w).model
    # by hand: weights 100/400 and 300/400
    expected = np.array([0.25 * 1 + 0.75 * 5, 0.25 * 2 - 0.75 * 2, 0.25 * 3])
    err = float(np.max(np.abs(out.values - expected)))
    criterion(14, err <= 1e-12, f"max deviation {err:.1e} from {expected.tolist()}")


def test_determinism(criterion, tmp_path):
    first = tmp_path / "first"
    assert cmd_run(CONFIGS / "golden.cfg", out_dir=first, repeats=2) == 0
    manifest = first / "manifest.json"
    runs = []
    for name in ("a", "b"):
        assert cmd_run(manifest, out_dir=tmp_path / name) == 0
        runs.append({f: (tmp_path / name / f).read_bytes() for f in ("metrics.csv", "retention.csv")})
    same = runs[0] == runs[1]
    seeds = json.loads(manifest.read_text())["seeds"]
    criterion(15, same, f"metrics.csv and retention.csv byte-identical across two runs of one "
                        f"manifest (seeds {seeds})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
