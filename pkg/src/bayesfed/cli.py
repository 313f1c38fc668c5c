"""Command-line front end.

``bayesfed run CONFIG`` runs one experiment (optionally repeated over
consecutive seeds) and writes ``metrics.csv``, ``retention.csv`` and
``manifest.json`` to ``--out``. ``CONFIG`` may be a key-value config file or a
``manifest.json`` written by an earlier run, which repeats that run exactly.

``bayesfed sweep CONFIG --axis key=v1,v2`` runs one experiment per value in
its own subdirectory and collects final-round results in ``summary.csv``.
Use ``;`` to separate values that themselves contain commas, for example
``--axis "arch.layer_sizes=2,16,3;2,32,3"``.

Exit status: 0 on success, 2 for unusable input (bad config, missing file,
empty axis), 1 when an experiment fails while running.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import re
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, SCHEMA, load_config, parse_overrides, parse_value
from .errors import BayesFedError, ConfigError, DatasetParseError
from .orchestrator import FederationResult, load_datasets, run_federation

log = logging.getLogger("bayesfed")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Problem with what the user supplied; maps to exit status 2."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(flat: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def _num(x: float) -> str:
    # repr is the shortest string that round-trips, so output is byte-stable
    return repr(float(x))


@dataclass
class RunSpec:
    """A resolved experiment: base config, the overrides applied, and where it came from."""

    config: ExperimentConfig
    overrides: dict[str, Any]
    source: Path
    repeats: int


def _read_manifest(path: Path) -> dict[str, Any]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not a valid manifest: {exc.msg}", exc.lineno, str(path)) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("config"), dict):
        raise ConfigError("manifest has no 'config' object", source=str(path))
    return doc


def resolve(config_path: str | Path, overrides: Sequence[str] = (), seed: int | None = None,
            repeats: int | None = None) -> RunSpec:
    """Build the config for ``run``; raises ``InputError`` or ``ConfigError`` on bad input."""
    path = Path(config_path)
    if not path.is_file():
        raise InputError(f"{path}: no such config file")
    override_values = parse_overrides(overrides)
    if seed is not None:
        override_values["seed"] = seed
    if path.suffix.lower() == ".json":
        doc = _read_manifest(path)
        unknown = set(doc["config"]) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}", source=str(path))
        values = dict(doc["config"])
        if isinstance(values.get("arch.layer_sizes"), list):
            values["arch.layer_sizes"] = tuple(values["arch.layer_sizes"])
        cfg = ExperimentConfig.from_flat({**values, **override_values})
        repeats = repeats or int(doc.get("repeats", 1))
    else:
        cfg = load_config(path, override_values)
        repeats = repeats or 1
    if repeats < 1:
        raise InputError("--repeats must be at least 1")
    return RunSpec(cfg, override_values, path, repeats)


def _input_hashes(spec: RunSpec) -> dict[str, str]:
    files = [spec.source]
    if spec.config.data.source == "file":
        files += [Path(p) for p in (spec.config.data.train_path, spec.config.data.test_path) if p]
    return {str(p): _sha256(p) for p in files if p.is_file()}


def _write_metrics(path: Path, runs: list[tuple[int, int, FederationResult]]) -> None:
    n_weights = max(len(res.metrics[0].weights) for _, _, res in runs)
    header = ["repeat", "seed", "round", "accuracy", "nll", "entropy", "aleatoric", "epistemic",
              "learning_rate", "dwc_clamps"] + [f"w{k}" for k in range(n_weights)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rep, seed, res in runs:
            for m in res.metrics:
                writer.writerow([rep, seed, m.round, _num(m.accuracy), _num(m.nll), _num(m.entropy),
                                 _num(m.aleatoric), _num(m.epistemic), _num(m.learning_rate),
                                 m.dwc_clamps] + [_num(w) for w in m.weights])


def _write_retention(path: Path, runs: list[tuple[int, int, FederationResult]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["repeat", "seed", "metric", "fraction", "accuracy"])
        for rep, seed, res in runs:
            for metric, fraction, acc in res.retention:
                writer.writerow([rep, seed, metric, _num(fraction), _num(acc)])


def _mean_std(values: list[float]) -> dict[str, float | None]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else None}


def execute(spec: RunSpec, out_dir: Path) -> dict[str, Any]:
    """Run every repeat of ``spec`` and write the artifacts; returns the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    seeds = [spec.config.seed + i for i in range(spec.repeats)]
    runs: list[tuple[int, int, FederationResult]] = []
    timings: list[float] = []
    for rep, seed in enumerate(seeds):
        cfg = spec.config.with_overrides({"seed": seed})
        t0 = time.perf_counter()
        train_ds, test_ds = load_datasets(cfg)

        def progress(m, rep=rep):
            log.info("repeat %d round %d: accuracy %.4f nll %.4f", rep, m.round, m.accuracy, m.nll)

        res = run_federation(cfg, train_ds, test_ds, progress=progress)
        timings.append(time.perf_counter() - t0)
        runs.append((rep, seed, res))

    metrics_path = out_dir / "metrics.csv"
    retention_path = out_dir / "retention.csv"
    _write_metrics(metrics_path, runs)
    _write_retention(retention_path, runs)
    final = [res.metrics[-1] for _, _, res in runs]
    manifest = {
        "tool": "bayesfed",
        "version": __version__,
        "config": _jsonable(spec.config.to_flat()),
        "overrides": _jsonable(spec.overrides),
        "source": str(spec.source),
        "repeats": spec.repeats,
        "seeds": seeds,
        "inputs_sha256": _input_hashes(spec),
        "artifacts": {"metrics": str(metrics_path), "retention": str(retention_path)},
        "started": started,
        "finished": _now(),
        "wall_seconds": [round(t, 3) for t in timings],
        "final": {
            "accuracy": _mean_std([m.accuracy for m in final]),
            "nll": _mean_std([m.nll for m in final]),
            "dwc_clamps": sum(m.dwc_clamps for m in final),
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def cmd_run(config_path: str | Path, overrides: Sequence[str] = (), out_dir: str | Path = "out",
            seed: int | None = None, repeats: int | None = None) -> int:
    try:
        spec = resolve(config_path, overrides, seed, repeats)
    except (ConfigError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    return _guarded_execute(spec, Path(out_dir))


def _guarded_execute(spec: RunSpec, out_dir: Path) -> int:
    try:
        manifest = execute(spec, out_dir)
    except (DatasetParseError, FileNotFoundError) as exc:
        log.error("cannot load data: %s", exc)
        return EXIT_INPUT
    except (BayesFedError, ValueError, FloatingPointError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    acc = manifest["final"]["accuracy"]
    log.info("final accuracy %.4f%s", acc["mean"],
             f" +/- {acc['std']:.4f}" if acc["std"] is not None else "")
    return EXIT_OK


def _split_axis(axis: str) -> tuple[str, list[str]]:
    if "=" not in axis:
        raise InputError(f"--axis {axis!r} is not key=v1,v2,...")
    key, values = axis.split("=", 1)
    key = key.strip()
    if key not in SCHEMA:
        raise InputError(f"--axis: unknown key {key!r}")
    sep = ";" if ";" in values else ","
    items = [v.strip() for v in values.split(sep) if v.strip()]
    if not items:
        raise InputError(f"--axis {key}: empty value list")
    for n, v in enumerate(items, start=1):
        parse_value(key, v, n, "--axis")
    return key, items


def _cell_name(key: str, value: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", f"{key}={value}")


def cmd_sweep(config_path: str | Path, axis: str, overrides: Sequence[str] = (),
              out_dir: str | Path = "out", seed: int | None = None,
              repeats: int | None = None) -> int:
    out_dir = Path(out_dir)
    try:
        key, values = _split_axis(axis)
        # validate the base config once so a typo fails before any cell runs
        resolve(config_path, overrides, seed, repeats)
    except (ConfigError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT

    rows = []
    failed = 0
    for value in values:
        cell_dir = out_dir / _cell_name(key, value)
        try:
            spec = resolve(config_path, [*overrides, f"{key}={value}"], seed, repeats)
            code = _guarded_execute(spec, cell_dir)
        except (ConfigError, InputError) as exc:
            log.error("cell %s=%s: %s", key, value, exc)
            code = EXIT_INPUT
        row = {"key": key, "value": value, "status": "ok" if code == EXIT_OK else "failed",
               "accuracy_mean": "", "accuracy_std": "", "nll_mean": "", "nll_std": ""}
        if code == EXIT_OK:
            final = json.loads((cell_dir / "manifest.json").read_text(encoding="utf-8"))["final"]
            for metric in ("accuracy", "nll"):
                for stat in ("mean", "std"):
                    v = final[metric][stat]
                    row[f"{metric}_{stat}"] = "" if v is None else _num(v)
        else:
            failed += 1
        rows.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if failed:
        log.error("%d of %d sweep cells failed", failed, len(rows))
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="key-value config file, or a manifest.json to re-run")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--repeats", type=int, default=None,
                        help="run this many consecutive seeds starting at the config seed")
    common.add_argument("--seed", type=int, default=None, help="base seed, overrides the config")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress (-v per round)")

    parser = argparse.ArgumentParser(prog="bayesfed", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    sweep = sub.add_parser("sweep", parents=[common], help="run one experiment per axis value")
    sweep.add_argument("--axis", required=True, metavar="KEY=V1,V2,...",
                       help="config key and the values to sweep over")
    sub.add_parser("show-config", parents=[common],
                   help="print the fully resolved config and exit")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.out, args.seed, args.repeats)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.axis, args.overrides, args.out, args.seed, args.repeats)
    try:
        spec = resolve(args.config, args.overrides, args.seed, args.repeats)
    except (ConfigError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    sys.stdout.write(spec.config.to_text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
