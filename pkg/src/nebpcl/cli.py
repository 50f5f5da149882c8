"""Command-line entry point: ``generate``, ``train``, ``run``, ``evaluate`` and ``report``.

Every subcommand validates its inputs before creating any output and writes a
``manifest.json`` describing the run. Exit codes: 0 success, 2 configuration
error, 3 numerical degeneracy, 4 I/O failure. The log level is read from
``NEBPCL_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .errors import (
    BadAlpha, CheckpointMismatch, ConfigError, DegenerateMessage, EmptyDataset, EmptyRecords,
    NonFiniteLoss, ShapeMismatch, SingularCovariance,
)
from .gnn import load_checkpoint, run_nebp, save_checkpoint
from .particle_bp import run_bp
from .scenario import ScenarioConfig, generate_realization, list_presets, load_preset, load_realization, save_realization
from .training import TrainConfig, config_dict, train, write_loss_trace

log = logging.getLogger("nebpcl")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO = 0, 2, 3, 4
RECORDS_FILE = "records.csv"
MANIFEST_FILE = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config_digest: str
    version: str
    seed: int | None
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)

    def write(self, path) -> None:
        self.finished = _now()
        _atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def config_digest(config: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat()


def _atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def realization_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def load_scenario(source: str) -> ScenarioConfig:
    """A preset name or the path of a JSON scenario file."""
    p = Path(source)
    if p.is_file():
        try:
            return ScenarioConfig.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    if source in list_presets():
        return load_preset(source)
    raise ConfigError(f"{source!r} is neither a scenario file nor a preset ({', '.join(list_presets())})")


def dataset_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"dataset directory {directory} does not exist")
    files = sorted(d.glob("realization_*.json"))
    if not files:
        raise EmptyDataset(f"no realization files in {directory}")
    return files


def _workers(n):
    return max(1, n if n else (os.cpu_count() or 1))


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, *zip(*items)))


def _generate_one(config, out, index, seed):
    path = Path(out) / f"realization_{index:04d}.json"
    save_realization(generate_realization(config, seed=seed), path)
    return path.name


def cmd_generate(args) -> int:
    config = load_scenario(args.config)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    seed = config.rng_seed if args.seed is None else args.seed
    manifest = RunManifest("generate", config_digest(config.to_dict()), __version__, seed, _now())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = [(config, out, i, realization_seed(seed, i)) for i in range(args.count)]
    manifest.outputs = _map(_generate_one, items, _workers(args.workers))
    manifest.write(out / MANIFEST_FILE)
    log.info("wrote %d realizations to %s", args.count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    if not config.dataset or not config.checkpoint:
        raise ConfigError("train config needs 'dataset' and 'checkpoint'")
    files = dataset_files(config.dataset)
    dataset = [load_realization(f) for f in files]
    ckpt = Path(config.checkpoint)
    trace_path = Path(config.loss_trace) if config.loss_trace else ckpt.with_name(ckpt.stem + "_loss.csv")
    manifest = RunManifest("train", config_digest(config_dict(config)), __version__, config.seed, _now())
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    result = train(config, dataset)
    save_checkpoint(ckpt, result.model, result.optimizer, {"epochs_done": result.epochs_done, "seed": config.seed})
    write_loss_trace(trace_path, result.trace)
    manifest.outputs = [str(ckpt), str(trace_path)]
    manifest.write(ckpt.with_name(ckpt.stem + "_manifest.json"))
    log.info("epoch losses %s", ", ".join(f"{x:.3f}" for x in result.epoch_losses))
    return EXIT_OK


def _run_one(path, index, algorithm, K, T, model, seed):
    real = load_realization(path)
    key = (seed, "run", index)
    steps = run_bp(real, K, T, key=key) if algorithm == "bp" else run_nebp(real, model, key=key)
    records = []
    for s, res in enumerate(steps):
        records += ev.records_from_step(index, s, res, real.truth[s], real.mobile)
    return records


def cmd_run(args) -> int:
    if args.K < 1 or args.T < 1:
        raise ConfigError("--K and --T must be >= 1")
    files = dataset_files(args.dataset)
    model = None
    if args.algorithm == "bp":
        if args.checkpoint:
            log.warning("algorithm bp ignores --checkpoint %s", args.checkpoint)
    else:
        if not args.checkpoint:
            raise ConfigError("algorithm nebp requires --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        if model.K != args.K or model.T != args.T:
            raise CheckpointMismatch(f"checkpoint has K={model.K}, T={model.T}; flags give K={args.K}, T={args.T}")
    cfg = {"algorithm": args.algorithm, "K": args.K, "T": args.T, "dataset": [f.name for f in files],
           "checkpoint": None if model is None else str(args.checkpoint)}
    manifest = RunManifest("run", config_digest(cfg), __version__, args.seed, _now())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = [(f, i, args.algorithm, args.K, args.T, model, args.seed) for i, f in enumerate(files)]
    records = [r for chunk in _map(_run_one, items, _workers(args.workers)) for r in chunk]
    ev.write_records(out / RECORDS_FILE, records)
    manifest.outputs = [RECORDS_FILE]
    manifest.write(out / MANIFEST_FILE)
    log.info("%s: %d records from %d realizations", args.algorithm, len(records), len(files))
    return EXIT_OK


def _records_path(p) -> Path:
    p = Path(p)
    if p.is_dir():
        p = p / RECORDS_FILE
    if not p.is_file():
        raise ConfigError(f"records file {p} does not exist")
    return p


def _parse_floats(text, default):
    if text is None:
        return np.asarray(default, dtype=float)
    try:
        return np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


def _write_curve(path, key, grid, columns: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, *columns])
        for row, x in enumerate(grid):
            w.writerow([repr(float(x)), *(repr(float(c[row])) for c in columns.values())])


def _curves(records, thresholds, levels):
    return ev.outage_probability(records, thresholds), ev.consistency_curve(records, levels)


def _per_agent(records, thresholds, levels):
    rows = []
    for agent in sorted({r.agent for r in records}):
        sub = [r for r in records if r.agent == agent]
        po, cc = _curves(sub, thresholds, levels)
        rows.append([agent, len(sub), *po, *cc])
    return rows


def cmd_evaluate(args) -> int:
    path = _records_path(args.records)
    thresholds = _parse_floats(args.thresholds, ev.DEFAULT_THRESHOLDS)
    levels = _parse_floats(args.levels, ev.DEFAULT_LEVELS)
    for lv in levels:
        ev.chi_square_bounds(1.0 - lv)
    records = ev.read_records(path)
    if not records:
        raise EmptyRecords(f"{path} holds no records")
    manifest = RunManifest("evaluate", config_digest({"records": str(path), "thresholds": thresholds.tolist(),
                                                     "levels": levels.tolist()}), __version__, None, _now())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    po, cc = _curves(records, thresholds, levels)
    _write_curve(out / "outage.csv", "threshold", thresholds, {"p_out": po})
    _write_curve(out / "consistency.csv", "level", levels, {"accepted": cc})
    manifest.outputs = ["outage.csv", "consistency.csv"]
    if args.per_agent:
        with open(out / "per_agent.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent", "count", *(f"p_out@{t:g}" for t in thresholds), *(f"accepted@{lv:g}" for lv in levels)])
            w.writerows(_per_agent(records, thresholds, levels))
        manifest.outputs.append("per_agent.csv")
    manifest.write(out / MANIFEST_FILE)
    return EXIT_OK


def _labelled(items):
    out = {}
    for item in items:
        label, sep, path = item.partition("=")
        if not sep or not label:
            raise ConfigError(f"--records expects label=path, got {item!r}")
        if label in out:
            raise ConfigError(f"duplicate label {label!r}")
        out[label] = _records_path(path)
    return out


def cmd_report(args) -> int:
    sources = _labelled(args.records)
    thresholds = _parse_floats(args.thresholds, ev.DEFAULT_THRESHOLDS)
    levels = _parse_floats(args.levels, ev.DEFAULT_LEVELS)
    loaded = {label: ev.read_records(p) for label, p in sources.items()}
    for label, recs in loaded.items():
        if not recs:
            raise EmptyRecords(f"records for {label!r} are empty")
    cfg = {"records": {k: str(v) for k, v in sources.items()}, "thresholds": thresholds.tolist(), "levels": levels.tolist()}
    manifest = RunManifest("report", config_digest(cfg), __version__, None, _now())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = {label: _curves(recs, thresholds, levels) for label, recs in loaded.items()}
    _write_curve(out / "outage.csv", "threshold", thresholds, {k: v[0] for k, v in curves.items()})
    _write_curve(out / "consistency.csv", "level", levels, {k: v[1] for k, v in curves.items()})
    manifest.outputs = ["outage.csv", "consistency.csv"]
    manifest.write(out / MANIFEST_FILE)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nebpcl", description="Particle BP and neural enhanced BP for cooperative localization")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate realizations")
    g.add_argument("--config", required=True, help="scenario JSON file or preset name")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=None, help="defaults to the config's rng_seed")
    g.add_argument("--workers", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an NEBP model")
    t.add_argument("--config", required=True, help="training config JSON")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run BP or NEBP over a dataset and write evaluation records")
    r.add_argument("--dataset", required=True)
    r.add_argument("--algorithm", choices=["bp", "nebp"], required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--K", type=int, default=1000)
    r.add_argument("--T", type=int, default=1)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="outage and consistency curves for one records file")
    e.add_argument("--records", required=True, help="records.csv or a directory containing it")
    e.add_argument("--out", required=True)
    e.add_argument("--thresholds", help="comma-separated meters")
    e.add_argument("--levels", help="comma-separated confidence levels")
    e.add_argument("--per-agent", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("report", help="merge curves of several record sets")
    c.add_argument("--records", nargs="+", required=True, metavar="LABEL=PATH")
    c.add_argument("--out", required=True)
    c.add_argument("--thresholds")
    c.add_argument("--levels")
    c.set_defaults(func=cmd_report)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (DegenerateMessage, NonFiniteLoss, SingularCovariance)):
        return EXIT_DEGENERATE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ConfigError, CheckpointMismatch, ShapeMismatch, EmptyDataset, EmptyRecords, BadAlpha,
                        ValueError, KeyError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NEBPCL_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
