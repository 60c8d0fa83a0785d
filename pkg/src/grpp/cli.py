"""Command line: ``grpp simulate | train | eval | recover``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .eventstore import (SequenceFormatError, estimate_connection_matrix, infer_num_nodes,
                         load_sequences, save_sequences, split, write_matrix_csv)
from .hawkes import MHPParams, UnstableParametersError, simulate_dataset, source_major, \
    synth_infectivity
from .inference import evaluate, mean_gap, write_metrics
from .model import GRPPModel
from .training import TrainingAborted, TrainConfig, config_field_types, format_config, \
    load_config, train

log = logging.getLogger("grpp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, argv, config: dict, seed, inputs, outputs,
                   started: str) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _events_path(data_dir: str) -> Path:
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    path = d / "events.jsonl"
    if not path.is_file():
        raise UsageError(f"{path} not found")
    return path


def _num_nodes(data_dir: Path, events: Path) -> int:
    meta = data_dir / "meta.json"
    if meta.is_file():
        with open(meta) as fh:
            return int(json.load(fh)["K"])
    return infer_num_nodes(events)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, argv) -> int:
    started = _now()
    out = Path(args.out)
    if args.sequences < 1 or not args.horizon > 0:
        raise UsageError("--sequences must be >= 1 and --horizon > 0")
    A, mu, factor = synth_infectivity(args.dim, args.seed, args.base_scale,
                                      args.excitation_scale, args.omega,
                                      structure=args.structure)
    params = MHPParams(mu, A, args.omega)
    data = simulate_dataset(params, args.sequences, args.horizon, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_sequences(out / "events.jsonl", data)
    write_matrix_csv(out / "ground_truth_A.csv", source_major(A))
    write_matrix_csv(out / "mu.csv", mu[:, None])
    meta = {"K": args.dim, "omega": args.omega, "seed": args.seed, "rescale_factor": factor,
            "structure": args.structure, "base_scale": args.base_scale,
            "excitation_scale": args.excitation_scale, "horizon": args.horizon,
            "sequences": args.sequences}
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [out / n for n in ("events.jsonl", "ground_truth_A.csv", "mu.csv", "meta.json")]
    write_manifest(out, "simulate", argv, meta, args.seed, [], outputs, started)
    log.info("wrote %d sequences (%d events) to %s", len(data), data.n_events(), out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    overrides = {}
    for name in config_field_types():
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.ablate == "wogp":
        overrides["disable_graph_propagation"] = True
    elif args.ablate == "woat":
        overrides["disable_history_attention"] = True
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config error: {exc}") from None


def cmd_train(args, argv) -> int:
    started = _now()
    events = _events_path(args.data)
    cfg = _train_config(args)
    K = _num_nodes(Path(args.data), events)
    data = load_sequences(events, K)
    train_d, valid_d, _ = split(data, seed=cfg.seed)
    E = estimate_connection_matrix(train_d)
    model = GRPPModel.create(K, cfg.m, cfg.d, cfg.seed, E, cfg.tau, cfg.ablation)
    model.meta = {"split_seed": cfg.seed, "data": str(events)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("epoch %d  train %.4f  valid_nll %.4f  graph %.4f", row["epoch"],
                 row["train_loss"], row["valid_nll"], row["valid_graph_loss"])

    best, report = train(model, train_d, valid_d, cfg, deterministic=args.deterministic,
                         progress=progress)
    best.save(out / "checkpoint.json")
    report.write_csv(out / "report.csv", include_seconds=not args.deterministic)
    tag = {"none": "full", "wogp": "woGP", "woat": "woAT"}[cfg.ablation]
    summary = report.to_json()
    summary["ablation"] = tag
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    (out / "config.txt").write_text(format_config(cfg))
    write_matrix_csv(out / "connection_matrix.csv", E)
    outputs = [out / n for n in ("checkpoint.json", "report.csv", "report.json", "config.txt",
                                 "connection_matrix.csv")]
    config = dataclasses.asdict(cfg)
    config["ablation"] = tag
    inputs = [events] + ([Path(args.config)] if args.config else [])
    write_manifest(out, "train", argv, config, cfg.seed, inputs, outputs, started)
    return EXIT_OK


def _load_checkpoint(path) -> GRPPModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return GRPPModel.load(path)


def cmd_eval(args, argv) -> int:
    started = _now()
    model = _load_checkpoint(args.checkpoint)
    events = _events_path(args.data)
    data = load_sequences(events, model.K)
    train_d, _, test_d = split(data, seed=int(model.meta.get("split_seed", 0)))
    test_d = type(test_d)(test_d.K, tuple(s for s in test_d if len(s) >= 2))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate(model, test_d, scale=mean_gap(train_d),
                       predictions_out=out / "predictions.csv")
    write_metrics(out / "metrics.json", metrics)
    write_manifest(out, "eval", argv, {"split_seed": model.meta.get("split_seed", 0)},
                   model.seed, [Path(args.checkpoint), events],
                   [out / "metrics.json", out / "predictions.csv"], started)
    log.info("rmse %.4f accuracy %.4f over %d events", metrics.rmse, metrics.accuracy,
             metrics.n_events)
    return EXIT_OK


def cmd_recover(args, argv) -> int:
    model = _load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out, model.infectivity())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grpp", description="Graph regularized point process")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate synthetic MHP propagation data")
    s.add_argument("--dim", type=int, choices=(10, 100), required=True)
    s.add_argument("--sequences", type=int, required=True)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--omega", type=float, default=1.0)
    s.add_argument("--base-scale", type=float, default=1.0,
                   help="multiplier on the U[0, 0.001] base rates")
    s.add_argument("--excitation-scale", type=float, default=1.0,
                   help="multiplier on A before the stability shrink")
    s.add_argument("--structure", choices=("dense", "banded"), default="dense",
                   help="K=10 factor layout (K=100 is always banded)")

    t = sub.add_parser("train", help="train GRPP on a simulated/loaded dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=("wogp", "woat"))
    t.add_argument("--deterministic", action="store_true")
    for name, typ in config_field_types().items():
        if name in ("disable_graph_propagation", "disable_history_attention"):
            continue
        conv = {"int": int, "float": float, "str": str}.get(typ, typ)
        t.add_argument(_flag(name), dest=name, type=conv, default=None)

    e = sub.add_parser("eval", help="metrics on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("recover", help="write the learned infectivity matrix")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "recover": cmd_recover}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"grpp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnstableParametersError, TrainingAborted, SequenceFormatError, ValueError,
            FloatingPointError, OSError) as exc:
        print(f"grpp {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
