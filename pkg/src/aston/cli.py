"""Command-line entry point: ``aston prepare|train|predict|evaluate|compare``.

Settings resolve as built-in defaults < ``--config`` key=value file < flags.
The effective settings are written as ``config.json`` next to every output.
Progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import decode, evaluation
from .decode import STRATEGIES, DecodeConfig
from .eventlog import ColumnMap, EventLog, EventLogError, FoldPlan, make_examples, parse_csv, split_fold, train_val_split
from .model import AstonConfig, CheckpointError, TrainingDivergedError, VocabularyMismatchError, build_model, load_checkpoint, save, train

logger = logging.getLogger("aston")

DEFAULTS = {
    "col_case": "case_id",
    "col_activity": "activity",
    "col_timestamp": "timestamp",
    "col_resource": "resource",
    "time_format": None,
    "strategy": "beam_norm",
    "beam_width": 5,
    "alpha": 0.65,
    "max_len": None,
    "epochs": 150,
    "batch_size": 64,
    "hidden": 32,
    "embedding": 32,
    "dropout": 0.1,
    "lr": 0.005,
    "folds": 5,
    "val_fraction": 0.2,
    "seed": 0,
    "min_prefix_len": 1,
    "fold": None,
}

_TYPES = {
    "beam_width": int,
    "alpha": float,
    "max_len": int,
    "epochs": int,
    "batch_size": int,
    "hidden": int,
    "embedding": int,
    "dropout": float,
    "lr": float,
    "folds": int,
    "val_fraction": float,
    "seed": int,
    "min_prefix_len": int,
    "fold": int,
}


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for key, cast in _TYPES.items():
        if settings[key] is not None and not isinstance(settings[key], cast):
            try:
                settings[key] = cast(settings[key])
            except ValueError as exc:
                raise UsageError(f"{key}: {exc}") from exc
    if settings["strategy"] not in STRATEGIES:
        raise UsageError(f"unknown strategy {settings['strategy']!r}; valid strategies: {', '.join(STRATEGIES)}")
    return settings


def column_map(s: dict) -> ColumnMap:
    return ColumnMap(s["col_case"], s["col_activity"], s["col_timestamp"], s["col_resource"] or None, s["time_format"])


def train_config(s: dict) -> AstonConfig:
    return AstonConfig(
        embedding_dim=s["embedding"],
        hidden_dim=s["hidden"],
        dropout=s["dropout"],
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        learning_rate=s["lr"],
        seed=s["seed"],
    )


def decode_config(s: dict, strategy: str | None = None) -> DecodeConfig:
    return DecodeConfig(strategy or s["strategy"], s["beam_width"], s["alpha"], s["max_len"], s["seed"])


def _read_log(args, s) -> EventLog:
    path = Path(args.log)
    if path.is_dir():
        raise UsageError(f"--log must be a CSV file, got directory {path}")
    if not path.exists():
        raise UsageError(f"--log: no such file {path}")
    return parse_csv(path, column_map(s))


def _write_config(out: Path, command: str, s: dict, extra: dict | None = None, name: str = "config.json") -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "settings": s, **(extra or {})}
    (out / name).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def log_statistics(log: EventLog) -> dict:
    lengths = [len(t) for t in log]
    return {
        "traces": len(log),
        "activities": len(log.activities),
        "events": log.n_events,
        "avg_case_length": sum(lengths) / len(lengths),
        "max_case_length": max(lengths),
        "variants": len({t.activities for t in log}),
    }


# -- commands ----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    s = resolve(args)
    log = _read_log(args, s)
    stats = log_statistics(log)
    print(f"{stats['traces']} traces, {stats['activities']} activities, {stats['events']} events")
    print(f"avg case length {stats['avg_case_length']:.2f}, max case length {stats['max_case_length']}, {stats['variants']} variants")
    if args.out:
        out = Path(args.out)
        _write_config(out, "prepare", s)
        FoldPlan.create(log, s["folds"], s["seed"]).save(out / "fold_plan.json")
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _train_split(log: EventLog, s: dict, plan_path: str | None):
    if s["fold"] is None:
        train_traces, val_traces = train_val_split(list(log.traces), s["val_fraction"], s["seed"])
        return EventLog(tuple(train_traces), log.source_path), EventLog(tuple(val_traces), log.source_path)
    plan = FoldPlan.load(plan_path) if plan_path else FoldPlan.create(log, s["folds"], s["seed"])
    if not 0 <= s["fold"] < plan.fold_count:
        raise UsageError(f"--fold must be in [0, {plan.fold_count})")
    train_log, val_log, _ = split_fold(log, plan, s["fold"], s["val_fraction"])
    return train_log, val_log


def cmd_train(args) -> int:
    s = resolve(args)
    log = _read_log(args, s)
    out = Path(args.out)
    train_log, val_log = _train_split(log, s, args.plan)
    cfg = train_config(s)
    model = build_model(train_log, cfg)
    logger.info("training on %d traces, validating on %d", len(train_log), len(val_log))
    ckpt = train(model, make_examples(train_log, s["min_prefix_len"]), make_examples(val_log, s["min_prefix_len"]), cfg)
    path = Path(args.checkpoint) if args.checkpoint else out / "model.aston"
    _write_config(out, "train", s, {"train": asdict(cfg), "checkpoint": str(path)})
    path.parent.mkdir(parents=True, exist_ok=True)
    save(ckpt, path)
    ckpt.write_history(out / "history.csv")
    logger.info("best epoch %d (val loss %.4f); wrote %s", ckpt.best_epoch, ckpt.best_val_loss, path)
    return 0


def cmd_predict(args) -> int:
    s = resolve(args)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    log = _read_log(args, s)
    unseen = sorted(a for a in log.activities if a not in model.activity_vocab.tokens)
    if unseen:
        logger.warning("activities unknown to the checkpoint are read as UNK: %s", ", ".join(unseen))
    cfg = decode_config(s)
    header = f"strategy={cfg.strategy} beam_width={cfg.beam_width} alpha={cfg.alpha} max_len={cfg.max_len} seed={cfg.seed}"
    print(header)
    logger.info("decoding with %s", header)
    if args.prefixes_only:
        rows = []
        tokens = model.activity_vocab.tokens
        for idx, trace in enumerate(log):
            per = DecodeConfig(cfg.strategy, cfg.beam_width, cfg.alpha, cfg.max_len, cfg.seed + idx)
            pred = tuple(tokens[i] for i in decode.predict(model, model.featurize(trace.events), per))
            rows.append(evaluation.PredictionRow(trace.case_id, len(trace), pred, ()))
    else:
        preds: dict = {}
        evaluation.evaluate_fold(model, make_examples(log, s["min_prefix_len"]), [cfg], predictions=preds)
        rows = preds[cfg.strategy]
    out = Path(args.out)
    target = out / f"predictions_{cfg.strategy}.csv" if out.suffix != ".csv" else out
    _write_config(
        target.parent, "predict", s, {"decode": asdict(cfg), "checkpoint": str(args.checkpoint)}, target.stem + ".config.json"
    )
    target.write_text(evaluation.predictions_csv(rows), encoding="utf-8")
    logger.info("wrote %d predictions to %s", len(rows), target)
    return 0


def _experiment(args, strategies) -> int:
    s = resolve(args)
    log = _read_log(args, s)
    plan = FoldPlan.load(args.plan) if args.plan else FoldPlan.create(log, s["folds"], s["seed"])
    cfg = train_config(s)
    configs = [decode_config(s, name) for name in strategies]
    out = Path(args.out)
    report = evaluation.run_experiment(log, plan, cfg, configs, s["val_fraction"], s["min_prefix_len"], out)
    _write_config(out, args.command, s, {"report": report.config, "seeds": report.seeds})
    report.write(out)
    print(report.table(), end="")
    return 0


def cmd_evaluate(args) -> int:
    return _experiment(args, [resolve(args)["strategy"]])


def cmd_compare(args) -> int:
    return _experiment(args, STRATEGIES)


# -- parser ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (flags take precedence)")
    p.add_argument("--log", required=True, help="event log CSV")
    p.add_argument("--col-case", dest="col_case")
    p.add_argument("--col-activity", dest="col_activity")
    p.add_argument("--col-timestamp", dest="col_timestamp")
    p.add_argument("--col-resource", dest="col_resource", help="empty string: no resource column")
    p.add_argument("--time-format", dest="time_format", help="strptime format; default ISO 8601")
    p.add_argument("--seed", type=int)
    p.add_argument("--min-prefix-len", dest="min_prefix_len", type=int)


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embedding", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--plan", help="fold plan JSON written by `prepare`")


def _decoding(p: argparse.ArgumentParser, strategy: bool = True) -> None:
    if strategy:
        p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-len", dest="max_len", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aston", description="Activity suffix prediction with an attention encoder-decoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="log statistics and a fold plan")
    _common(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _common(p)
    _training(p)
    p.add_argument("--fold", type=int, help="train on this fold's split instead of a plain train/val split")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.aston)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode suffixes with a trained checkpoint")
    _common(p)
    _decoding(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output CSV or directory")
    p.add_argument("--prefixes-only", action="store_true", help="treat every trace of --log as one running prefix")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="k-fold experiment for one strategy")
    _common(p)
    _training(p)
    _decoding(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="k-fold experiment for all four strategies")
    _common(p)
    _training(p)
    _decoding(p, strategy=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (EventLogError, CheckpointError, VocabularyMismatchError, TrainingDivergedError, evaluation.FoldError, OSError, ValueError) as exc:
        print(f"aston: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
