"""Damerau-Levenshtein similarity and the cross-validation experiment harness."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

from . import decode
from .decode import DecodeConfig
from .eventlog import EventLog, Example, FoldPlan, make_examples, split_fold
from .features import Vocabulary
from .model import AstonConfig, AstonModel, build_model, save, train

logger = logging.getLogger(__name__)


def damerau_levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Optimal-string-alignment distance (adjacent transpositions cost 1).

    >>> damerau_levenshtein("AB", "BA")
    1
    >>> damerau_levenshtein("kitten", "sitting")
    3
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return n + m
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
            if i > 1 and j > 1 and ai == b[j - 2] and a[i - 2] == b[j - 1]:
                best = min(best, d[i - 2][j - 2] + 1)
            d[i][j] = best
    return d[n][m]


def dl_norm(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """``1 - distance / max(len)``; two empty sequences count as a perfect match."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - damerau_levenshtein(a, b) / longest


@dataclass(frozen=True)
class FoldResult:
    fold: int
    strategy: str
    dl_norm_mean: float
    pred_len_mean: float
    gold_len_mean: float
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("FoldResult needs at least one example")
        if not 0.0 <= self.dl_norm_mean <= 1.0:
            raise ValueError("similarity must lie in [0, 1]")


@dataclass
class PredictionRow:
    case_id: str
    prefix_len: int
    predicted: tuple[str, ...]
    gold: tuple[str, ...]


def strategy_name(cfg: DecodeConfig) -> str:
    return cfg.strategy


def evaluate_fold(
    model: AstonModel,
    examples: Sequence[Example],
    decode_configs: Sequence[DecodeConfig],
    fold: int = 0,
    vocab: Vocabulary | None = None,
    predictions: dict[str, list[PredictionRow]] | None = None,
) -> list[FoldResult]:
    """Decode every example under each configuration and average DL similarity.

    The random strategy uses seed ``cfg.seed + index`` for the example at ``index``.
    If ``predictions`` is given it is filled with per-strategy rows.
    """
    if vocab is not None:
        model.check_vocab(vocab)
    if not examples:
        raise ValueError("no test examples")
    feats = [model.featurize(ex.prefix) for ex in examples]
    golds = [ex.gold_suffix for ex in examples]
    tokens = model.activity_vocab.tokens
    results = []
    for cfg in decode_configs:
        sims, plens = [], []
        rows = []
        for idx, (f, gold) in enumerate(zip(feats, golds)):
            per_cfg = cfg
            if cfg.strategy == "random":
                per_cfg = DecodeConfig("random", cfg.beam_width, cfg.alpha, cfg.max_len, cfg.seed + idx)
            pred = tuple(tokens[i] for i in decode.predict(model, f, per_cfg))
            sims.append(dl_norm(pred, gold))
            plens.append(len(pred))
            if predictions is not None:
                ex = examples[idx]
                rows.append(PredictionRow(ex.case_id, ex.prefix_len, pred, gold))
        n = len(examples)
        results.append(
            FoldResult(fold, strategy_name(cfg), sum(sims) / n, sum(plens) / n, sum(len(g) for g in golds) / n, n)
        )
        if predictions is not None:
            predictions[strategy_name(cfg)] = rows
    return results


def predictions_csv(rows: Sequence[PredictionRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "prefix_len", "predicted_suffix", "gold_suffix"])
    for r in rows:
        writer.writerow([r.case_id, r.prefix_len, "|".join(r.predicted), "|".join(r.gold)])
    return buf.getvalue()


@dataclass
class ExperimentReport:
    results: list[FoldResult]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    @property
    def strategies(self) -> list[str]:
        seen: list[str] = []
        for r in self.results:
            if r.strategy not in seen:
                seen.append(r.strategy)
        return seen

    def summary(self) -> dict[str, dict[str, float]]:
        """Macro averages over folds for each strategy."""
        out = {}
        for s in self.strategies:
            rows = [r for r in self.results if r.strategy == s]
            k = len(rows)
            out[s] = {
                "dl_norm_mean": sum(r.dl_norm_mean for r in rows) / k,
                "pred_len_mean": sum(r.pred_len_mean for r in rows) / k,
                "gold_len_mean": sum(r.gold_len_mean for r in rows) / k,
                "folds": k,
            }
        return out

    def to_csv(self) -> str:
        lines = ["fold,strategy,dl_norm_mean,pred_len_mean,gold_len_mean,n"]
        for r in self.results:
            lines.append(f"{r.fold},{r.strategy},{r.dl_norm_mean:.6f},{r.pred_len_mean:.6f},{r.gold_len_mean:.6f},{r.n}")
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["strategy,dl_norm_mean,pred_len_mean,gold_len_mean,folds"]
        for s, v in self.summary().items():
            lines.append(f"{s},{v['dl_norm_mean']:.6f},{v['pred_len_mean']:.6f},{v['gold_len_mean']:.6f},{v['folds']}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        summ = self.summary()
        width = max([len(s) for s in summ] + [8])
        lines = [f"{'strategy':<{width}}  {'DL-norm':>8}  {'pred len':>8}  {'gold len':>8}"]
        lines.append("-" * len(lines[0]))
        for s, v in summ.items():
            lines.append(f"{s:<{width}}  {v['dl_norm_mean']:8.4f}  {v['pred_len_mean']:8.2f}  {v['gold_len_mean']:8.2f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "summary.csv").write_text(self.summary_csv(), encoding="utf-8")
        (out / "report.txt").write_text(self.table(), encoding="utf-8")


class FoldError(RuntimeError):
    pass


def _run_fold(log, plan, fold, train_config, decode_configs, val_fraction, min_prefix_len, out_dir):
    try:
        train_log, val_log, test_log = split_fold(log, plan, fold, val_fraction)
        cfg = AstonConfig(**{**asdict(train_config), "seed": train_config.seed + fold})
        model = build_model(train_log, cfg)
        logger.info("fold %d: %d train / %d val / %d test traces", fold, len(train_log), len(val_log), len(test_log))
        ckpt = train(model, make_examples(train_log, min_prefix_len), make_examples(val_log, min_prefix_len), cfg)
        preds: dict[str, list[PredictionRow]] | None = {} if out_dir is not None else None
        results = evaluate_fold(
            model, make_examples(test_log, min_prefix_len), decode_configs, fold, ckpt.activity_vocab, preds
        )
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold{fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            save(ckpt, fold_dir / "model.aston")
            ckpt.write_history(fold_dir / "history.csv")
            for strategy, rows in preds.items():
                (fold_dir / f"predictions_{strategy}.csv").write_text(predictions_csv(rows), encoding="utf-8")
        for r in results:
            logger.info("fold %d %s: dl_norm=%.4f pred_len=%.2f gold_len=%.2f", fold, r.strategy, r.dl_norm_mean, r.pred_len_mean, r.gold_len_mean)
        return results
    except Exception as exc:
        raise FoldError(f"fold {fold}: {exc}") from exc


def run_experiment(
    log: EventLog,
    plan: FoldPlan,
    train_config: AstonConfig,
    decode_configs: Sequence[DecodeConfig],
    val_fraction: float = 0.2,
    min_prefix_len: int = 1,
    out_dir: str | Path | None = None,
    workers: int | None = None,
) -> ExperimentReport:
    """Full k-fold run: fit encoders, train, select by validation loss, evaluate.

    Fold ``i`` trains with seed ``train_config.seed + i``. ``workers`` (default
    from ``ASTON_THREADS``, else 1) folds run in parallel processes; results
    do not depend on it.
    """
    if workers is None:
        workers = int(os.environ.get("ASTON_THREADS", "1") or 1)
    args = [
        (log, plan, i, train_config, list(decode_configs), val_fraction, min_prefix_len, out_dir)
        for i in range(plan.fold_count)
    ]
    if workers > 1 and plan.fold_count > 1:
        with ProcessPoolExecutor(max_workers=min(workers, plan.fold_count)) as pool:
            per_fold = list(pool.map(_run_fold, *zip(*args)))
    else:
        per_fold = [_run_fold(*a) for a in args]
    results = [r for fold_results in per_fold for r in fold_results]
    config = {
        "train": asdict(train_config),
        "decode": [asdict(c) for c in decode_configs],
        "fold_count": plan.fold_count,
        "val_fraction": val_fraction,
        "min_prefix_len": min_prefix_len,
    }
    seeds = {"fold_plan": plan.seed, "train": [train_config.seed + i for i in range(plan.fold_count)]}
    return ExperimentReport(results, config, seeds)
