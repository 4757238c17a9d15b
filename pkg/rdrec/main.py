#!/usr/bin/env python3
"""
rdrec command line

Subcommands: synth, stats, distill, prepare, train, recommend, evaluate,
explain, pipeline. Exit codes: 0 success, 1 operational failure, 2
configuration or usage error.
"""

import argparse
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import orjson
import structlog

from . import __version__
from .config import LOG_LEVEL, RunConfig, parse_config
from .exceptions import ConfigError, RDRecError
from .services.checkpoint import restore_model
from .services.corpus import (
    ReviewSet,
    SplitSet,
    build_splits,
    compute_stats,
    load_reviews,
    load_splits,
    stats_from_counts,
    write_splits,
)
from .services.distiller import Quadruplet, distill, load_quadruplets, write_quadruplets
from .services.evaluator import (
    MetricReport,
    TrialSet,
    compare_trials,
    evaluate,
    read_trials,
    summarize_trials,
    write_report,
    write_trials,
)
from .services.inference import Recommender, load_rankings, recommend_all, write_rankings
from .services.samples import CandidateSets, build_eval_candidates, load_candidates, write_candidates
from .services.synthetic import SyntheticSpec, write_synthetic_corpus
from .services.textcodec import (
    EntityMap,
    Task,
    Vocab,
    build_vocab,
    load_entities,
    load_vocab,
    save_entities,
    save_vocab,
)
from .services.trainer import BEST_CHECKPOINT, train
from .utils.jsonl import write_json
from .utils.logging import setup_logging
from .utils.reporting import print_table, report_table, stats_table, summary_table, trials_table

logger = structlog.get_logger()

TASKS = {"seq": Task.SR, "topn": Task.TR}
EXPLAIN_TASKS = {"eg": Task.EG, "rg_pref": Task.RG_PREF, "rg_attr": Task.RG_ATTR}


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(cfg: RunConfig, command: str, argv: Sequence[str], inputs: Iterable[Path]) -> Path:
    """Effective config, seed, version and input hashes of this run"""
    hashes = {str(p): sha256_file(Path(p)) for p in inputs if p is not None and Path(p).is_file()}
    path = Path(cfg.paths.work_dir) / "manifest.json"
    write_json(path, {
        "command": command,
        "argv": list(argv),
        "config": cfg.echo(),
        "seed": cfg.seed,
        "version": __version__,
        "inputs": hashes,
    })
    return path


@dataclass
class Prepared:
    reviews: ReviewSet
    splits: SplitSet
    vocab: Vocab
    entities: EntityMap
    quads: List[Quadruplet]
    candidates: CandidateSets

    @property
    def universe(self) -> List[str]:
        return self.reviews.items


def load_prepared(cfg: RunConfig) -> Prepared:
    paths = cfg.paths
    reviews, splits = load_splits(paths.splits)
    quads = load_quadruplets(paths.quads) if Path(paths.quads).exists() else []
    candidates = load_candidates(paths.candidates) if Path(paths.candidates).exists() else {}
    return Prepared(reviews, splits, load_vocab(paths.vocab), load_entities(paths.entities), quads, candidates)


def _progress(args) -> bool:
    return bool(getattr(args, "progress", False)) and sys.stderr.isatty()


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = SyntheticSpec(n_users=args.users, n_items=args.items, seed=cfg.seed)
    write_synthetic_corpus(cfg.paths.reviews, spec)
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    if args.counts:
        stats = stats_from_counts(*args.counts)
    else:
        stats = compute_stats(load_reviews(cfg.paths.reviews, cfg.corpus.lenient))
    display = stats.display()
    print_table(stats_table(display))
    if args.json:
        sys.stdout.write(orjson.dumps(display, option=orjson.OPT_SORT_KEYS).decode() + "\n")
    write_json(Path(cfg.paths.reports) / "stats.json", display)
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    rs = load_reviews(cfg.paths.reviews, cfg.corpus.lenient)
    result = distill(rs, cfg.distill, progress=_progress(args))
    write_quadruplets(cfg.paths.quads, result.quadruplets)
    summary = result.summary.as_dict()
    write_json(Path(cfg.paths.reports) / "distill_summary.json", summary)
    print_table(summary_table(summary, "Distillation"))
    if result.summary.exit_code:
        logger.error("Too many backend failures", failure_ratio=result.summary.failure_ratio)
    return result.summary.exit_code


def cmd_prepare(args, cfg: RunConfig) -> int:
    rs = load_reviews(cfg.paths.reviews, cfg.corpus.lenient)
    quads: List[Quadruplet] = []
    if Path(cfg.paths.quads).exists():
        quads = load_quadruplets(cfg.paths.quads)
    else:
        logger.warning("No quadruplets found, rationale samples disabled", path=str(cfg.paths.quads))

    splits = build_splits(rs, cfg.corpus.min_len, cfg.seed)
    write_splits(rs, splits, cfg.paths.splits)

    entities = EntityMap(rs.users, rs.items)
    save_entities(entities, cfg.paths.entities)

    texts = [it.review_text for it in rs.interactions]
    texts += [q.preference for q in quads] + [q.attribute for q in quads]
    vocab = build_vocab(texts, cfg.codec.vocab_cap)
    save_vocab(vocab, cfg.paths.vocab)

    candidates = build_eval_candidates(splits, rs.items, cfg.trainer.n_negatives, cfg.seed)
    write_candidates(candidates, cfg.paths.candidates)
    logger.info("Prepared", users=len(splits.users), excluded=len(splits.excluded_users), vocab=len(vocab),
                quadruplets=len(quads))
    return 0


def _train(cfg: RunConfig, prepared: Prepared, progress: bool):
    tcfg = cfg.trainer
    if not prepared.quads and (tcfg.use_preference or tcfg.use_attribute):
        logger.warning("No quadruplets, training without rationale generation")
        cfg = cfg.model_copy(update={"trainer": tcfg.model_copy(update={"use_preference": False,
                                                                         "use_attribute": False})})
    return train(cfg, prepared.vocab, prepared.entities, prepared.splits, prepared.quads, prepared.candidates,
                 prepared.universe, progress=progress)


def cmd_train(args, cfg: RunConfig) -> int:
    result = _train(cfg, load_prepared(cfg), _progress(args))
    summary = {
        "best_checkpoint": str(result.best_checkpoint),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": result.epochs_run,
        "final_train_loss": result.step_losses[-1] if result.step_losses else None,
    }
    write_json(Path(cfg.paths.reports) / "train_summary.json", summary)
    print_table(summary_table(summary, "Training"))
    return 0


def _recommender(cfg: RunConfig, prepared: Prepared, checkpoint: Optional[Path]) -> Recommender:
    path = checkpoint or Path(cfg.paths.checkpoints) / BEST_CHECKPOINT
    model, _ = restore_model(path)
    return Recommender(model, prepared.vocab, prepared.entities, cfg.beam, cfg.corpus.max_history)


def _rankings(cfg: RunConfig, prepared: Prepared, recommender: Recommender, task: Task, split: str,
              progress: bool):
    return recommend_all(
        recommender, prepared.splits, task, prepared.universe,
        candidates=prepared.candidates, split=split, sr_candidates=cfg.evaluate.sr_candidates,
        n_negatives=cfg.trainer.n_negatives, strict=cfg.evaluate.strict_candidates, seed=cfg.seed,
        progress=progress,
    )


def _ranked_path(cfg: RunConfig, task_name: str, split: str) -> Path:
    return Path(cfg.paths.reports) / f"ranked_{task_name}_{split}.jsonl"


def cmd_recommend(args, cfg: RunConfig) -> int:
    prepared = load_prepared(cfg)
    task = TASKS[args.task]
    rankings = _rankings(cfg, prepared, _recommender(cfg, prepared, args.checkpoint), task, args.split,
                         _progress(args))
    output = args.output or _ranked_path(cfg, args.task, args.split)
    write_rankings(rankings, output, k=args.k)
    logger.info("Rankings written", path=str(output), users=len(rankings))
    return 0


def _evaluate_once(cfg: RunConfig, prepared: Prepared, task_name: str, split: str, progress: bool,
                   checkpoint: Optional[Path] = None) -> MetricReport:
    rankings = _rankings(cfg, prepared, _recommender(cfg, prepared, checkpoint), TASKS[task_name], split, progress)
    write_rankings(rankings, _ranked_path(cfg, task_name, split))
    return evaluate(rankings, prepared.splits, cfg.evaluate.ks, split)


def cmd_evaluate(args, cfg: RunConfig) -> int:
    prepared = load_prepared(cfg)
    reports_dir = Path(cfg.paths.reports)
    trials = cfg.evaluate.trials

    if trials == 1:
        if args.rankings:
            report = evaluate(load_rankings(args.rankings), prepared.splits, cfg.evaluate.ks, args.split)
        else:
            report = _evaluate_once(cfg, prepared, args.task, args.split, _progress(args), args.checkpoint)
        write_report(report, args.output or reports_dir / f"report_{args.task}.json")
        print_table(report_table(report.to_record(), f"{args.task} ({args.split})"))
        if args.baseline:
            logger.warning("Significance testing needs --trials >= 2, baseline ignored")
        return 0

    reports = []
    seeds = [cfg.seed + n for n in range(trials)]
    for seed in seeds:
        trial_paths = cfg.paths.model_copy(update={"checkpoints": Path(cfg.paths.checkpoints) / f"trial_{seed}"})
        trial_cfg = cfg.model_copy(update={"seed": seed, "paths": trial_paths})
        result = _train(trial_cfg, prepared, _progress(args))
        report = _evaluate_once(trial_cfg, prepared, args.task, args.split, _progress(args), result.best_checkpoint)
        write_report(report, reports_dir / f"report_{args.task}_seed{seed}.json")
        reports.append(report)

    trial_set = TrialSet.from_reports(reports, seeds)
    write_trials(trial_set, args.output or reports_dir / f"trials_{args.task}.json")
    summary = summarize_trials(trial_set)
    comparisons = None
    if args.baseline:
        comparisons = compare_trials(trial_set, read_trials(args.baseline), paired=cfg.evaluate.paired)
        write_json(reports_dir / f"ttest_{args.task}.json", {
            name: {"t": c.t_statistic, "p": c.p_value, "dof": c.dof} for name, c in comparisons.items()
        })
    print_table(trials_table(summary, comparisons, f"{args.task}: {trials} trials"))
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    tasks = [EXPLAIN_TASKS[args.task]] if args.task else list(EXPLAIN_TASKS.values())
    for task in tasks:
        if task in (Task.EG, Task.RG_ATTR) and not args.item:
            raise ConfigError(f"{task.value} needs --item", code="MISSING_ARGUMENT")
        if task in (Task.EG, Task.RG_PREF) and not args.user:
            raise ConfigError(f"{task.value} needs --user", code="MISSING_ARGUMENT")
    prepared = load_prepared(cfg)
    recommender = _recommender(cfg, prepared, args.checkpoint)
    outputs: Dict[str, str] = {}
    for task in tasks:
        outputs[task.value] = recommender.generate_text(task, user=args.user, item=args.item)
    print_table(summary_table(outputs, "Generated text"))
    return 0


def cmd_pipeline(args, cfg: RunConfig) -> int:
    if not Path(cfg.paths.reviews).exists():
        logger.info("No reviews file, writing the synthetic corpus", path=str(cfg.paths.reviews))
        write_synthetic_corpus(cfg.paths.reviews, SyntheticSpec(seed=cfg.seed))
    cmd_stats(argparse.Namespace(counts=None, json=False), cfg)
    code = cmd_distill(args, cfg)
    if code:
        return code
    cmd_prepare(args, cfg)
    prepared = load_prepared(cfg)
    result = _train(cfg, prepared, _progress(args))
    for task_name in ("seq", "topn"):
        report = _evaluate_once(cfg, prepared, task_name, "test", _progress(args), result.best_checkpoint)
        write_report(report, Path(cfg.paths.reports) / f"report_{task_name}.json")
        print_table(report_table(report.to_record(), f"{task_name} (test)"))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "distill": cmd_distill,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdrec", description="Rationale-distilled text-to-text recommender")
    parser.add_argument("--version", action="version", version=f"rdrec {__version__}")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. trainer.patience=3 (repeatable)")
    parser.add_argument("--work-dir", type=Path, help="run directory (paths.work_dir)")
    parser.add_argument("--seed", type=int, help="base random seed")
    parser.add_argument("--log-format", choices=["json", "console"], default="json", help="log renderer")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="log level (default from RDREC_LOG_LEVEL)")
    parser.add_argument("--progress", action="store_true", help="show progress bars on a terminal")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write the bundled synthetic review corpus")
    p.add_argument("--output", type=Path, help="reviews file to write (paths.reviews)")
    p.add_argument("--users", type=int, default=30, help="number of users (default 30)")
    p.add_argument("--items", type=int, default=25, help="number of items (default 25)")

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--input", type=Path, help="reviews JSON-lines file (paths.reviews)")
    p.add_argument("--counts", type=int, nargs=3, metavar=("USERS", "ITEMS", "REVIEWS"),
                   help="compute statistics from raw counts")
    p.add_argument("--json", action="store_true", help="also print the statistics as JSON")

    p = sub.add_parser("distill", help="distill preference/attribute rationales from reviews")
    p.add_argument("--input", type=Path, help="reviews JSON-lines file (paths.reviews)")
    p.add_argument("--output", type=Path, help="quadruplets file (paths.quads)")
    p.add_argument("--backend", choices=["mock", "http", "openai"], help="LLM backend (distill.kind)")
    p.add_argument("--endpoint", help="backend URL (distill.endpoint)")
    p.add_argument("--concurrency", type=int, help="in-flight requests (distill.max_concurrency)")
    p.add_argument("--no-cache", action="store_true", help="bypass the response cache")

    p = sub.add_parser("prepare", help="build splits, vocabulary, entity map and candidate sets")
    p.add_argument("--input", type=Path, help="reviews JSON-lines file (paths.reviews)")
    p.add_argument("--quads", type=Path, help="quadruplets file (paths.quads)")

    p = sub.add_parser("train", help="train the recommender")
    p.add_argument("--ratios", help="EG:RG:SR:TR sampling ratio, e.g. 1:1:1:3")
    p.add_argument("--max-epochs", type=int, help="epoch limit (trainer.max_epochs)")

    for name, help_text in (("recommend", "write ranked lists"), ("evaluate", "HR@k / NDCG@k")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--task", choices=sorted(TASKS), default="topn", help="seq (sequential) or topn")
        p.add_argument("--checkpoint", type=Path, help="checkpoint (default: best checkpoint of the run)")
        p.add_argument("--input", type=Path, help="splits file (paths.splits)")
        p.add_argument("--split", choices=["val", "test"], default="test", help="held-out split")
        p.add_argument("--output", type=Path, help="output file")
        if name == "recommend":
            p.add_argument("--k", type=int, help="keep only the top k items per user")
        else:
            p.add_argument("--rankings", type=Path, help="evaluate an existing ranked-list file")
            p.add_argument("--trials", type=int, help="retrain and evaluate with seeds base..base+N-1")
            p.add_argument("--baseline", type=Path, help="baseline trials/report JSON for t-tests")
            p.add_argument("--paired", action="store_true", help="paired instead of Welch t-test")

    p = sub.add_parser("explain", help="generate explanation and rationale text")
    p.add_argument("--checkpoint", type=Path, help="checkpoint (default: best checkpoint of the run)")
    p.add_argument("--user", help="user id")
    p.add_argument("--item", help="item id")
    p.add_argument("--task", choices=sorted(EXPLAIN_TASKS), help="one task (default: all that apply)")

    p = sub.add_parser("pipeline", help="stats, distill, prepare, train and evaluate in one go")
    p.add_argument("--input", type=Path, help="reviews file; the synthetic corpus is written when missing")
    p.add_argument("--backend", choices=["mock", "http", "openai"], help="LLM backend (distill.kind)")
    p.add_argument("--endpoint", help="backend URL (distill.endpoint)")
    p.add_argument("--concurrency", type=int, help="in-flight requests (distill.max_concurrency)")
    p.add_argument("--no-cache", action="store_true", help="bypass the response cache")
    return parser


def config_updates(args) -> Dict[str, Any]:
    """Dotted config keys set by explicit command-line flags"""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    updates: Dict[str, Any] = {
        "paths.work_dir": get("work_dir"),
        "seed": get("seed"),
        "distill.kind": get("backend"),
        "distill.endpoint": get("endpoint"),
        "distill.max_concurrency": get("concurrency"),
        "trainer.ratios": get("ratios"),
        "trainer.max_epochs": get("max_epochs"),
        "evaluate.trials": get("trials"),
        "paths.quads": get("quads"),
    }
    if get("no_cache"):
        updates["distill.use_cache"] = False
    if get("paired"):
        updates["evaluate.paired"] = True
    command = args.command
    if command == "synth":
        updates["paths.reviews"] = get("output")
    elif command in ("stats", "distill", "prepare", "pipeline"):
        updates["paths.reviews"] = get("input")
        if command == "distill":
            updates["paths.quads"] = get("output")
    elif command in ("recommend", "evaluate"):
        updates["paths.splits"] = get("input")
    return {key: (str(value) if isinstance(value, Path) else value) for key, value in updates.items()}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level, args.log_format)
    try:
        cfg = parse_config(args.config, args.overrides, config_updates(args))
        cfg.paths.ensure_dirs()
        inputs = [args.config, cfg.paths.reviews, cfg.paths.quads, cfg.paths.splits, cfg.paths.vocab,
                  cfg.paths.entities, cfg.paths.candidates, getattr(args, "checkpoint", None),
                  getattr(args, "rankings", None), getattr(args, "baseline", None)]
        write_manifest(cfg, args.command, argv, [Path(p) for p in inputs if p is not None])
        code = COMMANDS[args.command](args, cfg)
    except RDRecError as e:
        logger.error("Command failed", command=args.command, stage=e.stage, code=e.code, error=str(e))
        sys.stderr.write(f"error: {e}\n")
        return e.exit_code
    logger.info("Command finished", command=args.command, exit_code=code)
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
