"""
Command-line interface for SMAR
Exit codes: 0 success, 1 validation failure (bad dataset, plan or config),
2 runtime error.
"""

import argparse
import sys
import time
from dataclasses import replace
from typing import List, Optional, Sequence

from .annotate import STRATEGIES, annotate_dataset, read_plan, write_plan
from .config import EXPERIMENT_KINDS, load_experiment_config, load_model_config, load_synth_config, settings
from .datagen import LabelOracle, attach_labels, generate_dataset, ingest_jsonl, write_jsonl
from .errors import ArgumentError, ConfigError, ParseError, SchemaError, SmarError
from .harness import RUNNERS, write_plots, write_summary
from .logger import data_log, get_log_manager, get_logger, system_log
from .metrics import METRICS, evaluate, judge, write_metrics_csv
from .model import load_checkpoint, save_checkpoint
from .models import Dataset, Modality, validate_dataset
from .trainer import train

logger = get_logger("smar.cli")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

# the generator's default queue order
DEFAULT_MODALITY_NAMES = ("natural", "video")


class ValidationFailed(SmarError):
    """Input was read but did not pass validation"""


def _csv(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [part.strip() for part in text.split(",") if part.strip()]


def _rounds(text: str) -> Optional[int]:
    if text.strip().lower() in ("inf", "none", "unbounded"):
        return None
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("t-rounds must be >= 0 or inf")
    return value


def read_dataset(path: str, modality_names: Optional[str] = None) -> Dataset:
    """Read JSONL; without explicit names a two-queue dataset uses the generator's names"""
    names = _csv(modality_names)
    dataset = ingest_jsonl(path, names)
    if names is None and len(dataset.modalities) == len(DEFAULT_MODALITY_NAMES):
        dataset = replace(dataset, modalities=tuple(
            Modality(m.id, DEFAULT_MODALITY_NAMES[m.id - 1]) for m in dataset.modalities
        ))
    return dataset


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = load_synth_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    dataset, oracle = generate_dataset(config)
    out = write_jsonl(attach_labels(dataset, oracle), args.out)
    print(f"✅ Generated {len(dataset.queries)} queries / {dataset.n_candidates} candidates -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    dataset = read_dataset(args.data, args.modalities)
    violations = validate_dataset(dataset)
    data_log.log_validation(len(dataset.queries), len(violations))
    if violations:
        for v in violations:
            print(f"❌ {v}")
        print(f"❌ {len(violations)} violation(s) in {args.data}")
        return EXIT_INVALID
    print(f"✅ {args.data}: {len(dataset.queries)} queries, {dataset.n_candidates} candidates, no violations")
    return EXIT_OK


def _require_valid(dataset: Dataset, path: str):
    violations = validate_dataset(dataset)
    if violations:
        raise ValidationFailed(f"{path}: {violations[0]} ({len(violations)} violation(s))")


def cmd_annotate(args) -> int:
    dataset = read_dataset(args.data, args.modalities)
    _require_valid(dataset, args.data)
    oracle = LabelOracle.from_dataset(dataset)
    plan = annotate_dataset(
        dataset, args.strategy, oracle, p=args.p, lo=args.lo, hi=args.hi, t_rounds=args.t_rounds,
        seed=args.seed, anchor_modalities=tuple(_csv(args.anchor_modalities)) if args.anchor_modalities else None,
    )
    out = write_plan(plan, args.out)
    print(f"✅ {args.strategy}: labeled {len(plan.labeled)}/{len(plan.entries)} items "
          f"({plan.labeled_fraction:.1%}), {plan.oracle_calls} oracle calls -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = read_dataset(args.data, args.modalities)
    _require_valid(dataset, args.data)
    plan = read_plan(args.plan)
    if not plan.covers(dataset):
        raise ValidationFailed(f"plan {args.plan} does not cover every candidate of {args.data}")
    model_config, loss_config = load_model_config(args.config)
    validation = read_dataset(args.validation, args.modalities) if args.validation else None

    print(f"🚀 Training on {len(dataset.queries)} queries ({loss_config.objective}, {model_config.epochs} epochs)")
    model, log = train(dataset, plan, model_config, loss_config, validation=validation, run_id=args.out)
    out = save_checkpoint(model, args.out)
    print(f"📊 Loss {log.initial_loss:.6f} -> {log.final_loss:.6f}")
    if log.best_epoch is not None:
        print(f"📊 Selected epoch {log.best_epoch} on validation NDCG")
    print(f"✅ Checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = read_dataset(args.data, args.modalities)
    _require_valid(dataset, args.data)
    metrics = _csv(args.metrics) or list(METRICS)
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ArgumentError(f"unknown metrics {unknown}; expected some of {list(METRICS)}")
    if "f1" in metrics and args.threshold is None:
        raise ArgumentError("f1 needs --threshold")

    model = load_checkpoint(args.model)
    run = judge(model, dataset, None, args.relevance_threshold, args.threshold)
    rows = evaluate(run, metrics, k=args.k, ndcg_k=args.ndcg_k, run_id=args.run_id or args.model)
    out = write_metrics_csv(rows, args.out)
    for row in rows:
        label = row.metric if row.k is None else f"{row.metric}@{row.k}"
        print(f"📊 {label}: {row.value:.4f} ({row.n_queries} queries, {row.n_excluded} excluded)")
    print(f"✅ Metrics written to {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_experiment_config(args.config, args.kind)
    if args.workers is not None:
        config = config.model_copy(update={"workers": args.workers})
    print(f"🚀 Experiment {config.kind} ({config.config_hash()}), seeds {config.seeds}, {config.workers} worker(s)")
    report = RUNNERS[config.kind](config, args.out_dir)
    print(report.mean_rows().to_string(index=False))
    print(f"✅ Report written to {report.path}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.format == "csv":
        print(f"✅ Summary written to {write_summary(args.in_dir)}")
    else:
        for path in write_plots(args.in_dir):
            print(f"✅ Plot written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smar", description="Whole-page reranking with sparse labels")
    parser.add_argument("--log-dir", default=None, help=f"log directory (default {settings.LOG_DIR})")
    parser.add_argument("--log-level", default=None, help=f"log level (default {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_options(p, required=True):
        p.add_argument("--data", required=required, help="dataset JSONL")
        p.add_argument("--modalities", default=None, help="comma-separated modality names in id order")

    p = sub.add_parser("generate", help="write a synthetic labeled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("validate", help="check a dataset file")
    data_options(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("annotate", help="build an annotation plan")
    data_options(p)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--out", required=True)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--lo", type=float, default=None)
    p.add_argument("--hi", type=float, default=None)
    p.add_argument("--t-rounds", type=_rounds, default=None, help="anchor search rounds (integer or inf)")
    p.add_argument("--anchor-modalities", default=None,
                   help="Q1,Q2 modality names (default video,natural, else modality 2 then 1)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("train", help="train a reranker")
    data_options(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--config", required=True, help="flat model./loss. config file")
    p.add_argument("--validation", default=None, help="labeled JSONL used to pick the best epoch")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    data_options(p)
    p.add_argument("--model", required=True)
    p.add_argument("--metrics", default=",".join(m for m in METRICS if m != "f1"))
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ndcg-k", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None, help="F1 decision threshold on model scores")
    p.add_argument("--relevance-threshold", type=float, default=2)
    p.add_argument("--run-id", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("experiment", help="run an experiment grid")
    p.add_argument("kind", choices=EXPERIMENT_KINDS)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("report", help="summarize or plot experiment reports")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", choices=("csv", "plot"), default="csv")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    get_log_manager(args.log_dir, args.log_level)

    started = time.time()
    system_log.log_command_start(args.command, {
        k: v for k, v in vars(args).items() if k not in ("handler", "command")
    })
    try:
        code = args.handler(args)
    except (ValidationFailed, ConfigError, ParseError, SchemaError) as e:
        logger.error(f"{args.command} rejected its input: {e}", extra={"category": "system"})
        print(f"❌ {e}", file=sys.stderr)
        code = EXIT_INVALID
    except KeyboardInterrupt:
        print("⏹️ Interrupted", file=sys.stderr)
        code = EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}", extra={"category": "system"})
        print(f"❌ {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    system_log.log_command_end(args.command, code, time.time() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
