"""
Experiment pipelines for SMAR
Every experiment is a grid of (variant, seed) cells. A cell generates the
synthetic dataset for its seed, splits it 70/15/15 by query, annotates the
training split, trains a reranker and evaluates it on the test split.
Cells are independent, run in a process pool when workers > 1, and are
collected in grid order.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .annotate import AnnotationPlan, annotate_dataset  # noqa: E402
from .config import ExperimentConfig, LossConfig  # noqa: E402
from .datagen import generate_dataset  # noqa: E402
from .errors import ExperimentError, SmarError  # noqa: E402
from .logger import experiment_log  # noqa: E402
from .metrics import evaluate, judge  # noqa: E402
from .models import Dataset, split_queries  # noqa: E402
from .progress import ExperimentProgress  # noqa: E402
from .trainer import train  # noqa: E402

REPORT_FILE = "report.csv"
SUMMARY_FILE = "summary.csv"
MEAN_SEED = "mean"
ID_COLUMNS = ["experiment", "variant", "seed", "labeled_fraction", "oracle_calls"]


@contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except (SmarError, ArithmeticError, ValueError, KeyError) as e:
        raise ExperimentError(name, str(e)) from e


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

def _budget_label(budget: float) -> str:
    return f"{budget:g}"


def variant_table(config: ExperimentConfig) -> Dict[str, Dict[str, Any]]:
    """Variant name -> the settings a cell needs, in grid order"""
    if config.kind == "percentile-bands":
        return {b.name: {"band": b.name} for b in config.bands}
    if config.kind == "budget-sweep":
        table: Dict[str, Dict[str, Any]] = {}
        for budget in config.budgets:
            table[f"sft@{_budget_label(budget)}"] = {"mode": "sft", "budget": budget}
            table[f"smar@{_budget_label(budget)}"] = {"mode": "smar", "budget": budget}
        table["only-upstream"] = {"mode": "upstream", "budget": 0.0}
        return table
    if config.kind == "anchors":
        return {("T=inf" if t is None else f"T={t}"): {"t_rounds": t} for t in config.t_rounds}
    return {v: {"variant": v} for v in config.variants}


def metric_columns(config: ExperimentConfig) -> List[str]:
    if config.kind == "anchors":
        return ["f1", f"ndcg@{config.ndcg_k or 4}", "pnr"]
    ndcg_name = f"ndcg@{config.ndcg_k}" if config.ndcg_k else "ndcg"
    return [f"mrr@{config.k}", f"map@{config.k}", ndcg_name]


# ---------------------------------------------------------------------------
# Cell preparation per experiment kind
# ---------------------------------------------------------------------------

def _distill_free(loss: LossConfig) -> LossConfig:
    return loss.model_copy(update={"alpha": 0.0, "beta": 0.0, "distill_weights": {}})


def _labeled_subset(train_ds: Dataset, plan: AnnotationPlan) -> Dataset:
    labeled = {qid for qid, _ in plan.labeled}
    if not labeled:
        raise ExperimentError("annotate", "budget left no labeled query to train on")
    return train_ds.subset(labeled)


def _prepare_bands(config, cell, train_ds, oracle, seed):
    band = next(b for b in config.bands if b.name == cell["band"])
    if band.random and config.budget_granularity == "query":
        plan = annotate_dataset(train_ds, "query", oracle, p=band.hi, seed=seed)
    elif band.random:
        plan = annotate_dataset(train_ds, "random", oracle, p=band.hi, seed=seed)
    else:
        plan = annotate_dataset(train_ds, "band", oracle, lo=band.lo, hi=band.hi, seed=seed)
    return plan, train_ds, config.model, config.loss.model_copy(update={"objective": "listwise"})


def _prepare_budget(config, cell, train_ds, oracle, seed):
    loss = config.loss.model_copy(update={"objective": "listwise"})
    if cell["mode"] == "upstream":
        return annotate_dataset(train_ds, "none", oracle, seed=seed), train_ds, config.model, loss
    if config.budget_granularity == "query":
        plan = annotate_dataset(train_ds, "query", oracle, p=cell["budget"], seed=seed)
    else:
        plan = annotate_dataset(train_ds, "top-p", oracle, p=cell["budget"], seed=seed)
    if cell["mode"] == "sft":
        return plan, _labeled_subset(train_ds, plan), config.model, _distill_free(loss)
    return plan, train_ds, config.model, loss


def _prepare_anchors(config, cell, train_ds, oracle, seed):
    plan = annotate_dataset(train_ds, "anchors", oracle, t_rounds=cell["t_rounds"], seed=seed,
                            anchor_modalities=tuple(config.anchor_modalities))
    return plan, train_ds, config.model, config.loss.model_copy(update={"objective": "anchor"})


_ABLATION_MODELS = {
    "mlp-no-attention": {"attention": False, "hybrid_fusion": True},
    "cross-attention": {"attention": True, "hybrid_fusion": True},
    "cross-attention-no-hybrid-fusion": {"attention": True, "hybrid_fusion": False},
}


def _prepare_ablation(config, cell, train_ds, oracle, seed):
    plan = annotate_dataset(train_ds, "full", oracle, seed=seed)
    model = config.model.model_copy(update=_ABLATION_MODELS[cell["variant"]])
    return plan, train_ds, model, config.loss.model_copy(update={"objective": "listwise"})


_PREPARE = {
    "percentile-bands": _prepare_bands,
    "budget-sweep": _prepare_budget,
    "anchors": _prepare_anchors,
    "ablation-attention": _prepare_ablation,
}


def run_cell(config_data: Dict[str, Any], variant: str, seed: int) -> Dict[str, Any]:
    """One (variant, seed) cell; module level so worker processes can import it"""
    config = ExperimentConfig.model_validate(config_data)
    cell = variant_table(config)[variant]

    with _stage("generate"):
        data, oracle = generate_dataset(config.synth.model_copy(update={"seed": seed}))
    with _stage("split"):
        train_ds, val_ds, test_ds = split_queries(data, config.split, seed)
    with _stage("annotate"):
        meter = oracle.fresh()
        plan, fit_ds, model_config, loss_config = _PREPARE[config.kind](config, cell, train_ds, meter, seed)
        model_config = model_config.model_copy(update={"seed": seed})
    with _stage("train"):
        model, _ = train(fit_ds, plan, model_config, loss_config, validation=val_ds,
                         validation_grades=oracle, run_id=f"{config.kind}/{variant}/seed={seed}")
    with _stage("evaluate"):
        run = judge(model, test_ds, oracle, config.relevance_threshold, config.f1_threshold)
        if config.kind == "anchors":
            rows = evaluate(run, ("f1", "ndcg", "pnr"), k=config.k, ndcg_k=config.ndcg_k or 4)
        else:
            rows = evaluate(run, ("mrr", "map", "ndcg"), k=config.k, ndcg_k=config.ndcg_k)

    record: Dict[str, Any] = {
        "experiment": config.kind,
        "variant": variant,
        "seed": seed,
        "labeled_fraction": plan.labeled_fraction,
        "oracle_calls": plan.oracle_calls,
    }
    for name, row in zip(metric_columns(config), rows):
        record[name] = row.value
    return record


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    kind: str
    config_hash: str
    frame: pd.DataFrame
    path: Optional[Path] = None

    def mean_rows(self) -> pd.DataFrame:
        return self.frame[self.frame["seed"].astype(str) == MEAN_SEED].reset_index(drop=True)

    def seed_rows(self) -> pd.DataFrame:
        return self.frame[self.frame["seed"].astype(str) != MEAN_SEED].reset_index(drop=True)

    def mean(self, variant: str, column: str) -> float:
        rows = self.mean_rows()
        return float(rows.loc[rows["variant"] == variant, column].iloc[0])


def _build_frame(config: ExperimentConfig, records: List[Dict[str, Any]]) -> pd.DataFrame:
    """Per-seed rows of each variant followed by that variant's mean row"""
    metrics = metric_columns(config)
    rows: List[Dict[str, Any]] = []
    for variant in variant_table(config):
        cells = [r for r in records if r["variant"] == variant]
        rows.extend(cells)
        mean_row: Dict[str, Any] = {"experiment": config.kind, "variant": variant, "seed": MEAN_SEED}
        for column in ["labeled_fraction", "oracle_calls"] + metrics:
            values = [float(c[column]) for c in cells if not math.isnan(float(c[column]))]
            mean_row[column] = sum(values) / len(values) if values else float("nan")
        rows.append(mean_row)
    frame = pd.DataFrame(rows, columns=ID_COLUMNS + metrics)
    frame["seed"] = frame["seed"].astype(str)
    frame["config_hash"] = config.config_hash()
    return frame


def write_report(report: ExperimentReport, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / REPORT_FILE
    report.frame.to_csv(path, index=False, lineterminator="\n")
    report.path = path
    return path


def _run_cells(config: ExperimentConfig, cells: Sequence[Tuple[str, int]], progress: Optional[ExperimentProgress]
               ) -> List[Dict[str, Any]]:
    config_data = config.model_dump(mode="json")
    results: Dict[Tuple[str, int], Dict[str, Any]] = {}
    pending = []
    for variant, seed in cells:
        cached = progress.cell_result(f"{variant}|{seed}") if progress else None
        if cached is not None:
            results[(variant, seed)] = cached[0]
            experiment_log.log_cell(config.kind, f"{variant}|{seed}", 0.0, resumed=True)
        else:
            pending.append((variant, seed))

    def finish(cell, record, started):
        results[cell] = record
        if progress:
            progress.record_cell(f"{cell[0]}|{cell[1]}", [record])
        experiment_log.log_cell(config.kind, f"{cell[0]}|{cell[1]}", time.time() - started)

    if config.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(pending))) as pool:
            started = time.time()
            futures = [(cell, pool.submit(run_cell, config_data, cell[0], cell[1])) for cell in pending]
            for cell, future in futures:
                finish(cell, future.result(), started)
    else:
        for cell in pending:
            started = time.time()
            finish(cell, run_cell(config_data, cell[0], cell[1]), started)

    return [results[cell] for cell in cells]


def run_experiment(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                   resume: bool = True) -> ExperimentReport:
    """Run every cell of an experiment; with out_dir, write report.csv and keep resumable progress"""
    cells = [(variant, seed) for variant in variant_table(config) for seed in config.seeds]
    config_hash = config.config_hash()
    started = time.time()
    experiment_log.log_experiment_start(config.kind, len(cells), config_hash, config.workers)

    progress = None
    if out_dir is not None:
        progress = ExperimentProgress(out_dir, config_hash, config.kind)
        if not resume:
            progress.reset_progress()
        progress.mark_start()

    try:
        records = _run_cells(config, cells, progress)
        report = ExperimentReport(config.kind, config_hash, _build_frame(config, records))
        if out_dir is not None:
            write_report(report, out_dir)
            progress.finish()
    except Exception as e:
        if progress:
            progress.mark_stop()
        experiment_log.log_experiment_end(config.kind, 0, time.time() - started, success=False, error=str(e))
        raise

    experiment_log.log_experiment_end(config.kind, len(report.frame), time.time() - started)
    return report


def _with_kind(config: ExperimentConfig, kind: str) -> ExperimentConfig:
    if config.kind != kind:
        return config.model_copy(update={"kind": kind})
    return config


def run_percentile_bands(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Annotate one band of every queue per variant, train with the combined objective, report MRR/MAP/NDCG"""
    return run_experiment(_with_kind(config, "percentile-bands"), out_dir)


def run_budget_sweep(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """SFT (labels only, labeled queries only) against SMAR (labels plus distillation) per budget, plus only-upstream"""
    return run_experiment(_with_kind(config, "budget-sweep"), out_dir)


def run_anchor_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    return run_experiment(_with_kind(config, "anchors"), out_dir)


def run_attention_ablation(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    return run_experiment(_with_kind(config, "ablation-attention"), out_dir)


RUNNERS = {
    "percentile-bands": run_percentile_bands,
    "budget-sweep": run_budget_sweep,
    "anchors": run_anchor_experiment,
    "ablation-attention": run_attention_ablation,
}


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

def find_reports(in_dir: Union[str, Path]) -> List[Path]:
    return sorted(Path(in_dir).rglob(REPORT_FILE))


def _report_metrics(frame: pd.DataFrame) -> List[str]:
    return [c for c in frame.columns if c not in ID_COLUMNS and c != "config_hash"]


def write_summary(in_dir: Union[str, Path]) -> Path:
    """Mean rows of every report under in_dir, stacked into <in_dir>/summary.csv"""
    reports = find_reports(in_dir)
    if not reports:
        raise ExperimentError("report", f"no {REPORT_FILE} found under {in_dir}")
    frames = []
    for path in reports:
        frame = pd.read_csv(path, dtype={"seed": str})
        frame = frame[frame["seed"] == MEAN_SEED]
        metrics = _report_metrics(frame)
        long = frame.melt(id_vars=["experiment", "variant", "labeled_fraction", "oracle_calls", "config_hash"],
                          value_vars=metrics, var_name="metric", value_name="value")
        frames.append(long)
    summary = pd.concat(frames, ignore_index=True)
    path = Path(in_dir) / SUMMARY_FILE
    summary.to_csv(path, index=False, lineterminator="\n")
    return path


def write_plots(in_dir: Union[str, Path]) -> List[Path]:
    """One grouped bar chart of mean metrics per report, saved next to it"""
    reports = find_reports(in_dir)
    if not reports:
        raise ExperimentError("report", f"no {REPORT_FILE} found under {in_dir}")
    written = []
    for path in reports:
        frame = pd.read_csv(path, dtype={"seed": str})
        means = frame[frame["seed"] == MEAN_SEED].set_index("variant")
        metrics = _report_metrics(frame)
        kind = str(means["experiment"].iloc[0]) if len(means) else path.parent.name

        fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(means)), 4.0))
        means[metrics].plot.bar(ax=ax, rot=30)
        ax.set_title(kind)
        ax.set_xlabel("")
        ax.set_ylabel("mean over seeds")
        ax.legend(loc="lower right", fontsize="small")
        fig.tight_layout()
        out = path.parent / f"{kind}.png"
        fig.savefig(out, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(out)
    return written
