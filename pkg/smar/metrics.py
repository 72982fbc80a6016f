"""
Ranking metrics for SMAR
MRR@k, MAP@k, NDCG(@k), macro F1, PNR, the GSB delta, position CTR and
entropy-based feature ranking, plus the MetricsReport CSV writer.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from .datagen import LabelOracle
from .errors import ArgumentError, UndefinedMetricError
from .logger import experiment_log
from .models import Dataset, RankedList

METRICS = ("mrr", "map", "ndcg", "f1", "pnr")
REPORT_COLUMNS = ["run_id", "metric", "k", "value", "n_queries", "n_excluded"]


@dataclass(frozen=True)
class JudgedQuery:
    ranked: RankedList
    grades: Mapping[str, float]

    def grades_in_order(self) -> List[float]:
        return [self.grades[item_id] for item_id in self.ranked.item_ids]


@dataclass(frozen=True)
class JudgedRun:
    """Rankings with ground-truth grades; grade >= relevance_threshold counts as relevant"""

    queries: Tuple[JudgedQuery, ...]
    relevance_threshold: float = 2
    decision_threshold: Optional[float] = None

    def __post_init__(self):
        for jq in self.queries:
            missing = [iid for iid in jq.ranked.item_ids if iid not in jq.grades]
            if missing:
                raise ArgumentError(f"query {jq.ranked.query_id}: no grade for items {missing}")

    def __len__(self) -> int:
        return len(self.queries)


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    metric: str
    k: Optional[int]
    value: float
    n_queries: int
    n_excluded: int


def _require_queries(run: JudgedRun, metric: str):
    if not run.queries:
        raise UndefinedMetricError(f"{metric}: run has no queries")


def _check_k(k: int):
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")


def _relevance(run: JudgedRun, jq: JudgedQuery) -> List[int]:
    return [1 if g >= run.relevance_threshold else 0 for g in jq.grades_in_order()]


def mrr_at_k(run: JudgedRun, k: int) -> float:
    _check_k(k)
    _require_queries(run, "mrr")
    total = 0.0
    for jq in run.queries:
        rel = _relevance(run, jq)
        for pos, r in enumerate(rel[:k], start=1):
            if r:
                total += 1.0 / pos
                break
    return total / len(run.queries)


def map_at_k(run: JudgedRun, k: int) -> float:
    """AP@k divides by the number of relevant items inside the top k; queries without any contribute 0"""
    _check_k(k)
    _require_queries(run, "map")
    total = 0.0
    for jq in run.queries:
        rel = _relevance(run, jq)[:k]
        hits = 0
        precision_sum = 0.0
        for pos, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precision_sum += hits / pos
        if hits:
            total += precision_sum / hits
    return total / len(run.queries)


def _dcg(grades: Sequence[float]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(pos + 1) for pos, g in enumerate(grades, start=1))


def ndcg(run: JudgedRun, k: Optional[int] = None) -> float:
    """Mean DCG/IDCG; an optional cutoff applies to both. Queries with IDCG = 0 contribute 0"""
    if k is not None:
        _check_k(k)
    _require_queries(run, "ndcg")
    total = 0.0
    for jq in run.queries:
        grades = jq.grades_in_order()
        ideal = sorted(grades, reverse=True)
        if k is not None:
            grades, ideal = grades[:k], ideal[:k]
        idcg = _dcg(ideal)
        if idcg > 0:
            total += _dcg(grades) / idcg
    return total / len(run.queries)


def _f1_per_query(run: JudgedRun, threshold: float) -> List[float]:
    values = []
    for jq in run.queries:
        relevant = {iid for iid in jq.ranked.item_ids if jq.grades[iid] >= run.relevance_threshold}
        if not relevant:
            continue
        returned = {iid for iid, s in zip(jq.ranked.item_ids, jq.ranked.scores) if s >= threshold}
        hit = len(returned & relevant)
        precision = hit / len(returned) if returned else 0.0
        recall = hit / len(relevant)
        values.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return values


def f1_macro(run: JudgedRun, threshold: Optional[float] = None) -> float:
    """Macro F1 over queries with at least one relevant item; items scoring >= threshold are returned"""
    threshold = run.decision_threshold if threshold is None else threshold
    if threshold is None:
        raise ArgumentError("f1 needs a decision threshold")
    values = _f1_per_query(run, threshold)
    if not values:
        raise UndefinedMetricError("f1: no query has a relevant item")
    return float(sum(values) / len(values))


@dataclass(frozen=True)
class PnrResult:
    value: float
    n_queries: int
    n_infinite: int
    n_pairless: int


def pnr_details(run: JudgedRun, model_scores: Optional[Mapping[str, Mapping[str, float]]] = None) -> PnrResult:
    """Concordant over discordant grade-unequal pairs per query, macro-averaged.

    Score ties are ignored. A query with discordant count 0 and concordant
    count > 0 has an infinite ratio and is left out (counted in n_infinite);
    a query with neither is left out as pairless.
    """
    ratios = []
    n_infinite = n_pairless = 0
    for jq in run.queries:
        qid = jq.ranked.query_id
        if model_scores is not None:
            scores = [model_scores[qid][iid] for iid in jq.ranked.item_ids]
        else:
            scores = list(jq.ranked.scores)
        grades = jq.grades_in_order()
        concordant = discordant = 0
        for i in range(len(grades)):
            for j in range(i + 1, len(grades)):
                if grades[i] == grades[j] or scores[i] == scores[j]:
                    continue
                if (grades[i] > grades[j]) == (scores[i] > scores[j]):
                    concordant += 1
                else:
                    discordant += 1
        if discordant == 0:
            if concordant > 0:
                n_infinite += 1
            else:
                n_pairless += 1
            continue
        ratios.append(concordant / discordant)
    value = float(sum(ratios) / len(ratios)) if ratios else float("nan")
    return PnrResult(value, len(ratios), n_infinite, n_pairless)


def pnr(run: JudgedRun, model_scores: Optional[Mapping[str, Mapping[str, float]]] = None) -> float:
    result = pnr_details(run, model_scores)
    if result.n_infinite:
        experiment_log.log_excluded("pnr", result.n_infinite, "no discordant pairs")
    return result.value


def delta_gsb(good: int, bad: int, same: int) -> float:
    """(good - bad) / (2 * (good + bad + same))"""
    if min(good, bad, same) < 0:
        raise ArgumentError(f"counts must be >= 0, got good={good}, bad={bad}, same={same}")
    total = good + bad + same
    if total == 0:
        raise ArgumentError("delta_gsb needs at least one judgement")
    return (good - bad) / (2.0 * total)


def ctr_at_k(run: JudgedRun, clicks: Mapping[str, Mapping[str, bool]], k: int) -> np.ndarray:
    """Click-through rate at each of the first k positions; positions no query reaches are NaN"""
    _check_k(k)
    clicked = np.zeros(k)
    shown = np.zeros(k)
    for jq in run.queries:
        query_clicks = clicks.get(jq.ranked.query_id, {})
        for pos, iid in enumerate(jq.ranked.item_ids[:k]):
            shown[pos] += 1
            clicked[pos] += 1 if query_clicks.get(iid) else 0
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(shown > 0, clicked / np.maximum(shown, 1), np.nan)


def clicks_from_dataset(dataset: Dataset) -> Dict[str, Dict[str, bool]]:
    return {
        q.query_id: {c.item_id: bool(c.clicked) for c in q.candidates if c.clicked is not None}
        for q in dataset.queries
    }


# ---------------------------------------------------------------------------
# Feature entropy
# ---------------------------------------------------------------------------

def _feature_matrix(data: Union[Dataset, np.ndarray]) -> np.ndarray:
    if isinstance(data, Dataset):
        rows = [c.features for q in data.queries for c in q.candidates]
        return np.array(rows, dtype=np.float64).reshape(len(rows), data.item_dim)
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise ArgumentError(f"expected a 2-D feature matrix, got shape {matrix.shape}")
    return matrix


def feature_entropies(data: Union[Dataset, np.ndarray], bins: int = 10) -> np.ndarray:
    """Base-2 Shannon entropy of each feature's equal-width histogram"""
    if bins < 2:
        raise ArgumentError(f"bins must be >= 2, got {bins}")
    matrix = _feature_matrix(data)
    if matrix.shape[1] < 1:
        raise ArgumentError("need at least one feature")
    entropies = np.zeros(matrix.shape[1])
    for col in range(matrix.shape[1]):
        counts, _ = np.histogram(matrix[:, col], bins=bins)
        if counts.sum() > 0:
            entropies[col] = float(stats.entropy(counts, base=2)) + 0.0
    return entropies


def entropy_rank_features(data: Union[Dataset, np.ndarray], bins: int = 10) -> List[int]:
    """Feature indices by descending entropy; equal entropies keep index order"""
    entropies = feature_entropies(data, bins)
    return sorted(range(len(entropies)), key=lambda i: -entropies[i])


# ---------------------------------------------------------------------------
# Judging and reports
# ---------------------------------------------------------------------------

GradeSource = Union[None, LabelOracle, Mapping[Tuple[str, str], float]]


def _grade_lookup(dataset: Dataset, grades: GradeSource):
    if isinstance(grades, LabelOracle):
        return lambda qid, c: grades.peek(qid, c.item_id)
    if grades is not None:
        return lambda qid, c: grades[(qid, c.item_id)]

    def stored(qid, c):
        if c.label is not None:
            return c.label
        if c.clicked is not None:
            return 1 if c.clicked else 0
        raise ArgumentError(f"query {qid}: item {c.item_id} has neither a label nor a click")
    return stored


def judge_scores(dataset: Dataset, scores: Sequence[Sequence[float]], grades: GradeSource = None,
                 relevance_threshold: float = 2, decision_threshold: Optional[float] = None) -> JudgedRun:
    lookup = _grade_lookup(dataset, grades)
    judged = []
    for query, query_scores in zip(dataset.queries, scores):
        item_ids = [c.item_id for c in query.candidates]
        judged.append(JudgedQuery(
            ranked=RankedList.from_scores(query.query_id, item_ids, list(query_scores)),
            grades={c.item_id: lookup(query.query_id, c) for c in query.candidates},
        ))
    return JudgedRun(tuple(judged), relevance_threshold, decision_threshold)


def judge(model, dataset: Dataset, grades: GradeSource = None, relevance_threshold: float = 2,
          decision_threshold: Optional[float] = None) -> JudgedRun:
    """Score every query with a model and attach ground-truth grades (stored labels by default)"""
    return judge_scores(dataset, model.score_queries(dataset.queries), grades,
                        relevance_threshold, decision_threshold)


def evaluate(run: JudgedRun, metrics: Iterable[str] = METRICS, k: int = 10, ndcg_k: Optional[int] = None,
             run_id: str = "run") -> List[MetricRow]:
    """One MetricRow per requested metric; metrics with no usable query report NaN"""
    rows = []
    n = len(run.queries)
    for metric in metrics:
        if metric not in METRICS:
            raise ArgumentError(f"unknown metric '{metric}'; expected some of {list(METRICS)}")
        if metric == "mrr":
            rows.append(MetricRow(run_id, "mrr", k, mrr_at_k(run, k), n, 0))
        elif metric == "map":
            rows.append(MetricRow(run_id, "map", k, map_at_k(run, k), n, 0))
        elif metric == "ndcg":
            rows.append(MetricRow(run_id, "ndcg", ndcg_k, ndcg(run, ndcg_k), n, 0))
        elif metric == "f1":
            threshold = run.decision_threshold
            if threshold is None:
                raise ArgumentError("f1 needs a decision threshold")
            values = _f1_per_query(run, threshold)
            if not values:
                experiment_log.log_excluded("f1", n, "no relevant items")
            value = float(sum(values) / len(values)) if values else float("nan")
            rows.append(MetricRow(run_id, "f1", None, value, len(values), n - len(values)))
        else:
            result = pnr_details(run)
            if result.n_infinite:
                experiment_log.log_excluded("pnr", result.n_infinite, "no discordant pairs")
            rows.append(MetricRow(run_id, "pnr", None, result.value, result.n_queries,
                                  result.n_infinite + result.n_pairless))
    return rows


def metrics_frame(rows: Sequence[MetricRow]) -> pd.DataFrame:
    frame = pd.DataFrame([r.__dict__ for r in rows], columns=REPORT_COLUMNS)
    frame["k"] = frame["k"].astype("Int64")
    return frame


def write_metrics_csv(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(rows).to_csv(path, index=False, lineterminator="\n")
    return path
