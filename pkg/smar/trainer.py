"""
Training loop for the SMAR reranker
Assembles per-query supervision from an annotation plan and runs plain
mini-batch gradient descent over query batches.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .annotate import AnnotationPlan, query_pairs
from .config import LossConfig, ModelConfig
from .errors import ArgumentError, TrainingError
from .logger import training_log
from .metrics import GradeSource, judge, ndcg
from .models import MAX_GRADE, Dataset, Query
from .model import RerankerModel, TrainingBatch
from .objectives import QuerySupervision, SupervisionBatch, binned_upstream_pairs

# queries per forward pass when measuring the full training loss
_EVAL_CHUNK = 64


def _index_pairs(pairs, index: Dict[str, int]) -> np.ndarray:
    return np.asarray([(index[p.winner], index[p.loser]) for p in pairs], dtype=int).reshape(-1, 2)


def _query_supervision(dataset: Dataset, query: Query, plan: AnnotationPlan,
                       loss_config: LossConfig) -> QuerySupervision:
    qid = query.query_id
    index = {c.item_id: i for i, c in enumerate(query.candidates)}
    grades = {c.item_id: plan.grade(qid, c.item_id) for c in query.candidates}

    # upstream rank as a fraction of the item's own queue, so queues of different lengths compare
    rank_fraction: Dict[str, float] = {}
    modality_orders: List[Tuple[str, np.ndarray]] = []
    for m in query.modality_ids:
        queue = query.queue(m)
        for pos, c in enumerate(queue):
            rank_fraction[c.item_id] = pos / len(queue)
        modality_orders.append((dataset.modality_name(m), np.array([index[c.item_id] for c in queue], dtype=int)))

    labeled = [c for c in query.candidates if grades[c.item_id] is not None]
    labeled.sort(key=lambda c: (-grades[c.item_id], rank_fraction[c.item_id], c.item_id))
    label_order = np.array([index[c.item_id] for c in labeled], dtype=int)

    pairs, points = query_pairs(query, plan)
    label_pairs = _index_pairs([p for p in pairs if p.source == "label"], index)

    upstream: List[Tuple[str, np.ndarray]] = []
    if loss_config.upstream_bins > 0:
        for m in query.modality_ids:
            queue = query.queue(m)
            local = binned_upstream_pairs([c.upstream_score for c in queue], loss_config.upstream_bins)
            rows = [
                (index[queue[w].item_id], index[queue[l].item_id]) for w, l in local
                if grades[queue[w].item_id] is None or grades[queue[l].item_id] is None
            ]
            upstream.append((dataset.modality_name(m), np.asarray(rows, dtype=int).reshape(-1, 2)))
    else:
        for m in query.modality_ids:
            chosen = [p for p in pairs if p.source == "upstream" and p.modality == m]
            upstream.append((dataset.modality_name(m), _index_pairs(chosen, index)))

    return QuerySupervision(
        query_id=qid,
        n_items=query.n_q,
        label_order=label_order,
        modality_orders=tuple(modality_orders),
        label_pairs=label_pairs,
        upstream_pairs=tuple(upstream),
        point_index=np.array([index[pt.item_id] for pt in points], dtype=int),
        point_target=np.array([pt.grade / MAX_GRADE for pt in points], dtype=np.float64),
    )


def build_supervision(dataset: Dataset, plan: AnnotationPlan, loss_config: LossConfig) -> SupervisionBatch:
    """Targets for every query of the dataset; items the plan does not grade count as unlabeled"""
    return SupervisionBatch(tuple(_query_supervision(dataset, q, plan, loss_config) for q in dataset.queries))


@dataclass
class TrainingLog:
    """Training-set loss before training (index 0) and after every epoch"""

    run_id: str
    epoch_losses: List[float] = field(default_factory=list)
    validation_ndcg: List[Optional[float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    duration: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def final_loss(self) -> float:
        """Loss of the returned model (the selected epoch when validation picked one)"""
        epoch = self.best_epoch if self.best_epoch is not None else len(self.epoch_losses) - 1
        return self.epoch_losses[epoch]


def dataset_loss(model: RerankerModel, queries, supervision: SupervisionBatch, loss_config: LossConfig) -> float:
    """Mean per-query loss over all queries, computed chunk by chunk"""
    n = len(queries)
    if n == 0:
        return 0.0
    total = 0.0
    for start in range(0, n, _EVAL_CHUNK):
        idx = list(range(start, min(start + _EVAL_CHUNK, n)))
        batch = TrainingBatch(tuple(queries[i] for i in idx), supervision.subset(idx))
        total += model.loss(batch, loss_config) * len(idx)
    return total / n


def _validation_ndcg(model: RerankerModel, validation: Dataset, grades: GradeSource) -> float:
    return ndcg(judge(model, validation, grades))


def train(dataset: Dataset, plan: AnnotationPlan, model_config: ModelConfig, loss_config: LossConfig,
          validation: Optional[Dataset] = None, validation_grades: GradeSource = None,
          run_id: str = "run") -> Tuple[RerankerModel, TrainingLog]:
    """Fit a fresh reranker by mini-batch gradient descent.

    Queries are shuffled every epoch from a stream seeded by the model seed.
    With a validation set and `select_best_on_validation`, the parameters of
    the epoch with the highest validation NDCG are returned (earliest wins).
    """
    if not dataset.queries:
        raise ArgumentError("training needs at least one query")
    start_time = time.time()
    model = RerankerModel.initialize(model_config, dataset)
    supervision = build_supervision(dataset, plan, loss_config)
    queries = dataset.queries
    rng = np.random.default_rng([model_config.seed, 23])
    log = TrainingLog(run_id)
    select = validation is not None and model_config.select_best_on_validation and bool(validation.queries)

    training_log.log_run_start(run_id, len(queries), loss_config.objective, {
        "learning_rate": model_config.learning_rate,
        "epochs": model_config.epochs,
        "batch_queries": model_config.batch_queries,
        "attention": model_config.attention,
        "hybrid_fusion": model_config.hybrid_fusion,
    })

    def record(epoch: int, epoch_start: float) -> float:
        loss = dataset_loss(model, queries, supervision, loss_config)
        if not np.isfinite(loss):
            training_log.log_divergence(run_id, epoch, loss)
            raise TrainingError(epoch, f"training loss is not finite ({loss})")
        log.epoch_losses.append(float(loss))
        val = _validation_ndcg(model, validation, validation_grades) if select else None
        log.validation_ndcg.append(val)
        training_log.log_epoch(run_id, epoch, loss, time.time() - epoch_start, val)
        return loss

    best_params = None
    record(0, start_time)
    if select:
        best_params, log.best_epoch = model.copy().params, 0

    lr = model_config.learning_rate
    for epoch in range(1, model_config.epochs + 1):
        epoch_start = time.time()
        order = rng.permutation(len(queries))
        for begin in range(0, len(order), model_config.batch_queries):
            idx = [int(i) for i in order[begin:begin + model_config.batch_queries]]
            batch = TrainingBatch(tuple(queries[i] for i in idx), supervision.subset(idx))
            loss, grads = model.loss_and_grads(batch, loss_config)
            if not np.isfinite(loss):
                training_log.log_divergence(run_id, epoch, loss)
                raise TrainingError(epoch, f"mini-batch loss is not finite ({loss})")
            if lr == 0.0:
                continue
            for name, grad in grads.items():
                model.params[name] -= lr * grad
        record(epoch, epoch_start)
        if select and log.validation_ndcg[-1] > log.validation_ndcg[log.best_epoch]:
            best_params, log.best_epoch = model.copy().params, epoch

    if best_params is not None:
        model.params = best_params
    for name, value in model.params.items():
        if not np.all(np.isfinite(value)):
            training_log.log_divergence(run_id, model_config.epochs, float("nan"))
            raise TrainingError(model_config.epochs, f"parameter {name} is not finite")

    log.duration = time.time() - start_time
    training_log.log_run_end(run_id, log.initial_loss, log.final_loss, log.duration)
    return model, log
