"""
Training objectives for SMAR
Every loss returns (loss, gradient with respect to the scores it was given).
Per-query losses are averaged over a batch; pairwise hinges are averaged per
modality before the modality weight is applied.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from .config import LossConfig
from .errors import ArgumentError, NumericError, ShapeError

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _as_array(values: ArrayLike, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _pair_array(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2))
    return arr.reshape(-1, 2)


# ---------------------------------------------------------------------------
# Pairwise
# ---------------------------------------------------------------------------

def pairwise_hinge(s_i: float, s_j: float, y_ij: int, gamma: float) -> Tuple[float, np.ndarray]:
    """y_ij * max(0, gamma - (s_i - s_j)); the subgradient at the kink is 0"""
    if not gamma > 0:
        raise ArgumentError(f"gamma must be > 0, got {gamma}")
    slack = (s_j + gamma) - s_i
    if y_ij and slack > 0:
        return float(slack), np.array([-1.0, 1.0])
    return 0.0, np.zeros(2)


def hinge_mean(pair_scores, margin: float) -> Tuple[float, np.ndarray]:
    """Mean of max(0, margin - (s_pos - s_neg)) over rows of (s_pos, s_neg); gradient has the same shape"""
    pairs = _pair_array(pair_scores)
    if len(pairs) == 0:
        return 0.0, pairs.copy()
    slack = (pairs[:, 1] + margin) - pairs[:, 0]
    active = slack > 0
    n = len(pairs)
    grad = np.zeros_like(pairs)
    grad[active, 0] = -1.0 / n
    grad[active, 1] = 1.0 / n
    return float(np.sum(slack[active]) / n), grad


def label_pair_hinge(scores: np.ndarray, pairs: np.ndarray, margin: float) -> Tuple[float, np.ndarray]:
    """Mean hinge over index pairs (winner, loser) into `scores`"""
    scores = _as_array(scores, "scores")
    grad = np.zeros_like(scores)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        return 0.0, grad
    loss, pair_grad = hinge_mean(np.stack([scores[pairs[:, 0]], scores[pairs[:, 1]]], axis=1), margin)
    np.add.at(grad, pairs[:, 0], pair_grad[:, 0])
    np.add.at(grad, pairs[:, 1], pair_grad[:, 1])
    return loss, grad


def modality_weighted_pairwise(scores: np.ndarray, pairs_by_modality: Dict[str, np.ndarray],
                               config: LossConfig, margin: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """Sum over modalities of beta_m times the mean hinge of that modality's (winner, loser) index pairs"""
    scores = _as_array(scores, "scores")
    margin = config.gamma if margin is None else margin
    total = 0.0
    grad = np.zeros_like(scores)
    for name, pairs in pairs_by_modality.items():
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        if len(pairs) == 0:
            continue
        weight = config.modality_weight(name)
        loss, g = label_pair_hinge(scores, pairs, margin)
        total += weight * loss
        grad += weight * g
    return float(total), grad


def binned_upstream_pairs(upstream_scores: ArrayLike, n_bins: int) -> np.ndarray:
    """Index pairs (winner, loser) between items in different upstream score bins.

    Scores are binned on [0, 1] into equal-width bins; items sharing a bin
    give no pair.
    """
    if n_bins < 1:
        raise ArgumentError(f"n_bins must be >= 1, got {n_bins}")
    scores = _as_array(upstream_scores, "upstream_scores")
    bins = np.clip(np.floor(scores * n_bins), 0, n_bins - 1).astype(int)
    pairs = [
        (i, j) if bins[i] > bins[j] else (j, i)
        for i in range(len(bins)) for j in range(i + 1, len(bins))
        if bins[i] != bins[j]
    ]
    return np.asarray(pairs, dtype=int).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Listwise
# ---------------------------------------------------------------------------

def listwise_kl(upstream_scores: ArrayLike, model_scores: ArrayLike) -> Tuple[float, np.ndarray]:
    """KL(softmax(upstream) || softmax(model)); gradient is with respect to the model scores"""
    g = _as_array(upstream_scores, "upstream_scores")
    f = _as_array(model_scores, "model_scores")
    if len(g) == 0 or len(g) != len(f):
        raise ShapeError(f"lists must be nonempty and equally long, got {len(g)} and {len(f)}")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(f))):
        raise NumericError("listwise_kl needs finite scores")
    log_p = log_softmax(g)
    log_q = log_softmax(f)
    p = np.exp(log_p)
    loss = float(np.sum(p * (log_p - log_q)))
    return max(loss, 0.0), np.exp(log_q) - p


def list_mle(ordered_scores: ArrayLike, normalize: bool = False) -> Tuple[float, np.ndarray]:
    """Negative Plackett-Luce log-likelihood of the given order.

    Position k holds the k-th item of the target permutation. Suffix
    log-sum-exps are accumulated with logaddexp for stability.
    """
    f = _as_array(ordered_scores, "ordered_scores")
    n = len(f)
    if n == 0:
        raise ShapeError("list_mle needs a nonempty list")
    suffix = np.logaddexp.accumulate(f[::-1])[::-1]
    loss = float(np.sum(suffix - f))

    # d/df_i = sum_{k <= i} exp(f_i - suffix_k) - 1
    upper = np.triu(np.ones((n, n), dtype=bool))
    exponent = np.where(upper, f[None, :] - suffix[:, None], -np.inf)
    grad = np.sum(np.exp(exponent), axis=0) - 1.0

    if normalize:
        return loss / n, grad / n
    return loss, grad


def _ordered_mle(scores: np.ndarray, order: np.ndarray, normalize: bool) -> Tuple[float, np.ndarray]:
    grad = np.zeros_like(scores)
    if len(order) == 0:
        return 0.0, grad
    loss, g = list_mle(scores[order], normalize)
    grad[order] = g
    return loss, grad


# ---------------------------------------------------------------------------
# Pointwise
# ---------------------------------------------------------------------------

def pointwise_squared_error(pred: ArrayLike, target: ArrayLike) -> Tuple[float, np.ndarray]:
    p = _as_array(pred, "pred")
    t = _as_array(target, "target")
    if len(p) != len(t):
        raise ShapeError(f"{len(p)} predictions but {len(t)} targets")
    if len(p) == 0:
        return 0.0, p.copy()
    diff = p - t
    return float(np.mean(diff ** 2)), 2.0 * diff / len(p)


def online_composite(pred: ArrayLike, label_target: ArrayLike, label_pairs, upstream_pairs,
                     config: LossConfig) -> Tuple[float, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """pointwise + online_alpha * label hinge(margin1) + online_beta * upstream hinge(margin2).

    Pairs are rows of (s_pos, s_neg). The gradient is returned per input:
    (d pred, d label_pairs, d upstream_pairs).
    """
    point_loss, d_pred = pointwise_squared_error(pred, label_target)
    label_loss, d_label = hinge_mean(label_pairs, config.margin1)
    upstream_loss, d_upstream = hinge_mean(upstream_pairs, config.margin2)
    loss = point_loss + config.online_alpha * label_loss + config.online_beta * upstream_loss
    return float(loss), (d_pred, config.online_alpha * d_label, config.online_beta * d_upstream)


# ---------------------------------------------------------------------------
# Supervision for whole queries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuerySupervision:
    """Targets for one query, as indices into the query's candidate order"""

    query_id: str
    n_items: int
    label_order: np.ndarray
    modality_orders: Tuple[Tuple[str, np.ndarray], ...]
    label_pairs: np.ndarray
    upstream_pairs: Tuple[Tuple[str, np.ndarray], ...]
    point_index: np.ndarray
    point_target: np.ndarray

    @property
    def labeled(self) -> bool:
        return len(self.label_order) > 0


@dataclass(frozen=True)
class SupervisionBatch:
    queries: Tuple[QuerySupervision, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.queries)

    def subset(self, indices: Sequence[int]) -> "SupervisionBatch":
        return SupervisionBatch(tuple(self.queries[i] for i in indices))


def _listwise_query(scores: np.ndarray, sup: QuerySupervision, config: LossConfig) -> Tuple[float, np.ndarray]:
    loss, grad = _ordered_mle(scores, sup.label_order, config.normalize_listmle)
    if sup.labeled and not config.distill_on_labeled:
        return loss, grad
    for name, order in sup.modality_orders:
        weight = config.distill_weight(name)
        if weight == 0.0 or len(order) == 0:
            continue
        term, g = _ordered_mle(scores, order, config.normalize_listmle)
        loss += weight * term
        grad += weight * g
    return loss, grad


def _pairwise_query(scores: np.ndarray, sup: QuerySupervision, config: LossConfig) -> Tuple[float, np.ndarray]:
    loss, grad = label_pair_hinge(scores, sup.label_pairs, config.gamma)
    up_loss, up_grad = modality_weighted_pairwise(scores, dict(sup.upstream_pairs), config)
    return loss + up_loss, grad + up_grad


def _online_query(scores: np.ndarray, sup: QuerySupervision, config: LossConfig) -> Tuple[float, np.ndarray]:
    label_pairs = np.asarray(sup.label_pairs, dtype=int).reshape(-1, 2)
    upstream_pairs = np.concatenate(
        [np.asarray(p, dtype=int).reshape(-1, 2) for _, p in sup.upstream_pairs] or [np.zeros((0, 2), dtype=int)]
    )
    loss, (d_pred, d_label, d_up) = online_composite(
        scores[sup.point_index], sup.point_target,
        scores[label_pairs] if len(label_pairs) else np.zeros((0, 2)),
        scores[upstream_pairs] if len(upstream_pairs) else np.zeros((0, 2)),
        config,
    )
    grad = np.zeros_like(scores)
    np.add.at(grad, sup.point_index, d_pred)
    if len(label_pairs):
        np.add.at(grad, label_pairs[:, 0], d_label[:, 0])
        np.add.at(grad, label_pairs[:, 1], d_label[:, 1])
    if len(upstream_pairs):
        np.add.at(grad, upstream_pairs[:, 0], d_up[:, 0])
        np.add.at(grad, upstream_pairs[:, 1], d_up[:, 1])
    return loss, grad


def _anchor_query(scores: np.ndarray, sup: QuerySupervision, config: LossConfig) -> Tuple[float, np.ndarray]:
    grad = np.zeros_like(scores)
    point_loss, d_pred = pointwise_squared_error(scores[sup.point_index], sup.point_target)
    np.add.at(grad, sup.point_index, d_pred)
    label_loss, label_grad = label_pair_hinge(scores, sup.label_pairs, config.margin1)
    up_loss, up_grad = modality_weighted_pairwise(scores, dict(sup.upstream_pairs), config)
    loss = point_loss + config.online_alpha * label_loss + config.online_beta * up_loss
    grad += config.online_alpha * label_grad + config.online_beta * up_grad
    return loss, grad


_QUERY_OBJECTIVES = {
    "listwise": _listwise_query,
    "pairwise": _pairwise_query,
    "online": _online_query,
    "anchor": _anchor_query,
}


def query_objective(scores: np.ndarray, sup: QuerySupervision, config: LossConfig) -> Tuple[float, np.ndarray]:
    scores = _as_array(scores, "scores")
    if len(scores) != sup.n_items:
        raise ShapeError(f"query {sup.query_id}: {len(scores)} scores for {sup.n_items} items")
    return _QUERY_OBJECTIVES[config.objective](scores, sup, config)


def batch_objective(scores: Sequence[np.ndarray], batch: SupervisionBatch,
                    config: LossConfig) -> Tuple[float, List[np.ndarray]]:
    """Mean per-query loss of the configured objective, with per-query score gradients"""
    if len(scores) != len(batch):
        raise ShapeError(f"{len(scores)} score lists for {len(batch)} queries")
    if len(batch) == 0:
        return 0.0, []
    total = 0.0
    grads = []
    for s, sup in zip(scores, batch.queries):
        loss, g = query_objective(s, sup, config)
        total += loss
        grads.append(g)
    n = len(batch)
    return total / n, [g / n for g in grads]


def combined_objective(scores: Sequence[np.ndarray], batch: SupervisionBatch,
                       config: LossConfig) -> Tuple[float, List[np.ndarray]]:
    """Label ListMLE plus per-modality upstream-order ListMLE weighted by alpha/beta, averaged over queries"""
    if len(scores) != len(batch):
        raise ShapeError(f"{len(scores)} score lists for {len(batch)} queries")
    if len(batch) == 0:
        return 0.0, []
    total = 0.0
    grads = []
    for s, sup in zip(scores, batch.queries):
        loss, g = _listwise_query(_as_array(s, "scores"), sup, config)
        total += loss
        grads.append(g)
    n = len(batch)
    return total / n, [g / n for g in grads]
