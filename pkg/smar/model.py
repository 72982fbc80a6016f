"""
Whole-page reranker for SMAR
Bucketized item/user feature encoders, gated fusion of visual and text
embeddings, pre-norm multi-head cross-attention from items to user tokens,
and a linear scoring head. Forward and backward passes are written out in
numpy so every gradient can be checked against finite differences.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import LossConfig, ModelConfig
from .errors import NumericError, ParseError, ShapeError
from .models import Candidate, Dataset, Query, RankedList
from .objectives import SupervisionBatch, batch_objective

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
CHECKPOINT_FORMAT = "smar-reranker"
CHECKPOINT_VERSION = 1

Boundaries = List[List[float]]


# ---------------------------------------------------------------------------
# Feature bucketization
# ---------------------------------------------------------------------------

def bucketize_features(raw: Sequence[float], boundaries: Sequence[Sequence[float]]) -> np.ndarray:
    """One-hot bucket membership per raw value, concatenated over features.

    Buckets are half-open [lo, hi): a value equal to a cut point lands in the
    bucket above it.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or len(raw) != len(boundaries):
        raise ShapeError(f"{raw.size} raw values for {len(boundaries)} boundary lists")
    return bucketize_matrix(raw[None, :], boundaries)[0]


def bucketize_matrix(raw: np.ndarray, boundaries: Sequence[Sequence[float]]) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(boundaries):
        raise ShapeError(f"raw matrix of shape {raw.shape} for {len(boundaries)} boundary lists")
    if np.isnan(raw).any():
        raise NumericError("cannot bucketize NaN")
    blocks = []
    for col, cuts in enumerate(boundaries):
        cuts = np.asarray(cuts, dtype=np.float64)
        idx = np.searchsorted(cuts, raw[:, col], side="right")
        block = np.zeros((raw.shape[0], len(cuts) + 1))
        block[np.arange(raw.shape[0]), idx] = 1.0
        blocks.append(block)
    if not blocks:
        return np.zeros((raw.shape[0], 0))
    return np.concatenate(blocks, axis=1)


def bucket_width(boundaries: Sequence[Sequence[float]]) -> int:
    return sum(len(cuts) + 1 for cuts in boundaries)


def fit_bucket_boundaries(values: np.ndarray, n_buckets: int) -> Boundaries:
    """Quantile cut points per column; constant columns get a single bucket"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {values.shape}")
    if values.shape[0] == 0:
        return [[] for _ in range(values.shape[1])]
    qs = np.arange(1, n_buckets) / n_buckets
    boundaries = []
    for col in range(values.shape[1]):
        cuts = np.unique(np.quantile(values[:, col], qs))
        # a cut at the minimum would leave the lowest bucket empty
        cuts = cuts[cuts > values[:, col].min()]
        boundaries.append([float(c) for c in cuts])
    return boundaries


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gelu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def _layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + offset, (xhat, inv)


def _layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def hybrid_fusion(e_visual: Optional[np.ndarray], e_text: np.ndarray, gate_w: np.ndarray,
                  gate_b: np.ndarray) -> np.ndarray:
    """z = sigmoid([e_visual, e_text] W + b); e_sem = z * e_visual + (1 - z) * e_text.

    Without a visual embedding the text embedding passes through unchanged.
    Works on single vectors and on row-stacked batches.
    """
    e_text = np.asarray(e_text, dtype=np.float64)
    if e_visual is None:
        return e_text.copy()
    e_visual = np.asarray(e_visual, dtype=np.float64)
    if e_visual.shape != e_text.shape:
        raise ShapeError(f"visual embedding shape {e_visual.shape} does not match text {e_text.shape}")
    width = e_text.shape[-1]
    if gate_w.shape != (2 * width, width) or gate_b.shape != (width,):
        raise ShapeError(f"gate parameters {gate_w.shape}/{gate_b.shape} do not fit embeddings of width {width}")
    z = _sigmoid(np.concatenate([e_visual, e_text], axis=-1) @ gate_w + gate_b)
    return z * e_visual + (1.0 - z) * e_text


def hybrid_fusion_backward(d_sem: np.ndarray, e_visual: np.ndarray, e_text: np.ndarray, gate_w: np.ndarray,
                           gate_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the gate parameters (W, b) for row-stacked inputs"""
    concat = np.concatenate([e_visual, e_text], axis=-1)
    z = _sigmoid(concat @ gate_w + gate_b)
    dz_pre = d_sem * (e_visual - e_text) * z * (1.0 - z)
    return concat.T @ dz_pre, dz_pre.sum(axis=0)


def cross_attention(a: np.ndarray, tokens: np.ndarray, query_index: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                    wv: np.ndarray, wo: np.ndarray, n_heads: int):
    """Multi-head attention from item rows `a` (N, d) to their query's user tokens (B, U, d)"""
    n, d = a.shape
    n_tokens = tokens.shape[1]
    dh = d // n_heads
    q = (a @ wq).reshape(n, n_heads, dh)
    k = (tokens @ wk).reshape(tokens.shape[0], n_tokens, n_heads, dh)
    v = (tokens @ wv).reshape(tokens.shape[0], n_tokens, n_heads, dh)
    kg, vg = k[query_index], v[query_index]

    logits = np.einsum("nhd,nuhd->nhu", q, kg) / math.sqrt(dh)
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    heads = np.einsum("nhu,nuhd->nhd", attn, vg).reshape(n, d)
    cache = (a, tokens, query_index, q, kg, vg, attn, heads, n_heads)
    return heads @ wo, cache


def cross_attention_backward(d_out: np.ndarray, cache, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                             wo: np.ndarray):
    a, tokens, query_index, q, kg, vg, attn, heads, n_heads = cache
    n, d = a.shape
    b, n_tokens, _ = tokens.shape
    dh = d // n_heads

    d_wo = heads.T @ d_out
    d_heads = (d_out @ wo.T).reshape(n, n_heads, dh)
    d_attn = np.einsum("nhd,nuhd->nhu", d_heads, vg)
    d_vg = np.einsum("nhu,nhd->nuhd", attn, d_heads)
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    d_q = np.einsum("nhu,nuhd->nhd", d_logits, kg).reshape(n, d)
    d_kg = np.einsum("nhu,nhd->nuhd", d_logits, q)

    d_k = np.zeros((b, n_tokens, n_heads, dh))
    d_v = np.zeros((b, n_tokens, n_heads, dh))
    np.add.at(d_k, query_index, d_kg)
    np.add.at(d_v, query_index, d_vg)
    d_k = d_k.reshape(b * n_tokens, d)
    d_v = d_v.reshape(b * n_tokens, d)
    flat_tokens = tokens.reshape(b * n_tokens, d)

    d_wq = a.T @ d_q
    d_wk = flat_tokens.T @ d_k
    d_wv = flat_tokens.T @ d_v
    d_a = d_q @ wq.T
    d_tokens = (d_k @ wk.T + d_v @ wv.T).reshape(b, n_tokens, d)
    return d_a, d_tokens, d_wq, d_wk, d_wv, d_wo


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    """Row-stacked inputs of several queries"""

    query_ids: Tuple[str, ...]
    offsets: Tuple[int, ...]
    text: np.ndarray
    visual: np.ndarray
    has_visual: np.ndarray
    item_bits: np.ndarray
    user_bits: np.ndarray
    query_index: np.ndarray

    def split(self, values: np.ndarray) -> List[np.ndarray]:
        return [values[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.query_ids))]


@dataclass
class TrainingBatch:
    queries: Tuple[Query, ...]
    supervision: SupervisionBatch


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class RerankerModel:
    """All learnable parameters plus the fixed encoding choices they depend on"""

    def __init__(self, config: ModelConfig, text_dim: int, visual_dim: int, n_modalities: int,
                 item_boundaries: Boundaries, user_boundaries: Boundaries,
                 params: Optional[Dict[str, np.ndarray]] = None):
        if config.embed_dim <= text_dim:
            raise ShapeError(f"embed_dim ({config.embed_dim}) must exceed text_dim ({text_dim})")
        if config.hybrid_fusion and visual_dim != text_dim:
            raise ShapeError(f"hybrid fusion needs visual_dim == text_dim, got {visual_dim} and {text_dim}")
        self.config = config
        self.text_dim = text_dim
        self.visual_dim = visual_dim
        self.n_modalities = n_modalities
        self.item_boundaries = [list(map(float, cuts)) for cuts in item_boundaries]
        self.user_boundaries = [list(map(float, cuts)) for cuts in user_boundaries]
        self.params = params if params is not None else self._init_params()
        self._check_shapes()

    # -- construction -------------------------------------------------------

    @property
    def item_width(self) -> int:
        return bucket_width(self.item_boundaries) + self.n_modalities

    @property
    def user_width(self) -> int:
        return bucket_width(self.user_boundaries)

    @property
    def n_raw_item_features(self) -> int:
        return len(self.item_boundaries)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        c = self.config
        d, t = c.embed_dim, self.text_dim
        shapes: Dict[str, Tuple[int, ...]] = {}
        if c.hybrid_fusion:
            shapes["gate_W"] = (2 * t, t)
            shapes["gate_b"] = (t,)
        shapes["feat_W1"] = (self.item_width, c.feature_hidden)
        shapes["feat_b1"] = (c.feature_hidden,)
        shapes["feat_W2"] = (c.feature_hidden, d - t)
        shapes["feat_b2"] = (d - t,)
        if c.attention:
            shapes["user_W1"] = (self.user_width, c.feature_hidden)
            shapes["user_b1"] = (c.feature_hidden,)
            shapes["user_W2"] = (c.feature_hidden, c.user_tokens * d)
            shapes["user_b2"] = (c.user_tokens * d,)
        for blk in range(c.n_blocks):
            if c.attention:
                shapes[f"block{blk}.ln1_g"] = (d,)
                shapes[f"block{blk}.ln1_b"] = (d,)
                for name in ("wq", "wk", "wv", "wo"):
                    shapes[f"block{blk}.{name}"] = (d, d)
            shapes[f"block{blk}.ln2_g"] = (d,)
            shapes[f"block{blk}.ln2_b"] = (d,)
            shapes[f"block{blk}.mlp_W1"] = (d, c.mlp_hidden)
            shapes[f"block{blk}.mlp_b1"] = (c.mlp_hidden,)
            shapes[f"block{blk}.mlp_W2"] = (c.mlp_hidden, d)
            shapes[f"block{blk}.mlp_b2"] = (d,)
        shapes["head_w"] = (d,)
        shapes["head_b"] = (1,)
        return shapes

    def _init_params(self) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng([self.config.seed, 101])
        params = {}
        for name, shape in self.param_shapes().items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                params[name] = np.ones(shape)
            elif len(shape) == 2:
                params[name] = _xavier(rng, *shape)
            elif name == "head_w":
                params[name] = _xavier(rng, shape[0], 1)[:, 0]
            else:
                # biases and offsets, the fusion gate bias included, start at zero
                params[name] = np.zeros(shape)
        return params

    def _check_shapes(self):
        expected = self.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter names do not match the config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise NumericError(f"parameter {name} is not finite")

    @classmethod
    def initialize(cls, config: ModelConfig, dataset: Dataset) -> "RerankerModel":
        """Fresh model for a dataset; bucket boundaries come from the config or from dataset quantiles"""
        item_boundaries = config.item_bucket_boundaries
        if item_boundaries is None:
            item_boundaries = fit_bucket_boundaries(_raw_item_matrix(dataset.queries, config), config.n_buckets)
        user_boundaries = config.user_bucket_boundaries
        if user_boundaries is None:
            users = np.array([q.user_features for q in dataset.queries], dtype=np.float64)
            user_boundaries = fit_bucket_boundaries(users.reshape(len(dataset.queries), dataset.user_dim),
                                                    config.n_buckets)
        expected_items = dataset.item_dim + (1 if config.use_upstream_feature else 0)
        if len(item_boundaries) != expected_items:
            raise ShapeError(f"{len(item_boundaries)} item boundary lists for {expected_items} item features")
        if len(user_boundaries) != dataset.user_dim:
            raise ShapeError(f"{len(user_boundaries)} user boundary lists for {dataset.user_dim} user features")
        return cls(config, dataset.text_dim, dataset.visual_dim, len(dataset.modalities),
                   item_boundaries, user_boundaries)

    def copy(self) -> "RerankerModel":
        return RerankerModel(self.config, self.text_dim, self.visual_dim, self.n_modalities,
                             self.item_boundaries, self.user_boundaries,
                             {name: value.copy() for name, value in self.params.items()})

    def same_parameters(self, other: "RerankerModel") -> bool:
        return (
            self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    # -- encoding -----------------------------------------------------------

    def encode(self, queries: Sequence[Query], candidates: Optional[Sequence[Sequence[Candidate]]] = None
               ) -> EncodedBatch:
        if candidates is None:
            candidates = [q.candidates for q in queries]
        rows = [c for cands in candidates for c in cands]
        offsets = np.concatenate([[0], np.cumsum([len(c) for c in candidates])]).astype(int)
        n = len(rows)

        text = np.zeros((n, self.text_dim))
        visual = np.zeros((n, self.visual_dim))
        has_visual = np.zeros(n, dtype=bool)
        modality_bits = np.zeros((n, self.n_modalities))
        for r, c in enumerate(rows):
            if len(c.text_embedding) != self.text_dim:
                raise ShapeError(f"item {c.item_id}: text_embedding has dimension {len(c.text_embedding)}, "
                                 f"expected {self.text_dim}")
            text[r] = c.text_embedding
            if c.visual_embedding is not None and self.config.hybrid_fusion:
                if len(c.visual_embedding) != self.visual_dim:
                    raise ShapeError(f"item {c.item_id}: visual_embedding has dimension "
                                     f"{len(c.visual_embedding)}, expected {self.visual_dim}")
                visual[r] = c.visual_embedding
                has_visual[r] = True
            if not 1 <= c.modality <= self.n_modalities:
                raise ShapeError(f"item {c.item_id}: modality {c.modality} outside 1..{self.n_modalities}")
            modality_bits[r, c.modality - 1] = 1.0

        raw_items = _raw_item_matrix(queries, self.config, candidates)
        if raw_items.shape[1] != self.n_raw_item_features:
            raise ShapeError(f"{raw_items.shape[1]} item features, model expects {self.n_raw_item_features}")
        item_bits = np.concatenate([bucketize_matrix(raw_items, self.item_boundaries), modality_bits], axis=1)

        users = np.array([q.user_features for q in queries], dtype=np.float64).reshape(len(queries), -1)
        if users.shape[1] != len(self.user_boundaries):
            raise ShapeError(f"{users.shape[1]} user features, model expects {len(self.user_boundaries)}")
        user_bits = bucketize_matrix(users, self.user_boundaries)

        query_index = np.repeat(np.arange(len(queries)), np.diff(offsets))
        return EncodedBatch(
            query_ids=tuple(q.query_id for q in queries),
            offsets=tuple(int(o) for o in offsets),
            text=text,
            visual=visual,
            has_visual=has_visual,
            item_bits=item_bits,
            user_bits=user_bits,
            query_index=query_index,
        )

    # -- forward / backward -------------------------------------------------

    def forward_encoded(self, enc: EncodedBatch):
        """Scores for every row plus the cache the backward pass needs"""
        p, c = self.params, self.config
        cache: Dict[str, object] = {"enc": enc}

        e_sem = enc.text.copy()
        rows = np.flatnonzero(enc.has_visual)
        if c.hybrid_fusion and len(rows):
            e_sem[rows] = hybrid_fusion(enc.visual[rows], enc.text[rows], p["gate_W"], p["gate_b"])
        cache["fusion_rows"] = rows

        feat_pre = enc.item_bits @ p["feat_W1"] + p["feat_b1"]
        feat_hidden, feat_t = _gelu(feat_pre)
        e_feat = feat_hidden @ p["feat_W2"] + p["feat_b2"]
        cache["feat"] = (feat_pre, feat_hidden, feat_t)
        x = np.concatenate([e_sem, e_feat], axis=1)

        tokens = None
        if c.attention:
            user_pre = enc.user_bits @ p["user_W1"] + p["user_b1"]
            user_hidden, user_t = _gelu(user_pre)
            tokens = (user_hidden @ p["user_W2"] + p["user_b2"]).reshape(-1, c.user_tokens, c.embed_dim)
            cache["user"] = (user_pre, user_hidden, user_t)

        blocks = []
        for blk in range(c.n_blocks):
            pre = f"block{blk}."
            step = {}
            if c.attention:
                a, step["ln1"] = _layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
                attn_out, step["attn"] = cross_attention(a, tokens, enc.query_index, p[pre + "wq"], p[pre + "wk"],
                                                         p[pre + "wv"], p[pre + "wo"], c.n_heads)
                x = x + attn_out
            b, step["ln2"] = _layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            mlp_pre = b @ p[pre + "mlp_W1"] + p[pre + "mlp_b1"]
            mlp_hidden, mlp_t = _gelu(mlp_pre)
            x = x + mlp_hidden @ p[pre + "mlp_W2"] + p[pre + "mlp_b2"]
            step["mlp"] = (b, mlp_pre, mlp_hidden, mlp_t)
            blocks.append(step)
        cache["blocks"] = blocks
        cache["final"] = x

        scores = x @ p["head_w"] + p["head_b"][0]
        return scores, cache

    def backward(self, d_scores: np.ndarray, cache) -> Dict[str, np.ndarray]:
        p, c = self.params, self.config
        t = self.text_dim
        enc: EncodedBatch = cache["enc"]
        grads = {name: np.zeros_like(value) for name, value in p.items()}

        x = cache["final"]
        grads["head_w"] = x.T @ d_scores
        grads["head_b"] = np.array([d_scores.sum()])
        dx = np.outer(d_scores, p["head_w"])

        d_tokens = None
        if c.attention:
            d_tokens = np.zeros((len(enc.query_ids), c.user_tokens, c.embed_dim))

        for blk in reversed(range(c.n_blocks)):
            pre = f"block{blk}."
            step = cache["blocks"][blk]
            b, mlp_pre, mlp_hidden, mlp_t = step["mlp"]
            grads[pre + "mlp_W2"] = mlp_hidden.T @ dx
            grads[pre + "mlp_b2"] = dx.sum(axis=0)
            d_mlp_pre = (dx @ p[pre + "mlp_W2"].T) * _gelu_grad(mlp_pre, mlp_t)
            grads[pre + "mlp_W1"] = b.T @ d_mlp_pre
            grads[pre + "mlp_b1"] = d_mlp_pre.sum(axis=0)
            d_b = d_mlp_pre @ p[pre + "mlp_W1"].T
            d_x, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_backward(d_b, p[pre + "ln2_g"], step["ln2"])
            dx = dx + d_x

            if c.attention:
                d_a, d_tok, dwq, dwk, dwv, dwo = cross_attention_backward(
                    dx, step["attn"], p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], p[pre + "wo"])
                grads[pre + "wq"], grads[pre + "wk"] = dwq, dwk
                grads[pre + "wv"], grads[pre + "wo"] = dwv, dwo
                d_tokens += d_tok
                d_x, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_backward(
                    d_a, p[pre + "ln1_g"], step["ln1"])
                dx = dx + d_x

        if c.attention:
            user_pre, user_hidden, user_t = cache["user"]
            d_flat = d_tokens.reshape(len(enc.query_ids), -1)
            grads["user_W2"] = user_hidden.T @ d_flat
            grads["user_b2"] = d_flat.sum(axis=0)
            d_user_pre = (d_flat @ p["user_W2"].T) * _gelu_grad(user_pre, user_t)
            grads["user_W1"] = enc.user_bits.T @ d_user_pre
            grads["user_b1"] = d_user_pre.sum(axis=0)

        d_sem, d_feat = dx[:, :t], dx[:, t:]
        feat_pre, feat_hidden, feat_t = cache["feat"]
        grads["feat_W2"] = feat_hidden.T @ d_feat
        grads["feat_b2"] = d_feat.sum(axis=0)
        d_feat_pre = (d_feat @ p["feat_W2"].T) * _gelu_grad(feat_pre, feat_t)
        grads["feat_W1"] = enc.item_bits.T @ d_feat_pre
        grads["feat_b1"] = d_feat_pre.sum(axis=0)

        rows = cache["fusion_rows"]
        if c.hybrid_fusion and len(rows):
            grads["gate_W"], grads["gate_b"] = hybrid_fusion_backward(
                d_sem[rows], enc.visual[rows], enc.text[rows], p["gate_W"], p["gate_b"])
        return grads

    def score_queries(self, queries: Sequence[Query]) -> List[np.ndarray]:
        if not queries:
            return []
        enc = self.encode(queries)
        scores, _ = self.forward_encoded(enc)
        return enc.split(scores)

    def loss_and_grads(self, batch: TrainingBatch, loss_config: LossConfig,
                       encoded: Optional[EncodedBatch] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        enc = encoded if encoded is not None else self.encode(batch.queries)
        scores, cache = self.forward_encoded(enc)
        loss, d_lists = batch_objective(enc.split(scores), batch.supervision, loss_config)
        d_scores = np.concatenate(d_lists) if d_lists else np.zeros(0)
        return loss, self.backward(d_scores, cache)

    def loss(self, batch: TrainingBatch, loss_config: LossConfig,
             encoded: Optional[EncodedBatch] = None) -> float:
        enc = encoded if encoded is not None else self.encode(batch.queries)
        scores, _ = self.forward_encoded(enc)
        loss, _ = batch_objective(enc.split(scores), batch.supervision, loss_config)
        return loss


def _raw_item_matrix(queries: Sequence[Query], config: ModelConfig,
                     candidates: Optional[Sequence[Sequence[Candidate]]] = None) -> np.ndarray:
    if candidates is None:
        candidates = [q.candidates for q in queries]
    rows = []
    for cands in candidates:
        for c in cands:
            row = list(c.features)
            if config.use_upstream_feature:
                row.append(c.upstream_score)
            rows.append(row)
    width = len(rows[0]) if rows else 0
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def forward(model: RerankerModel, query: Query, candidates: Optional[Sequence[Candidate]] = None) -> np.ndarray:
    """Scores for the candidates of one query (all of them by default), in the given order"""
    cands = query.candidates if candidates is None else tuple(candidates)
    if not cands:
        return np.zeros(0)
    enc = model.encode([query], [cands])
    scores, _ = model.forward_encoded(enc)
    return scores


def score_page(model: RerankerModel, query: Query) -> RankedList:
    scores = forward(model, query)
    return RankedList.from_scores(query.query_id, [c.item_id for c in query.candidates], scores)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(model: RerankerModel, batch: TrainingBatch, loss_config: LossConfig, step: float = 1e-5,
               tensors: Optional[Sequence[str]] = None, samples_per_tensor: int = 20, seed: int = 0,
               floor: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference parameter gradients.

    Up to `samples_per_tensor` entries are drawn from every checked tensor
    (all entries when the tensor is smaller). Relative error is
    |a - n| / max(|a|, |n|, floor); entries smaller than `floor` are judged
    on absolute error.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    enc = model.encode(batch.queries)
    _, analytic = model.loss_and_grads(batch, loss_config, encoded=enc)
    rng = np.random.default_rng([seed, 17])
    names = list(tensors) if tensors is not None else list(model.params)

    worst = 0.0
    for name in names:
        tensor = model.params[name]
        flat = tensor.reshape(-1)
        count = min(flat.size, max(samples_per_tensor, 1))
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + step
            plus = model.loss(batch, loss_config, encoded=enc)
            flat[idx] = original - step
            minus = model.loss(batch, loss_config, encoded=enc)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return float(worst)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: RerankerModel, path: Union[str, Path]) -> Path:
    """JSON checkpoint: config, encoding choices and every tensor (row-major, declared shape)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "text_dim": model.text_dim,
        "visual_dim": model.visual_dim,
        "n_modalities": model.n_modalities,
        "item_boundaries": model.item_boundaries,
        "user_boundaries": model.user_boundaries,
        "params": {
            name: {"shape": list(value.shape), "data": [float(v) for v in value.reshape(-1)]}
            for name, value in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f)
        f.write("\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> RerankerModel:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"checkpoint is not valid JSON ({e.msg})", e.lineno) from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path} is not a reranker checkpoint")
    try:
        config = ModelConfig.model_validate(payload["config"])
        params = {
            name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["params"].items()
        }
        return RerankerModel(config, int(payload["text_dim"]), int(payload["visual_dim"]),
                             int(payload["n_modalities"]), payload["item_boundaries"], payload["user_boundaries"],
                             params)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"checkpoint {path} is incomplete: {e}") from None
