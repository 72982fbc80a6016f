"""
Synthetic heterogeneous-retrieval data for SMAR
Builds datasets whose modality queues carry mismatched upstream score
distributions, a ground-truth label oracle with an annotation-cost meter,
and the JSONL reader/writer for the dataset format.
"""

import json
import math
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .config import SynthConfig
from .errors import OracleLookupError, ParseError, SchemaError
from .logger import data_log
from .models import MAX_GRADE, Candidate, Dataset, Modality, Query

# independent random streams derived from the config seed
WORLD_STREAM = 0
QUERY_STREAM = 1
SCORE_STREAM = 2
LABEL_STREAM = 3


class LabelOracle:
    """Stand-in for human annotators.

    Maps (query_id, item_id) to a 0..4 grade. `label` meters annotation cost:
    each item is counted the first time it is graded, concurrent first calls
    included. `peek` and `latent` read without metering.
    """

    def __init__(self, grades: Dict[Tuple[str, str], int],
                 latent: Optional[Dict[Tuple[str, str], float]] = None):
        self._grades = dict(grades)
        self._latent = dict(latent or {})
        self._graded = set()
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state['_lock']
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __contains__(self, key: Tuple[str, str]) -> bool:
        return key in self._grades

    def __len__(self) -> int:
        return len(self._grades)

    def _lookup(self, query_id: str, item_id: str) -> int:
        try:
            return self._grades[(query_id, item_id)]
        except KeyError:
            raise OracleLookupError(f"no grade for query '{query_id}', item '{item_id}'") from None

    def label(self, query_id: str, item_id: str) -> int:
        grade = self._lookup(query_id, item_id)
        with self._lock:
            self._graded.add((query_id, item_id))
        return grade

    def peek(self, query_id: str, item_id: str) -> int:
        return self._lookup(query_id, item_id)

    def latent(self, query_id: str, item_id: str) -> float:
        try:
            return self._latent[(query_id, item_id)]
        except KeyError:
            raise OracleLookupError(f"no latent relevance for query '{query_id}', item '{item_id}'") from None

    @property
    def query_count(self) -> int:
        with self._lock:
            return len(self._graded)

    def fresh(self) -> "LabelOracle":
        """Same grades, zeroed cost meter"""
        return LabelOracle(self._grades, self._latent)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "LabelOracle":
        """Oracle over stored labels; click-only candidates map clicked to 1 and unclicked to 0"""
        grades = {}
        for query in dataset.queries:
            for c in query.candidates:
                if c.label is not None:
                    grades[(query.query_id, c.item_id)] = int(c.label)
                elif c.clicked is not None:
                    grades[(query.query_id, c.item_id)] = 1 if c.clicked else 0
        return cls(grades)


def oracle_label(oracle: LabelOracle, query_id: str, item_id: str) -> int:
    return oracle.label(query_id, item_id)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _quantile_grades(relevance: np.ndarray) -> np.ndarray:
    """Bucket a query's latent relevance into 0..4 by rank; the top item always gets 4"""
    n = len(relevance)
    if n == 1:
        return np.array([MAX_GRADE])
    ranks = np.argsort(np.argsort(relevance, kind="stable"), kind="stable")
    return np.minimum(MAX_GRADE, (5 * ranks) // (n - 1)).astype(int)


def _copula_scores(relevance: np.ndarray, rho: float, alpha: float, beta: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Upstream scores with Beta(alpha, beta) marginals and Spearman correlation rho to relevance"""
    n = len(relevance)
    if n == 0:
        return np.zeros(0)
    normal_rank = stats.norm.ppf((stats.rankdata(relevance, method="ordinal") - 0.5) / n)
    noise = rng.standard_normal(n)
    if rho >= 1.0:
        z = normal_rank
    else:
        # Pearson correlation of a Gaussian pair with Spearman correlation rho
        pearson = 2.0 * math.sin(math.pi * rho / 6.0)
        z = pearson * normal_rank + math.sqrt(max(0.0, 1.0 - pearson ** 2)) * noise
    return stats.beta.ppf(stats.norm.cdf(z), alpha, beta)


def _as_tuple(values: np.ndarray) -> Tuple[float, ...]:
    return tuple(float(v) for v in values)


def generate_dataset(config: SynthConfig) -> Tuple[Dataset, LabelOracle]:
    """Generate a synthetic dataset and its label oracle.

    Latent relevance of an item mixes a content part (text signal plus a
    signal only visible through the visual embedding), a user-dependent taste
    part, and a user-dependent preference for the item's modality. Upstream
    scores see the latent relevance through a Gaussian copula per modality.
    """
    seed = config.seed
    n_mod = len(config.modalities)
    k = config.taste_dim
    lam = config.user_dependence

    world = np.random.default_rng([seed, WORLD_STREAM])
    taste_map = world.standard_normal((config.user_feature_dim, k))
    modality_pref = world.standard_normal((n_mod, config.user_feature_dim))
    text_proj = world.standard_normal((config.text_dim, 1 + k)) / math.sqrt(1 + k)
    visual_proj = world.standard_normal((config.visual_dim, 1 + k)) / math.sqrt(1 + k)

    raw_queries: List[Dict[str, Any]] = []
    for qi in range(config.n_queries):
        rng = np.random.default_rng([seed, QUERY_STREAM, qi])
        user = rng.standard_normal(config.user_feature_dim)
        user_taste = taste_map.T @ user / math.sqrt(config.user_feature_dim)
        items = []
        for mi, mod in enumerate(config.modalities):
            n_items = int(rng.integers(mod.queue_min, mod.queue_max + 1))
            bias = config.modality_preference * float(modality_pref[mi] @ user) / math.sqrt(config.user_feature_dim)
            for j in range(n_items):
                text_signal = rng.standard_normal()
                has_visual = bool(rng.random() < mod.visual_rate)
                visual_signal = rng.standard_normal()
                taste = rng.standard_normal(k)
                text_noise = rng.standard_normal(config.text_dim)
                visual_noise = rng.standard_normal(config.visual_dim)
                feature_noise = rng.standard_normal(config.item_feature_dim)
                if not has_visual:
                    visual_signal = 0.0

                content = text_signal + config.visual_weight * visual_signal
                personal = float(user_taste @ taste) / math.sqrt(k)
                relevance = math.sqrt(1.0 - lam) * content + math.sqrt(lam) * personal + bias

                text_emb = text_proj @ np.concatenate(([text_signal], taste)) + config.embedding_noise * text_noise
                visual_emb = None
                if has_visual:
                    visual_emb = visual_proj @ np.concatenate(([visual_signal], taste)) \
                        + config.embedding_noise * visual_noise
                features = feature_noise.copy()
                features[0] = text_signal + config.embedding_noise * feature_noise[0]

                items.append({
                    "item_id": f"q{qi:05d}-{mod.name}-{j:02d}",
                    "modality": mi + 1,
                    "relevance": relevance,
                    "features": features,
                    "text": text_emb,
                    "visual": visual_emb,
                })
        raw_queries.append({"query_id": f"q{qi:05d}", "user": user, "items": items})

    # upstream scores: one copula draw per modality pool
    scores: Dict[Tuple[int, int], float] = {}
    for mi, mod in enumerate(config.modalities):
        pool = [(qi, ii) for qi, q in enumerate(raw_queries)
                for ii, item in enumerate(q["items"]) if item["modality"] == mi + 1]
        relevance = np.array([raw_queries[qi]["items"][ii]["relevance"] for qi, ii in pool])
        rng = np.random.default_rng([seed, SCORE_STREAM, mi])
        drawn = _copula_scores(relevance, mod.rho, mod.score_alpha, mod.score_beta, rng)
        for key, value in zip(pool, drawn):
            scores[key] = float(value)

    label_rng = np.random.default_rng([seed, LABEL_STREAM])
    grades: Dict[Tuple[str, str], int] = {}
    latent: Dict[Tuple[str, str], float] = {}
    queries = []
    for qi, raw in enumerate(raw_queries):
        relevance = np.array([item["relevance"] for item in raw["items"]])
        clean = _quantile_grades(relevance)
        candidates = []
        for ii, item in enumerate(raw["items"]):
            flip, direction = label_rng.random(2)
            grade = int(clean[ii])
            if flip < config.label_noise:
                if grade == 0:
                    grade = 1
                elif grade == MAX_GRADE:
                    grade = MAX_GRADE - 1
                else:
                    grade += 1 if direction < 0.5 else -1
            grades[(raw["query_id"], item["item_id"])] = grade
            latent[(raw["query_id"], item["item_id"])] = float(item["relevance"])
            candidates.append(Candidate(
                item_id=item["item_id"],
                modality=item["modality"],
                upstream_score=scores[(qi, ii)],
                features=_as_tuple(item["features"]),
                text_embedding=_as_tuple(item["text"]),
                visual_embedding=None if item["visual"] is None else _as_tuple(item["visual"]),
            ))
        queries.append(Query(
            query_id=raw["query_id"],
            user_features=_as_tuple(raw["user"]),
            candidates=tuple(candidates),
        ))

    dataset = Dataset(
        modalities=tuple(Modality(id=i + 1, name=m.name) for i, m in enumerate(config.modalities)),
        queries=tuple(queries),
        embedding_dims=(config.text_dim, config.visual_dim),
        feature_dims=(config.item_feature_dim, config.user_feature_dim),
    )
    data_log.log_generated(len(queries), dataset.n_candidates, seed, [m.name for m in dataset.modalities])
    return dataset, LabelOracle(grades, latent)


def attach_labels(dataset: Dataset, oracle: LabelOracle) -> Dataset:
    """Write oracle grades into every candidate without touching the cost meter"""
    queries = []
    for query in dataset.queries:
        candidates = tuple(c.with_label(oracle.peek(query.query_id, c.item_id)) for c in query.candidates)
        queries.append(Query(query.query_id, query.user_features, candidates))
    return dataset.with_queries(queries)


def strip_labels(dataset: Dataset) -> Dataset:
    queries = []
    for query in dataset.queries:
        candidates = tuple(c.with_label(None) for c in query.candidates)
        queries.append(Query(query.query_id, query.user_features, candidates))
    return dataset.with_queries(queries)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def _candidate_record(c: Candidate) -> Dict[str, Any]:
    return {
        "item_id": c.item_id,
        "modality": int(c.modality),
        "upstream_score": float(c.upstream_score),
        "features": [float(v) for v in c.features],
        "text_embedding": [float(v) for v in c.text_embedding],
        "visual_embedding": None if c.visual_embedding is None else [float(v) for v in c.visual_embedding],
        "label": None if c.label is None else int(c.label),
        "clicked": None if c.clicked is None else bool(c.clicked),
    }


def serialize_dataset(dataset: Dataset) -> str:
    """JSONL text, one query per line; floats keep full precision"""
    lines = []
    for query in dataset.queries:
        record = {
            "query_id": query.query_id,
            "user_features": [float(v) for v in query.user_features],
            "candidates": [_candidate_record(c) for c in query.candidates],
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def write_jsonl(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_dataset(dataset))
    return path


def _require(record: Dict[str, Any], key: str, kind, line: int, where: str = "") -> Any:
    if key not in record:
        raise ParseError(f"missing field \"{key}\"{where}", line)
    value = record[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ParseError(f"field \"{key}\"{where} has the wrong type", line)
    return value


def _reals(values: Any, key: str, line: int, where: str = "") -> Tuple[float, ...]:
    if not isinstance(values, list):
        raise ParseError(f"field \"{key}\"{where} must be a list of numbers", line)
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ParseError(f"field \"{key}\"{where} must be a list of numbers", line)
        out.append(float(v))
    return tuple(out)


def ingest_jsonl(path: Union[str, Path], modality_names: Optional[Sequence[str]] = None) -> Dataset:
    """Read a dataset from JSONL.

    Dimensions are taken from the first record; later records that disagree
    raise SchemaError. Modalities are ids 1..max id seen, named from
    `modality_names` when given.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"file not found: {path}")

    dims: Dict[str, Optional[int]] = {"text": None, "visual": None, "item": None, "user": None}
    queries: List[Query] = []
    max_modality = 0

    def check_dim(name: str, size: int, line: int, where: str):
        if dims[name] is None:
            dims[name] = size
        elif dims[name] != size:
            raise SchemaError(f"{where} has dimension {size}, expected {dims[name]}", line)

    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON ({e.msg})", line_no) from None
            if not isinstance(record, dict):
                raise ParseError("record must be a JSON object", line_no)

            query_id = _require(record, "query_id", str, line_no)
            user = _reals(_require(record, "user_features", list, line_no), "user_features", line_no)
            check_dim("user", len(user), line_no, "user_features")
            raw_candidates = _require(record, "candidates", list, line_no)

            candidates = []
            for idx, rc in enumerate(raw_candidates):
                where = f" in candidate {idx}"
                if not isinstance(rc, dict):
                    raise ParseError(f"candidate {idx} must be a JSON object", line_no)
                item_id = _require(rc, "item_id", str, line_no, where)
                modality = _require(rc, "modality", int, line_no, where)
                upstream = _require(rc, "upstream_score", (int, float), line_no, where)
                features = _reals(_require(rc, "features", list, line_no, where), "features", line_no, where)
                text = _reals(_require(rc, "text_embedding", list, line_no, where), "text_embedding", line_no, where)
                visual_raw = rc.get("visual_embedding")
                visual = None if visual_raw is None else _reals(visual_raw, "visual_embedding", line_no, where)
                label = rc.get("label")
                if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
                    raise ParseError(f"field \"label\"{where} must be an integer or null", line_no)
                clicked = rc.get("clicked")
                if clicked is not None and not isinstance(clicked, bool):
                    raise ParseError(f"field \"clicked\"{where} must be a boolean or null", line_no)

                check_dim("item", len(features), line_no, f"features{where}")
                check_dim("text", len(text), line_no, f"text_embedding{where}")
                if visual is not None:
                    check_dim("visual", len(visual), line_no, f"visual_embedding{where}")
                max_modality = max(max_modality, modality)

                candidates.append(Candidate(
                    item_id=item_id,
                    modality=modality,
                    upstream_score=float(upstream),
                    features=features,
                    text_embedding=text,
                    visual_embedding=visual,
                    label=label,
                    clicked=clicked,
                ))
            queries.append(Query(query_id=query_id, user_features=user, candidates=tuple(candidates)))

    n_mod = max(max_modality, 1)
    if modality_names is not None and len(modality_names) != n_mod:
        raise SchemaError(f"{len(modality_names)} modality names given but the data has {n_mod} modalities")
    names = list(modality_names) if modality_names is not None else [f"m{i}" for i in range(1, n_mod + 1)]

    dataset = Dataset(
        modalities=tuple(Modality(id=i + 1, name=names[i]) for i in range(n_mod)),
        queries=tuple(queries),
        embedding_dims=(dims["text"] or 0, dims["visual"] or dims["text"] or 0),
        feature_dims=(dims["item"] or 0, dims["user"] or 0),
    )
    data_log.log_ingest(str(path), len(queries))
    return dataset
