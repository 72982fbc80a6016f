"""
Domain types for SMAR
Modalities, candidates, queries, datasets and ranked lists. Everything here is
immutable once built, so datasets can be shared across worker processes.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError

GRADES = (0, 1, 2, 3, 4)
MAX_GRADE = 4


@dataclass(frozen=True)
class Modality:
    id: int
    name: str


@dataclass(frozen=True)
class Candidate:
    item_id: str
    modality: int
    upstream_score: float
    features: Tuple[float, ...]
    text_embedding: Tuple[float, ...]
    visual_embedding: Optional[Tuple[float, ...]] = None
    label: Optional[int] = None
    clicked: Optional[bool] = None

    @property
    def has_visual(self) -> bool:
        return self.visual_embedding is not None

    def with_label(self, grade: Optional[int]) -> "Candidate":
        return replace(self, label=grade)


@dataclass(frozen=True)
class Query:
    query_id: str
    user_features: Tuple[float, ...]
    candidates: Tuple[Candidate, ...]

    @property
    def n_q(self) -> int:
        return len(self.candidates)

    @property
    def modality_ids(self) -> Tuple[int, ...]:
        return tuple(sorted({c.modality for c in self.candidates}))

    def queue(self, modality: int) -> List[Candidate]:
        """Candidates of one modality, upstream score descending, item_id ascending on ties"""
        members = [c for c in self.candidates if c.modality == modality]
        return sorted(members, key=lambda c: (-c.upstream_score, c.item_id))

    def candidate(self, item_id: str) -> Candidate:
        for c in self.candidates:
            if c.item_id == item_id:
                return c
        raise KeyError(f"{self.query_id}/{item_id}")


@dataclass(frozen=True)
class Dataset:
    modalities: Tuple[Modality, ...]
    queries: Tuple[Query, ...]
    embedding_dims: Tuple[int, int]
    feature_dims: Tuple[int, int]

    @property
    def text_dim(self) -> int:
        return self.embedding_dims[0]

    @property
    def visual_dim(self) -> int:
        return self.embedding_dims[1]

    @property
    def item_dim(self) -> int:
        return self.feature_dims[0]

    @property
    def user_dim(self) -> int:
        return self.feature_dims[1]

    @property
    def n_candidates(self) -> int:
        return sum(q.n_q for q in self.queries)

    def modality_name(self, modality_id: int) -> str:
        for m in self.modalities:
            if m.id == modality_id:
                return m.name
        return f"m{modality_id}"

    def modality_id(self, name: str) -> int:
        for m in self.modalities:
            if m.name == name:
                return m.id
        raise ArgumentError(f"unknown modality '{name}'; dataset has {[m.name for m in self.modalities]}")

    def query(self, query_id: str) -> Query:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise KeyError(query_id)

    def subset(self, query_ids: Iterable[str]) -> "Dataset":
        """Dataset restricted to the given queries (original order kept)"""
        keep = set(query_ids)
        return replace(self, queries=tuple(q for q in self.queries if q.query_id in keep))

    def with_queries(self, queries: Sequence[Query]) -> "Dataset":
        return replace(self, queries=tuple(queries))


@dataclass(frozen=True)
class RankedList:
    query_id: str
    item_ids: Tuple[str, ...]
    scores: Tuple[float, ...]

    @classmethod
    def from_scores(cls, query_id: str, item_ids: Sequence[str], scores: Sequence[float]) -> "RankedList":
        """Sort by score descending; ties go to the smaller item_id"""
        if len(item_ids) != len(scores):
            raise ArgumentError(f"{len(item_ids)} item ids but {len(scores)} scores")
        order = sorted(range(len(item_ids)), key=lambda i: (-float(scores[i]), item_ids[i]))
        return cls(
            query_id=query_id,
            item_ids=tuple(item_ids[i] for i in order),
            scores=tuple(float(scores[i]) for i in order),
        )

    def __len__(self) -> int:
        return len(self.item_ids)

    def positions(self) -> Dict[str, int]:
        return {item_id: pos for pos, item_id in enumerate(self.item_ids)}


@dataclass(frozen=True)
class Violation:
    message: str
    query_id: Optional[str] = None
    item_id: Optional[str] = None

    def __str__(self) -> str:
        where = "/".join(part for part in (self.query_id, self.item_id) if part is not None)
        return f"{where}: {self.message}" if where else self.message


def _finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_dataset(dataset: Dataset) -> List[Violation]:
    """Collect every invariant violation; an empty list means the dataset is valid"""
    violations: List[Violation] = []

    ids = [m.id for m in dataset.modalities]
    if not ids:
        violations.append(Violation("dataset declares no modalities"))
    elif sorted(ids) != list(range(1, len(ids) + 1)):
        violations.append(Violation(f"modality ids must be dense 1..M, got {sorted(ids)}"))
    known = set(ids)

    text_dim, visual_dim = dataset.embedding_dims
    item_dim, user_dim = dataset.feature_dims

    seen_queries = set()
    for query in dataset.queries:
        qid = query.query_id
        if qid in seen_queries:
            violations.append(Violation("duplicate query_id", qid))
        seen_queries.add(qid)

        if len(query.user_features) != user_dim:
            violations.append(Violation(
                f"user_features has dimension {len(query.user_features)}, expected {user_dim}", qid))
        elif not _finite(query.user_features):
            violations.append(Violation("user_features not finite", qid))

        if not query.candidates:
            violations.append(Violation("empty candidate set", qid))
            continue

        seen_items = set()
        for c in query.candidates:
            iid = c.item_id
            if iid in seen_items:
                violations.append(Violation("duplicate item_id", qid, iid))
            seen_items.add(iid)

            if c.modality not in known:
                violations.append(Violation(f"unknown modality {c.modality}", qid, iid))
            if not math.isfinite(c.upstream_score):
                violations.append(Violation("upstream_score not finite", qid, iid))
            if c.label is not None and c.label not in GRADES:
                violations.append(Violation("label out of range", qid, iid))

            if len(c.features) != item_dim:
                violations.append(Violation(
                    f"features has dimension {len(c.features)}, expected {item_dim}", qid, iid))
            elif not _finite(c.features):
                violations.append(Violation("features not finite", qid, iid))

            if len(c.text_embedding) != text_dim:
                violations.append(Violation(
                    f"text_embedding has dimension {len(c.text_embedding)}, expected {text_dim}", qid, iid))
            elif not _finite(c.text_embedding):
                violations.append(Violation("text_embedding not finite", qid, iid))

            if c.visual_embedding is not None:
                if len(c.visual_embedding) != visual_dim:
                    violations.append(Violation(
                        f"visual_embedding has dimension {len(c.visual_embedding)}, expected {visual_dim}",
                        qid, iid))
                elif not _finite(c.visual_embedding):
                    violations.append(Violation("visual_embedding not finite", qid, iid))

    return violations


def split_queries(dataset: Dataset, fractions: Sequence[float] = (0.70, 0.15, 0.15),
                  seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """Query-level train/validation/test split.

    Queries are shuffled with a seeded generator; each part keeps the original
    query order. With three or more queries every part gets at least one.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ArgumentError(f"split fractions must be three positive numbers, got {list(fractions)}")
    total = float(sum(fractions))
    n = len(dataset.queries)

    order = np.random.default_rng([seed, 7]).permutation(n)
    n_train = int(round(n * fractions[0] / total))
    n_val = int(round(n * fractions[1] / total))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)

    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(
        dataset.with_queries([dataset.queries[i] for i in sorted(part)]) for part in parts
    )
