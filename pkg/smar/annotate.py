"""
Budget-aware annotation for SMAR
Strategies that decide which candidates get a grade from the label oracle and
which are left to upstream-score supervision, plus iso-label anchor search
across two modality queues and the pair/point sets built from the result.
"""

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datagen import LabelOracle
from .errors import ArgumentError, ParseError
from .logger import annotation_log
from .models import Candidate, Dataset, Query

TIE = "tie"
VIRTUAL_TIE = "virtual_tie"
SINGLE = "single"

STRATEGIES = ("top-p", "band", "random", "anchors", "query", "full", "none")

_EPS = 1e-9


def _ceil(x: float) -> int:
    # 0.1 * 30 must give 3, not 4
    return int(math.ceil(x - _EPS))


def _floor(x: float) -> int:
    return int(math.floor(x + _EPS))


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanEntry:
    query_id: str
    item_id: str
    grade: Optional[int] = None
    anchor: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.grade is not None


@dataclass(frozen=True)
class AnnotationPlan:
    """Which items were graded by the oracle and which rely on upstream scores"""

    entries: Tuple[PlanEntry, ...] = ()
    oracle_calls: int = 0

    @cached_property
    def labeled(self) -> Dict[Tuple[str, str], int]:
        return {(e.query_id, e.item_id): e.grade for e in self.entries if e.labeled}

    @cached_property
    def unlabeled(self) -> Tuple[Tuple[str, str], ...]:
        return tuple((e.query_id, e.item_id) for e in self.entries if not e.labeled)

    @cached_property
    def anchors(self) -> Dict[Tuple[str, str], str]:
        return {(e.query_id, e.item_id): e.anchor for e in self.entries if e.anchor is not None}

    @property
    def labeled_fraction(self) -> float:
        total = len(self.entries)
        return len(self.labeled) / total if total else 0.0

    def grade(self, query_id: str, item_id: str) -> Optional[int]:
        return self.labeled.get((query_id, item_id))

    def query_ids(self) -> List[str]:
        seen = {}
        for e in self.entries:
            seen.setdefault(e.query_id, None)
        return list(seen)

    def covers(self, dataset: Dataset) -> bool:
        keys = {(e.query_id, e.item_id) for e in self.entries}
        return all((q.query_id, c.item_id) in keys for q in dataset.queries for c in q.candidates)

    @classmethod
    def merge(cls, fragments: Iterable["AnnotationPlan"]) -> "AnnotationPlan":
        entries: List[PlanEntry] = []
        seen = set()
        calls = 0
        for fragment in fragments:
            calls += fragment.oracle_calls
            for e in fragment.entries:
                key = (e.query_id, e.item_id)
                if key in seen:
                    raise ArgumentError(f"item {e.query_id}/{e.item_id} appears in more than one fragment")
                seen.add(key)
                entries.append(e)
        return cls(entries=tuple(entries), oracle_calls=calls)


def _label_positions(queue: Sequence[Candidate], positions: Iterable[int], oracle: LabelOracle,
                     query_id: str) -> AnnotationPlan:
    chosen = set(positions)
    entries = []
    for pos, c in enumerate(queue):
        grade = oracle.label(query_id, c.item_id) if pos in chosen else None
        entries.append(PlanEntry(query_id, c.item_id, grade))
    return AnnotationPlan(entries=tuple(entries), oracle_calls=len(chosen))


def select_top_p(queue: Sequence[Candidate], p: float, oracle: LabelOracle, query_id: str) -> AnnotationPlan:
    """Label the top ceil(p * n) items of an upstream-ranked queue"""
    if not (0.0 < p <= 1.0):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    n = len(queue)
    return _label_positions(queue, range(min(n, _ceil(p * n))), oracle, query_id)


def percentile_band(queue: Sequence[Candidate], lo: float, hi: float, oracle: LabelOracle,
                    query_id: str) -> AnnotationPlan:
    """Label rank positions [floor(lo * n), ceil(hi * n))"""
    if not (0.0 <= lo < hi <= 1.0):
        raise ArgumentError(f"band needs 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    n = len(queue)
    return _label_positions(queue, range(_floor(lo * n), min(n, _ceil(hi * n))), oracle, query_id)


def random_sample(queue: Sequence[Candidate], p: float, rng: np.random.Generator, oracle: LabelOracle,
                  query_id: str) -> AnnotationPlan:
    """Label ceil(p * n) items drawn uniformly without replacement"""
    if not (0.0 < p <= 1.0):
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    n = len(queue)
    if n == 0:
        return AnnotationPlan()
    picked = rng.choice(n, size=min(n, _ceil(p * n)), replace=False)
    return _label_positions(queue, (int(i) for i in picked), oracle, query_id)


def select_queries(query_ids: Sequence[str], fraction: float, seed: int = 0) -> List[str]:
    """Query-level budget: a seeded sample of ceil(fraction * n) query ids, original order kept"""
    if not (0.0 < fraction <= 1.0):
        raise ArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(query_ids)
    if n == 0:
        return []
    picked = np.random.default_rng([seed, 11]).choice(n, size=min(n, _ceil(fraction * n)), replace=False)
    keep = set(int(i) for i in picked)
    return [qid for i, qid in enumerate(query_ids) if i in keep]


# ---------------------------------------------------------------------------
# Iso-label anchors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignedItem:
    item_id: str
    queue: int
    modality: int
    upstream_score: float
    grade: Optional[int] = None


@dataclass(frozen=True)
class Segment:
    kind: str
    items: Tuple[AlignedItem, ...]
    # virtual ties: the Q2 neighbours with strictly higher and strictly lower grades
    bracket: Optional[Tuple[AlignedItem, AlignedItem]] = None


@dataclass(frozen=True)
class AlignedSequence:
    query_id: str
    segments: Tuple[Segment, ...]
    rounds: int
    oracle_calls: int
    probes: Tuple[int, ...] = ()

    def items(self) -> List[AlignedItem]:
        return [item for seg in self.segments for item in seg.items]

    def kinds(self) -> List[str]:
        return [seg.kind for seg in self.segments]

    def to_plan(self) -> AnnotationPlan:
        anchors = {}
        for seg in self.segments:
            if seg.kind == TIE:
                for item in seg.items:
                    anchors[item.item_id] = TIE
            elif seg.kind == VIRTUAL_TIE:
                anchors[seg.items[0].item_id] = VIRTUAL_TIE
        entries = tuple(
            PlanEntry(self.query_id, item.item_id, item.grade, anchors.get(item.item_id))
            for item in self.items()
        )
        return AnnotationPlan(entries=entries, oracle_calls=self.oracle_calls)


def _is_non_increasing(probed: Dict[int, int]) -> bool:
    grades = [probed[i] for i in sorted(probed)]
    return all(b <= a for a, b in zip(grades, grades[1:]))


def iso_label_anchor_search(q1: Sequence[Candidate], q2: Sequence[Candidate], t_rounds: Optional[int],
                            oracle: LabelOracle, query_id: str) -> AlignedSequence:
    """Align two upstream-ranked queues on equal-grade anchors.

    Each Q1 item is binary-searched in the rest of Q2 (grades assumed
    non-increasing along Q2). An equal grade gives a tie; a strictly higher
    and a strictly lower neighbour give a virtual tie; otherwise the item is
    placed before or after the whole remainder. Anchoring stops after
    `t_rounds` ties/virtual ties (None means unbounded). When probes show Q2
    is not monotone the probed window is scanned linearly for an equal grade.
    """
    graded: Dict[str, int] = {}
    probe_counts: List[int] = []

    def grade_of(c: Candidate) -> int:
        if c.item_id not in graded:
            graded[c.item_id] = oracle.label(query_id, c.item_id)
        return graded[c.item_id]

    def item(c: Candidate, queue: int) -> AlignedItem:
        return AlignedItem(c.item_id, queue, c.modality, c.upstream_score, graded.get(c.item_id))

    def single(cands: Sequence[Candidate], queue: int) -> Optional[Segment]:
        if not cands:
            return None
        return Segment(SINGLE, tuple(item(c, queue) for c in cands))

    pending: List[Tuple[str, tuple]] = []
    i, j, rounds = 0, 0, 0
    n1, n2 = len(q1), len(q2)

    while i < n1 and j < n2:
        if t_rounds is not None and rounds >= t_rounds:
            break
        a = q1[i]
        target = grade_of(a)
        before = len(graded)

        probed: Dict[int, int] = {}
        lo, hi, found = j, n2, None
        while lo < hi:
            mid = (lo + hi) // 2
            g = grade_of(q2[mid])
            probed[mid] = g
            if g == target:
                found = mid
                break
            if g > target:
                lo = mid + 1
            else:
                hi = mid

        if found is None and not _is_non_increasing(probed):
            for k in range(min(probed), max(probed) + 1):
                if grade_of(q2[k]) == target:
                    found = k
                    break
        probe_counts.append(len(graded) - before)

        if found is not None:
            pending.append(("single", (q2[j:found], 2)))
            pending.append(("tie", (a, q2[found])))
            j = found + 1
            rounds += 1
        elif j < lo < n2:
            pending.append(("single", (q2[j:lo], 2)))
            pending.append(("virtual_tie", (a, q2[lo - 1], q2[lo])))
            j = lo
            rounds += 1
        elif lo == j:
            # every remaining Q2 grade is below a
            pending.append(("single", ([a], 1)))
            pending.append(("single", (q2[j:], 2)))
            j = n2
        else:
            pending.append(("single", (q2[j:], 2)))
            pending.append(("single", ([a], 1)))
            j = n2
        i += 1

    pending.append(("single", (q1[i:], 1)))
    pending.append(("single", (q2[j:], 2)))

    # grades are final only now, so segments are materialized last
    segments: List[Segment] = []
    for kind, payload in pending:
        if kind == "single":
            seg = single(*payload)
            if seg is not None:
                segments.append(seg)
        elif kind == "tie":
            a, b = payload
            segments.append(Segment(TIE, (item(a, 1), item(b, 2))))
        else:
            a, upper, lower = payload
            segments.append(Segment(VIRTUAL_TIE, (item(a, 1),), bracket=(item(upper, 2), item(lower, 2))))

    return AlignedSequence(
        query_id=query_id,
        segments=tuple(segments),
        rounds=rounds,
        oracle_calls=len(graded),
        probes=tuple(probe_counts),
    )


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pair:
    winner: str
    loser: str
    source: str
    modality: Optional[int] = None


@dataclass(frozen=True)
class Point:
    item_id: str
    grade: int


def _pairs_over(items: Sequence[AlignedItem], virtual: Iterable[str],
                virtual_tie_pointwise: bool = False) -> Tuple[List[Pair], List[Point]]:
    virtual = set(virtual)
    pairs: List[Pair] = []
    for x_pos, x in enumerate(items):
        for y in items[x_pos + 1:]:
            if x.grade is not None and y.grade is not None:
                if x.grade == y.grade:
                    continue
                win, lose = (x, y) if x.grade > y.grade else (y, x)
                modality = x.modality if x.modality == y.modality else None
                pairs.append(Pair(win.item_id, lose.item_id, "label", modality))
            elif x.modality == y.modality and x.upstream_score != y.upstream_score:
                win, lose = (x, y) if x.upstream_score > y.upstream_score else (y, x)
                pairs.append(Pair(win.item_id, lose.item_id, "upstream", x.modality))
    points = [
        Point(it.item_id, it.grade) for it in items
        if it.grade is not None and (virtual_tie_pointwise or it.item_id not in virtual)
    ]
    return pairs, points


def build_pairs(aligned: AlignedSequence, upstream: Optional[Dict[str, float]] = None,
                virtual_tie_pointwise: bool = False) -> Tuple[List[Pair], List[Point]]:
    """Pairwise preferences and pointwise targets from an aligned sequence.

    Labeled pairs prefer the higher grade, within or across queues; pairs with
    an unlabeled side prefer the higher upstream score and exist only inside
    one queue. Virtual-tie items order their neighbours but are not pointwise
    targets unless `virtual_tie_pointwise` is set.
    """
    items = aligned.items()
    if upstream is not None:
        items = [AlignedItem(it.item_id, it.queue, it.modality, upstream.get(it.item_id, it.upstream_score),
                             it.grade) for it in items]
    virtual = [seg.items[0].item_id for seg in aligned.segments if seg.kind == VIRTUAL_TIE]
    return _pairs_over(items, virtual, virtual_tie_pointwise)


def query_pairs(query: Query, plan: AnnotationPlan,
                virtual_tie_pointwise: bool = False) -> Tuple[List[Pair], List[Point]]:
    """Same rules as build_pairs over every candidate of a query, labels taken from a plan"""
    items = [
        AlignedItem(c.item_id, c.modality, c.modality, c.upstream_score, plan.grade(query.query_id, c.item_id))
        for c in query.candidates
    ]
    virtual = [iid for (qid, iid), kind in plan.anchors.items() if qid == query.query_id and kind == VIRTUAL_TIE]
    return _pairs_over(items, virtual, virtual_tie_pointwise)


# ---------------------------------------------------------------------------
# Whole-dataset annotation
# ---------------------------------------------------------------------------

def default_anchor_modalities(dataset: Dataset) -> Tuple[str, str]:
    """(Q1, Q2) when none are named: video then natural if both exist, else modality 2 then modality 1"""
    names = {m.name for m in dataset.modalities}
    if {"video", "natural"} <= names:
        return "video", "natural"
    by_id = {m.id: m.name for m in dataset.modalities}
    if 1 not in by_id or 2 not in by_id:
        raise ArgumentError(f"anchors need two modalities; dataset has {sorted(names)}")
    return by_id[2], by_id[1]


def annotate_dataset(dataset: Dataset, strategy: str, oracle: LabelOracle, p: Optional[float] = None,
                     lo: Optional[float] = None, hi: Optional[float] = None,
                     t_rounds: Optional[int] = None, seed: int = 0,
                     anchor_modalities: Optional[Tuple[str, str]] = None,
                     query_ids: Optional[Sequence[str]] = None) -> AnnotationPlan:
    """Apply one strategy to every query of a dataset and merge the fragments.

    Item-level strategies run on each modality queue. `query` labels every
    candidate of `query_ids` (or a ceil(p * n) sample of queries). `anchors`
    aligns the two `anchor_modalities` queues; other queues stay unlabeled.
    """
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown strategy '{strategy}'; expected one of {list(STRATEGIES)}")
    if strategy in ("top-p", "random") and p is None:
        raise ArgumentError(f"strategy '{strategy}' needs p")
    if strategy == "band" and (lo is None or hi is None):
        raise ArgumentError("strategy 'band' needs lo and hi")

    chosen = None
    if strategy == "query":
        if query_ids is not None:
            chosen = set(query_ids)
        elif p is not None:
            chosen = set(select_queries([q.query_id for q in dataset.queries], p, seed))
        else:
            raise ArgumentError("strategy 'query' needs query_ids or p")

    q1_id = q2_id = None
    if strategy == "anchors":
        names = anchor_modalities or default_anchor_modalities(dataset)
        q1_id, q2_id = dataset.modality_id(names[0]), dataset.modality_id(names[1])
        if q1_id == q2_id:
            raise ArgumentError("anchor modalities must differ")

    rng = np.random.default_rng([seed, 13])
    fragments: List[AnnotationPlan] = []
    for query in dataset.queries:
        qid = query.query_id
        if strategy == "anchors":
            fragments.append(iso_label_anchor_search(query.queue(q1_id), query.queue(q2_id), t_rounds,
                                                     oracle, qid).to_plan())
            others = [c for m in query.modality_ids if m not in (q1_id, q2_id) for c in query.queue(m)]
            fragments.append(_label_positions(others, (), oracle, qid))
            continue
        for m in query.modality_ids:
            queue = query.queue(m)
            if strategy == "top-p":
                fragments.append(select_top_p(queue, p, oracle, qid))
            elif strategy == "band":
                fragments.append(percentile_band(queue, lo, hi, oracle, qid))
            elif strategy == "random":
                fragments.append(random_sample(queue, p, rng, oracle, qid))
            elif strategy == "full" or (strategy == "query" and qid in chosen):
                fragments.append(_label_positions(queue, range(len(queue)), oracle, qid))
            else:
                fragments.append(_label_positions(queue, (), oracle, qid))

    plan = AnnotationPlan.merge(fragments)
    annotation_log.log_plan(strategy, len(plan.labeled), len(plan.unlabeled), plan.oracle_calls)
    return plan


# ---------------------------------------------------------------------------
# Plan JSONL
# ---------------------------------------------------------------------------

def write_plan(plan: AnnotationPlan, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in plan.entries:
            record = {
                "query_id": e.query_id,
                "item_id": e.item_id,
                "status": "labeled" if e.labeled else "unlabeled",
                "grade": e.grade,
            }
            if e.anchor is not None:
                record["anchor"] = e.anchor
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
        summary = {
            "summary": True,
            "oracle_calls": plan.oracle_calls,
            "labeled_fraction": plan.labeled_fraction,
            "n_labeled": len(plan.labeled),
            "n_unlabeled": len(plan.unlabeled),
        }
        f.write(json.dumps(summary) + "\n")
    return path


def read_plan(path: Union[str, Path]) -> AnnotationPlan:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"file not found: {path}")
    entries: List[PlanEntry] = []
    oracle_calls = None
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
            if record.get("summary"):
                oracle_calls = record.get("oracle_calls")
                if not isinstance(oracle_calls, int):
                    raise ParseError("summary line needs an integer oracle_calls", line_no)
                continue
            for key in ("query_id", "item_id", "status"):
                if not isinstance(record.get(key), str):
                    raise ParseError(f"missing field \"{key}\"", line_no)
            status, grade = record["status"], record.get("grade")
            if status == "labeled":
                if isinstance(grade, bool) or not isinstance(grade, int):
                    raise ParseError("labeled entry needs an integer grade", line_no)
            elif status == "unlabeled":
                grade = None
            else:
                raise ParseError(f"unknown status '{status}'", line_no)
            anchor = record.get("anchor")
            if anchor not in (None, TIE, VIRTUAL_TIE):
                raise ParseError(f"unknown anchor '{anchor}'", line_no)
            entries.append(PlanEntry(record["query_id"], record["item_id"], grade, anchor))
    if oracle_calls is None:
        oracle_calls = sum(1 for e in entries if e.labeled)
    return AnnotationPlan(entries=tuple(entries), oracle_calls=oracle_calls)
