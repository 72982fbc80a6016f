"""
Tests for annotation strategies, iso-label anchor search and pair construction
"""

import math

import numpy as np
import pytest

from smar.annotate import (
    SINGLE,
    TIE,
    VIRTUAL_TIE,
    AnnotationPlan,
    PlanEntry,
    annotate_dataset,
    build_pairs,
    default_anchor_modalities,
    iso_label_anchor_search,
    percentile_band,
    query_pairs,
    random_sample,
    read_plan,
    select_queries,
    select_top_p,
    write_plan,
)
from smar.datagen import LabelOracle
from smar.errors import ArgumentError, OracleLookupError, ParseError
from builders import graded_queue, make_candidate, make_dataset, make_query


def oracle_for(query_id, *queues):
    return LabelOracle({(query_id, c.item_id): c.label for queue in queues for c in queue})


def labeled_positions(plan):
    return [i for i, e in enumerate(plan.entries) if e.labeled]


class TestItemLevelStrategies:

    def test_top_p_uses_ceiling(self):
        queue = graded_queue([4, 3, 3, 2, 2, 1, 1, 0, 0, 0])
        oracle = oracle_for("q", queue)
        plan = select_top_p(queue, 0.3, oracle, "q")
        assert labeled_positions(plan) == [0, 1, 2]
        assert len(plan.unlabeled) == 7
        assert plan.oracle_calls == 3 == oracle.query_count

        small = graded_queue([4, 3, 2, 1, 0])
        assert len(select_top_p(small, 0.1, oracle_for("q", small), "q").labeled) == 1

    def test_top_p_rejects_zero(self):
        queue = graded_queue([1])
        with pytest.raises(ArgumentError):
            select_top_p(queue, 0.0, oracle_for("q", queue), "q")

    def test_band_bounds(self):
        queue = graded_queue([4, 4, 3, 3, 2, 2, 1, 1, 0, 0])
        oracle = oracle_for("q", queue)
        assert labeled_positions(percentile_band(queue, 0.3, 0.6, oracle, "q")) == [3, 4, 5]
        assert labeled_positions(percentile_band(queue, 0.0, 1.0, oracle.fresh(), "q")) == list(range(10))
        with pytest.raises(ArgumentError):
            percentile_band(queue, 0.6, 0.6, oracle, "q")

    def test_band_rounds_outward(self):
        queue = graded_queue([4, 3, 2, 1, 0])
        plan = percentile_band(queue, 0.3, 0.5, oracle_for("q", queue), "q")
        assert labeled_positions(plan) == [1, 2]

    def test_random_sample_is_seeded(self):
        queue = graded_queue([4, 3, 3, 2, 2, 1, 1, 0, 0, 0])
        oracle = oracle_for("q", queue)
        first = random_sample(queue, 0.4, np.random.default_rng(7), oracle, "q")
        second = random_sample(queue, 0.4, np.random.default_rng(7), oracle.fresh(), "q")
        assert len(first.labeled) == 4
        assert first == second

    def test_missing_oracle_grade_propagates(self):
        queue = graded_queue([2, 1])
        with pytest.raises(OracleLookupError):
            select_top_p(queue, 1.0, LabelOracle({}), "q")

    def test_query_selection(self):
        ids = [f"q{i}" for i in range(10)]
        picked = select_queries(ids, 0.35, seed=2)
        assert len(picked) == 4
        assert picked == [q for q in ids if q in picked]
        assert select_queries(ids, 0.35, seed=2) == picked


class TestAnchorSearch:

    def trace_queues(self):
        q1 = graded_queue([4, 2], modality=2, prefix="v")
        q2 = graded_queue([4, 3, 1], modality=1, prefix="n")
        return q1, q2

    def test_fixed_trace(self):
        q1, q2 = self.trace_queues()
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        assert aligned.kinds() == [TIE, SINGLE, VIRTUAL_TIE, SINGLE]
        tie, run, virtual, tail = aligned.segments
        assert [it.item_id for it in tie.items] == ["v00", "n00"]
        assert [it.item_id for it in run.items] == ["n01"]
        assert virtual.items[0].item_id == "v01"
        assert [b.grade for b in virtual.bracket] == [3, 1]
        assert [it.item_id for it in tail.items] == ["n02"]
        assert aligned.rounds == 2
        assert aligned.oracle_calls == 5

    def test_zero_rounds_labels_nothing(self):
        q1, q2 = self.trace_queues()
        oracle = oracle_for("q", q1, q2)
        aligned = iso_label_anchor_search(q1, q2, 0, oracle, "q")
        assert aligned.kinds() == [SINGLE, SINGLE]
        assert aligned.oracle_calls == 0 == oracle.query_count
        assert all(it.grade is None for it in aligned.items())

    def test_one_round_leaves_rest_single(self):
        q1, q2 = self.trace_queues()
        aligned = iso_label_anchor_search(q1, q2, 1, oracle_for("q", q1, q2), "q")
        assert aligned.kinds() == [TIE, SINGLE, SINGLE]
        assert [it.item_id for it in aligned.segments[1].items] == ["v01"]

    def test_all_remaining_lower_puts_item_first(self):
        q1 = graded_queue([4], modality=2, prefix="v")
        q2 = graded_queue([2, 1], modality=1, prefix="n")
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        assert [[it.item_id for it in s.items] for s in aligned.segments] == [["v00"], ["n00", "n01"]]
        assert aligned.rounds == 0

    def test_all_remaining_higher_puts_item_last(self):
        q1 = graded_queue([0], modality=2, prefix="v")
        q2 = graded_queue([3, 2], modality=1, prefix="n")
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        assert [[it.item_id for it in s.items] for s in aligned.segments] == [["n00", "n01"], ["v00"]]

    def test_identical_queues_anchor_fully(self):
        q1 = graded_queue([4, 3, 2, 1, 0], modality=2, prefix="v")
        q2 = graded_queue([4, 3, 2, 1, 0], modality=1, prefix="n")
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        assert aligned.kinds() == [TIE] * 5
        assert aligned.to_plan().labeled_fraction == 1.0

    def test_empty_queue(self):
        q2 = graded_queue([3, 1], modality=1, prefix="n")
        aligned = iso_label_anchor_search([], q2, None, oracle_for("q", q2), "q")
        assert aligned.kinds() == [SINGLE]
        assert aligned.oracle_calls == 0

    def test_non_monotone_queue_falls_back_to_scan(self):
        q1 = graded_queue([2], modality=2, prefix="v")
        q2 = graded_queue([0, 0, 3, 2, 4], modality=1, prefix="n")
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        assert TIE in aligned.kinds()
        tie = aligned.segments[aligned.kinds().index(TIE)]
        assert tie.items[0].grade == tie.items[1].grade == 2

    def test_random_queues_are_sound_and_monotone_in_budget(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            g1 = sorted(rng.integers(0, 5, size=int(rng.integers(1, 7))).tolist(), reverse=True)
            g2 = sorted(rng.integers(0, 5, size=int(rng.integers(1, 9))).tolist(), reverse=True)
            q1 = graded_queue(g1, modality=2, prefix="v")
            q2 = graded_queue(g2, modality=1, prefix="n")
            oracle = oracle_for("q", q1, q2)

            calls, fractions = [], []
            for t in [0, 1, 2, 3, 4, 5, 6, None]:
                aligned = iso_label_anchor_search(q1, q2, t, oracle.fresh(), "q")
                calls.append(aligned.oracle_calls)
                fractions.append(aligned.to_plan().labeled_fraction)

                for seg in aligned.segments:
                    if seg.kind == TIE:
                        assert seg.items[0].grade == seg.items[1].grade
                    elif seg.kind == VIRTUAL_TIE:
                        upper, lower = seg.bracket
                        assert upper.grade > seg.items[0].grade > lower.grade
                for n_probes in aligned.probes:
                    # the Q1 item's own grade is one of the new calls
                    assert n_probes - 1 <= math.ceil(math.log2(len(q2))) + 1

                ids = [it.item_id for it in aligned.items()]
                assert [i for i in ids if i.startswith("v")] == [c.item_id for c in q1]
                assert [i for i in ids if i.startswith("n")] == [c.item_id for c in q2]

            assert calls == sorted(calls), f"trial {trial}"
            assert fractions == sorted(fractions), f"trial {trial}"


class TestPairs:

    def test_pairs_and_points_from_trace(self):
        q1 = graded_queue([4, 2], modality=2, prefix="v")
        q2 = graded_queue([4, 3, 1], modality=1, prefix="n")
        aligned = iso_label_anchor_search(q1, q2, None, oracle_for("q", q1, q2), "q")
        pairs, points = build_pairs(aligned)
        assert len(pairs) == 9
        assert all(p.source == "label" for p in pairs)
        assert ("v00", "n00") not in {(p.winner, p.loser) for p in pairs}
        assert sorted(p.item_id for p in points) == ["n00", "n01", "n02", "v00"]

        _, with_virtual = build_pairs(aligned, virtual_tie_pointwise=True)
        assert "v01" in {p.item_id for p in with_virtual}

    def test_unlabeled_pairs_stay_inside_one_queue(self):
        query = make_query("q", [
            make_candidate("a", 1, 0.9),
            make_candidate("b", 1, 0.4),
            make_candidate("c", 2, 0.7),
            make_candidate("d", 2, 0.2, label=3),
            make_candidate("e", 1, 0.1, label=1),
        ])
        plan = AnnotationPlan(entries=tuple(
            PlanEntry("q", c.item_id, c.label) for c in query.candidates
        ))
        pairs, points = query_pairs(query, plan)
        found = {(p.winner, p.loser, p.source) for p in pairs}
        assert ("a", "b", "upstream") in found
        assert ("c", "d", "upstream") in found
        assert ("d", "e", "label") in found
        assert not any({p.winner, p.loser} == {"a", "c"} for p in pairs)
        assert sorted((p.item_id, p.grade) for p in points) == [("d", 3), ("e", 1)]

    def test_cross_queue_label_pair_has_no_modality(self):
        query = make_query("q", [make_candidate("a", 1, 0.5, label=4), make_candidate("b", 2, 0.5, label=0)])
        plan = AnnotationPlan(entries=(PlanEntry("q", "a", 4), PlanEntry("q", "b", 0)))
        pairs, _ = query_pairs(query, plan)
        assert pairs[0].winner == "a" and pairs[0].modality is None


class TestDatasetPlans:

    def dataset(self):
        queries = []
        for qi in range(3):
            natural = graded_queue([4, 3, 2, 1], modality=1, prefix=f"q{qi}n")
            video = graded_queue([3, 2, 0], modality=2, prefix=f"q{qi}v")
            queries.append(make_query(f"q{qi}", natural + video))
        return make_dataset(queries)

    def test_top_p_over_every_queue(self):
        dataset = self.dataset()
        oracle = LabelOracle.from_dataset(dataset)
        plan = annotate_dataset(dataset, "top-p", oracle, p=0.5)
        assert plan.covers(dataset)
        assert len(plan.labeled) == 3 * (2 + 2)
        assert plan.oracle_calls == oracle.query_count

    def test_full_and_none(self):
        dataset = self.dataset()
        oracle = LabelOracle.from_dataset(dataset)
        assert annotate_dataset(dataset, "full", oracle).labeled_fraction == 1.0
        assert annotate_dataset(dataset, "none", oracle.fresh()).oracle_calls == 0

    def test_query_budget_labels_whole_queries(self):
        dataset = self.dataset()
        plan = annotate_dataset(dataset, "query", LabelOracle.from_dataset(dataset), query_ids=["q1"])
        assert {qid for qid, _ in plan.labeled} == {"q1"}
        assert len(plan.labeled) == 7

    def test_anchor_strategy_uses_video_then_natural(self):
        dataset = self.dataset()
        plan = annotate_dataset(dataset, "anchors", LabelOracle.from_dataset(dataset), t_rounds=None)
        assert plan.covers(dataset)
        assert TIE in plan.anchors.values()

    def test_anchor_default_without_video_and_natural(self):
        queries = []
        for qi in range(2):
            first = graded_queue([4, 2, 1], modality=1, prefix=f"q{qi}a")
            second = graded_queue([3, 1], modality=2, prefix=f"q{qi}b")
            third = graded_queue([2, 0], modality=3, prefix=f"q{qi}c")
            queries.append(make_query(f"q{qi}", first + second + third))
        dataset = make_dataset(queries, names=("m1", "m2", "m3"))
        assert default_anchor_modalities(dataset) == ("m2", "m1")
        assert default_anchor_modalities(self.dataset()) == ("video", "natural")

        plan = annotate_dataset(dataset, "anchors", LabelOracle.from_dataset(dataset), t_rounds=None)
        assert plan.covers(dataset)
        assert not any(iid.startswith(("q0c", "q1c")) for _, iid in plan.labeled)

    def test_anchors_need_two_modalities(self):
        dataset = make_dataset([make_query("q", graded_queue([3, 1]))], names=("solo",))
        with pytest.raises(ArgumentError):
            annotate_dataset(dataset, "anchors", LabelOracle.from_dataset(dataset))

    def test_missing_parameters(self):
        dataset = self.dataset()
        oracle = LabelOracle.from_dataset(dataset)
        with pytest.raises(ArgumentError):
            annotate_dataset(dataset, "top-p", oracle)
        with pytest.raises(ArgumentError):
            annotate_dataset(dataset, "band", oracle, lo=0.1)
        with pytest.raises(ArgumentError):
            annotate_dataset(dataset, "nearest", oracle)

    def test_plan_file_round_trip(self, tmp_path):
        dataset = self.dataset()
        plan = annotate_dataset(dataset, "anchors", LabelOracle.from_dataset(dataset), t_rounds=2)
        assert read_plan(write_plan(plan, tmp_path / "plan.jsonl")) == plan

    def test_bad_plan_file(self, tmp_path):
        path = tmp_path / "plan.jsonl"
        path.write_text('{"query_id": "q", "item_id": "a", "status": "labeled", "grade": null}\n', encoding="utf-8")
        with pytest.raises(ParseError):
            read_plan(path)

    def test_merge_rejects_overlap(self):
        fragment = AnnotationPlan(entries=(PlanEntry("q", "a", 1),), oracle_calls=1)
        with pytest.raises(ArgumentError):
            AnnotationPlan.merge([fragment, fragment])
