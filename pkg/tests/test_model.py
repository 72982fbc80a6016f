"""
Tests for the reranker: encoders, fusion, cross-attention, gradients and checkpoints
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import block_diag

import smar.model as model_module
from smar.annotate import annotate_dataset
from smar.config import LossConfig, SynthConfig
from smar.datagen import generate_dataset
from smar.errors import NumericError, ParseError, ShapeError
from smar.model import (
    RerankerModel,
    TrainingBatch,
    bucketize_features,
    cross_attention,
    fit_bucket_boundaries,
    forward,
    grad_check,
    hybrid_fusion,
    load_checkpoint,
    save_checkpoint,
    score_page,
)
from smar.metrics import judge, ndcg
from smar.models import split_queries
from smar.trainer import build_supervision, train
from builders import clear_of_kinks, make_candidate, make_dataset, make_query


@pytest.fixture
def setup(small_data, tiny_model_config):
    dataset, oracle = small_data
    model = RerankerModel.initialize(tiny_model_config, dataset)
    return dataset, oracle, model


def training_batch(dataset, oracle, loss_config, n=3):
    plan = annotate_dataset(dataset, "top-p", oracle, p=0.5)
    supervision = build_supervision(dataset, plan, loss_config)
    idx = list(range(n))
    return TrainingBatch(tuple(dataset.queries[i] for i in idx), supervision.subset(idx))


class TestBucketize:

    def test_middle_bucket(self):
        np.testing.assert_array_equal(bucketize_features([0.5], [[0.3, 0.7]]), [0, 1, 0])

    def test_boundary_goes_to_upper_bucket(self):
        np.testing.assert_array_equal(bucketize_features([0.3], [[0.3, 0.7]]), [0, 1, 0])
        np.testing.assert_array_equal(bucketize_features([0.7], [[0.3, 0.7]]), [0, 0, 1])

    def test_concatenation(self):
        bits = bucketize_features([0.1, 5.0], [[0.5], [1.0, 2.0]])
        np.testing.assert_array_equal(bits, [1, 0, 0, 0, 1])

    def test_errors(self):
        with pytest.raises(NumericError):
            bucketize_features([float("nan")], [[0.3]])
        with pytest.raises(ShapeError):
            bucketize_features([0.1, 0.2], [[0.3]])

    def test_fitted_boundaries(self):
        values = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
        cuts = fit_bucket_boundaries(values, 2)
        assert cuts[0] == [4.5]
        assert cuts[1] == []


class TestFusion:

    def setup_method(self):
        rng = np.random.default_rng(3)
        self.visual = rng.uniform(-1, 1, size=4)
        self.text = rng.uniform(-1, 1, size=4)

    def test_zero_gate_averages(self):
        fused = hybrid_fusion(self.visual, self.text, np.zeros((8, 4)), np.zeros(4))
        np.testing.assert_allclose(fused, 0.5 * (self.visual + self.text))

    def test_saturated_gate_picks_visual(self):
        fused = hybrid_fusion(self.visual, self.text, np.zeros((8, 4)), np.full(4, 10.0))
        assert np.max(np.abs(fused - self.visual)) < 1e-4

    def test_equal_inputs_pass_through(self):
        rng = np.random.default_rng(4)
        fused = hybrid_fusion(self.text, self.text, rng.normal(size=(8, 4)), rng.normal(size=4))
        np.testing.assert_allclose(fused, self.text)

    def test_output_lies_between_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            fused = hybrid_fusion(self.visual, self.text, rng.normal(size=(8, 4)) * 3, rng.normal(size=4))
            low = np.minimum(self.visual, self.text)
            high = np.maximum(self.visual, self.text)
            assert np.all(fused >= low - 1e-12) and np.all(fused <= high + 1e-12)

    def test_missing_visual_keeps_text(self):
        np.testing.assert_array_equal(hybrid_fusion(None, self.text, np.zeros((8, 4)), np.zeros(4)), self.text)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hybrid_fusion(self.visual[:3], self.text, np.zeros((8, 4)), np.zeros(4))


def naive_attention(a, tokens, query_index, wq, wk, wv, wo, n_heads):
    n, d = a.shape
    dh = d // n_heads
    out = np.zeros((n, d))
    for i in range(n):
        user = tokens[query_index[i]]
        heads = []
        for h in range(n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            q = a[i] @ wq[:, cols]
            k = user @ wk[:, cols]
            v = user @ wv[:, cols]
            logits = k @ q / math.sqrt(dh)
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            heads.append(weights @ v)
        out[i] = np.concatenate(heads) @ wo
    return out


class TestCrossAttention:

    def weights(self, rng, d):
        return [rng.normal(size=(d, d)) / math.sqrt(d) for _ in range(4)]

    def test_matches_per_head_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 8))
        tokens = rng.normal(size=(2, 3, 8))
        query_index = np.array([0, 0, 1, 1, 1])
        wq, wk, wv, wo = self.weights(rng, 8)
        out, _ = cross_attention(a, tokens, query_index, wq, wk, wv, wo, 2)
        np.testing.assert_allclose(out, naive_attention(a, tokens, query_index, wq, wk, wv, wo, 2), atol=1e-12)

    def test_single_user_token_ignores_query_and_key(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 8))
        tokens = rng.normal(size=(1, 1, 8))
        query_index = np.zeros(4, dtype=int)
        wq, wk, wv, wo = self.weights(rng, 8)
        out, cache = cross_attention(a, tokens, query_index, wq, wk, wv, wo, 4)
        attn = cache[6]
        np.testing.assert_allclose(attn, 1.0)
        other, _ = cross_attention(a, tokens, query_index, wq * -3, wk + 1, wv, wo, 4)
        np.testing.assert_allclose(out, other, atol=1e-12)


class TestScoring:

    def test_permuting_candidates_permutes_scores(self, setup):
        dataset, _, model = setup
        query = dataset.queries[0]
        scores = forward(model, query)
        perm = np.random.default_rng(2).permutation(query.n_q)
        permuted = forward(model, query, [query.candidates[i] for i in perm])
        np.testing.assert_allclose(permuted, scores[perm], atol=1e-12)

    def test_identical_items_score_equally(self, setup):
        dataset, _, model = setup
        query = dataset.queries[0]
        twin = replace(query.candidates[0], item_id="twin")
        scores = forward(model, query, [query.candidates[0], twin])
        assert scores[0] == pytest.approx(scores[1], abs=1e-12)

    def test_batched_scoring_matches_single_queries(self, setup):
        dataset, _, model = setup
        batched = model.score_queries(dataset.queries[:4])
        for query, scores in zip(dataset.queries[:4], batched):
            np.testing.assert_allclose(scores, forward(model, query), atol=1e-12)

    def test_score_page_ranks_all_candidates(self, setup):
        dataset, _, model = setup
        query = dataset.queries[1]
        ranked = score_page(model, query)
        assert sorted(ranked.item_ids) == sorted(c.item_id for c in query.candidates)
        assert list(ranked.scores) == sorted(ranked.scores, reverse=True)

    def test_upstream_shift_within_buckets_keeps_scores(self, setup):
        dataset, _, fitted = setup
        cuts = np.array([0.25, 0.5, 0.75])
        model = RerankerModel(fitted.config, fitted.text_dim, fitted.visual_dim, fitted.n_modalities,
                              fitted.item_boundaries[:-1] + [cuts.tolist()], fitted.user_boundaries)
        query = dataset.queries[2]
        upstream = np.array([c.upstream_score for c in query.candidates])
        gap = np.min(np.abs(upstream[:, None] - cuts[None, :]))
        shifted = replace(query, candidates=tuple(
            replace(c, upstream_score=c.upstream_score + gap / 2) for c in query.candidates
        ))
        assert gap > 0
        np.testing.assert_array_equal(forward(model, shifted), forward(model, query))

    def test_without_attention_or_fusion(self, small_data, tiny_model_config):
        dataset, _ = small_data
        config = tiny_model_config.model_copy(update={"attention": False, "hybrid_fusion": False})
        model = RerankerModel.initialize(config, dataset)
        assert not any(".wq" in name for name in model.params)
        assert "gate_W" not in model.params
        assert len(forward(model, dataset.queries[0])) == dataset.queries[0].n_q

    def test_embedding_must_exceed_text(self, small_data, tiny_model_config):
        dataset, _ = small_data
        with pytest.raises(ShapeError):
            RerankerModel.initialize(tiny_model_config.model_copy(update={"embed_dim": 4, "n_heads": 2}), dataset)

    def test_wrong_feature_width(self, setup):
        _, _, model = setup
        odd = make_query("odd", [make_candidate("a", 1, 0.5, dims=(2, 4, 4))], user=(0.0,))
        with pytest.raises(ShapeError):
            forward(model, odd)


class TestGradients:

    @pytest.mark.parametrize("objective", ["listwise", "pairwise", "online", "anchor"])
    def test_analytic_gradients_match(self, setup, objective):
        dataset, oracle, model = setup
        loss_config = LossConfig(objective=objective)
        batch = training_batch(dataset, oracle, loss_config)
        assert grad_check(model, batch, loss_config, step=1e-5) < 1e-4

    def test_corrupted_fusion_gradient_is_caught(self, setup, monkeypatch):
        dataset, oracle, model = setup
        loss_config = LossConfig()
        batch = training_batch(dataset, oracle, loss_config)
        original = model_module.hybrid_fusion_backward

        def doubled(*args, **kwargs):
            d_w, d_b = original(*args, **kwargs)
            return 2.0 * d_w, 2.0 * d_b

        monkeypatch.setattr(model_module, "hybrid_fusion_backward", doubled)
        assert grad_check(model, batch, loss_config, tensors=["gate_W", "gate_b"]) > 0.1

    def test_head_only_check_is_exact(self, setup):
        dataset, oracle, model = setup
        loss_config = LossConfig(objective="online", online_alpha=0.0, online_beta=0.0)
        batch = training_batch(dataset, oracle, loss_config)
        assert grad_check(model, batch, loss_config, step=1e-3, tensors=["head_w", "head_b"]) < 1e-6

    def test_step_must_be_positive(self, setup):
        dataset, oracle, model = setup
        with pytest.raises(ValueError):
            grad_check(model, training_batch(dataset, oracle, LossConfig()), LossConfig(), step=0.0)


class TestCheckpoints:

    def test_round_trip(self, setup, tmp_path):
        dataset, _, model = setup
        path = save_checkpoint(model, tmp_path / "model.json")
        restored = load_checkpoint(path)
        assert restored.same_parameters(model)
        assert restored.config == model.config
        np.testing.assert_array_equal(forward(restored, dataset.queries[0]), forward(model, dataset.queries[0]))

    def test_missing_and_foreign_files(self, tmp_path):
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "absent.json")
        foreign = tmp_path / "other.json"
        foreign.write_text('{"format": "something-else"}', encoding="utf-8")
        with pytest.raises(ParseError):
            load_checkpoint(foreign)

    def test_shape_mismatch_is_rejected(self, setup):
        _, _, model = setup
        params = {name: value.copy() for name, value in model.params.items()}
        params["head_w"] = np.zeros(3)
        with pytest.raises(ShapeError):
            RerankerModel(model.config, model.text_dim, model.visual_dim, model.n_modalities,
                          model.item_boundaries, model.user_boundaries, params)


def test_hand_built_dataset_initializes(tiny_model_config):
    queries = [make_query(f"q{i}", [make_candidate(f"q{i}-{j}", 1 + j % 2, 0.1 * j, dims=(2, 4, 4))
                                    for j in range(4)]) for i in range(3)]
    dataset = make_dataset(queries, dims=(2, 4, 4))
    model = RerankerModel.initialize(tiny_model_config, dataset)
    assert model.n_raw_item_features == 3
    assert len(model.score_queries(dataset.queries)) == 3


def kink_free_batch(model, dataset, oracle, loss_config):
    batch = training_batch(dataset, oracle, loss_config)
    margins = (loss_config.gamma, loss_config.margin1, loss_config.margin2)
    scores = model.score_queries(batch.queries)
    if all(clear_of_kinks(s, sup, margins) for s, sup in zip(scores, batch.supervision.queries)):
        return batch
    return None


@pytest.mark.parametrize("objective", ["listwise", "pairwise", "online", "anchor"])
@pytest.mark.parametrize("attention", [True, False])
@pytest.mark.parametrize("fusion", [True, False])
@pytest.mark.parametrize("upstream_feature", [True, False])
@pytest.mark.parametrize("seed", range(4))
def test_gradients_on_random_inputs(small_synth, tiny_model_config, objective, attention, fusion,
                                    upstream_feature, seed):
    config = tiny_model_config.model_copy(update={
        "attention": attention, "hybrid_fusion": fusion, "use_upstream_feature": upstream_feature,
    })
    loss_config = LossConfig(objective=objective)
    for attempt in range(10):
        data_seed = 1000 * seed + attempt
        dataset, oracle = generate_dataset(small_synth.model_copy(update={"seed": data_seed, "n_queries": 4}))
        model = RerankerModel.initialize(config.model_copy(update={"seed": data_seed}), dataset)
        batch = kink_free_batch(model, dataset, oracle, loss_config)
        if batch is not None:
            break
    assert batch is not None
    assert grad_check(model, batch, loss_config, step=1e-5, seed=seed) < 1e-4


@pytest.mark.parametrize("n_heads", [2, 4])
def test_heads_match_single_head_blocks(n_heads):
    """Block-diagonal projections split the general path into independent one-head problems"""
    rng = np.random.default_rng(n_heads)
    d = 8
    dh = d // n_heads
    a = rng.normal(size=(5, d))
    tokens = rng.normal(size=(2, 3, d))
    query_index = np.array([0, 1, 1, 0, 1])
    blocks = [[rng.normal(size=(dh, dh)) for _ in range(n_heads)] for _ in range(4)]
    wq, wk, wv, wo = (block_diag(*bs) for bs in blocks)

    out, _ = cross_attention(a, tokens, query_index, wq, wk, wv, wo, n_heads)
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        single, _ = cross_attention(a[:, cols], tokens[:, :, cols], query_index,
                                    blocks[0][h], blocks[1][h], blocks[2][h], blocks[3][h], 1)
        np.testing.assert_allclose(out[:, cols], single, atol=1e-12)


def without_user_features(dataset):
    return dataset.with_queries([replace(q, user_features=(0.0,) * len(q.user_features)) for q in dataset.queries])


@pytest.mark.slow
def test_user_features_improve_ranking(tiny_model_config):
    synth = SynthConfig(n_queries=300, text_dim=4, visual_dim=4, item_feature_dim=3, user_feature_dim=4,
                        taste_dim=2, user_dependence=0.8, modality_preference=1.0, seed=11)
    dataset, oracle = generate_dataset(synth)
    train_ds, _, test_ds = split_queries(dataset, seed=11)
    config = tiny_model_config.model_copy(update={"epochs": 25, "embed_dim": 16, "n_heads": 4, "user_tokens": 4,
                                                  "n_buckets": 6, "select_best_on_validation": False})
    loss_config = LossConfig(objective="listwise", alpha=0.0, beta=0.0)

    def test_ndcg(train_part, test_part):
        plan = annotate_dataset(train_part, "full", oracle.fresh())
        model, _ = train(train_part, plan, config, loss_config)
        return ndcg(judge(model, test_part, oracle))

    assert test_ndcg(train_ds, test_ds) > test_ndcg(without_user_features(train_ds), without_user_features(test_ds))
