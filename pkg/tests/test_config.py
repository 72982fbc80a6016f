"""
Tests for settings, config models and the flat config loader
"""

from pathlib import Path

import pytest

from smar.config import (
    Band,
    ExperimentConfig,
    LossConfig,
    Settings,
    SynthConfig,
    load_experiment_config,
    load_model_config,
    load_synth_config,
    read_flat_config,
)
from smar.errors import ConfigError

ASSETS = Path(__file__).resolve().parent.parent / "assets"


def write_cfg(tmp_path, text: str, name: str = "test.cfg") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_synth_defaults_have_mismatched_queues():
    config = SynthConfig()
    assert config.n_queries == 720
    assert [m.name for m in config.modalities] == ["natural", "video"]
    natural, video = config.modalities
    assert (natural.score_alpha, natural.score_beta) == (2.0, 5.0)
    assert (video.score_alpha, video.score_beta) == (8.0, 2.0)


def test_flat_config_collects_modalities_in_numeric_order(tmp_path):
    path = write_cfg(tmp_path, "\n".join([
        "synth.n_queries=10",
        "modality.10.name=late",
        "modality.2.name=video",
        "modality.1.name=natural",
    ]))
    nested = read_flat_config(path)
    assert nested["synth"] == {"n_queries": "10"}
    assert [m["name"] for m in nested["modalities"]] == ["natural", "video", "late"]


def test_missing_config_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        read_flat_config(tmp_path / "nope.cfg")


def test_synth_config_from_file(tmp_path):
    path = write_cfg(tmp_path, "\n".join([
        "synth.n_queries=5",
        "synth.seed=9",
        "modality.1.name=a",
        "modality.1.rho=1.0",
    ]))
    config = load_synth_config(path)
    assert config.n_queries == 5
    assert config.seed == 9
    assert [m.name for m in config.modalities] == ["a"]
    assert config.modalities[0].rho == 1.0


def test_invalid_value_names_the_dotted_field(tmp_path):
    path = write_cfg(tmp_path, "model.embed_dim=32\nmodel.learning_rate=-1\n")
    with pytest.raises(ConfigError) as excinfo:
        load_model_config(path)
    assert excinfo.value.field == "model.learning_rate"


def test_heads_must_divide_embedding(tmp_path):
    path = write_cfg(tmp_path, "model.embed_dim=30\nmodel.n_heads=4\n")
    with pytest.raises(ConfigError, match="divisible"):
        load_model_config(path)


def test_bucket_boundaries_parse_and_validate(tmp_path):
    model, _ = load_model_config(write_cfg(tmp_path, "model.item_bucket_boundaries=0.3,0.7;-1,0,1\n"))
    assert model.item_bucket_boundaries == [[0.3, 0.7], [-1.0, 0.0, 1.0]]

    with pytest.raises(ConfigError) as excinfo:
        load_model_config(write_cfg(tmp_path, "model.item_bucket_boundaries=0.7,0.3\n", "bad.cfg"))
    assert excinfo.value.field == "model.item_bucket_boundaries"


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_model_config(write_cfg(tmp_path, "loss.not_a_weight=1\n"))


def test_modality_weight_defaults_and_partial_maps():
    assert LossConfig().modality_weight("video") == 1.0
    loss = LossConfig(beta_m={"video": 0.5})
    assert loss.modality_weight("video") == 0.5
    with pytest.raises(ConfigError, match="natural"):
        loss.modality_weight("natural")


def test_distill_weight_uses_alpha_for_the_visual_queue():
    loss = LossConfig(alpha=0.7, beta=0.2, distill_weights={"extra": 0.9})
    assert loss.distill_weight("video") == 0.7
    assert loss.distill_weight("natural") == 0.2
    assert loss.distill_weight("extra") == 0.9


def test_band_text_forms():
    assert Band.from_text("top:0:0.3") == Band(name="top", lo=0.0, hi=0.3)
    random_band = Band.from_text("random:0.3")
    assert random_band.random and random_band.hi == 0.3
    with pytest.raises(ValueError):
        Band.from_text("broken")


def test_experiment_lists_and_unbounded_rounds(tmp_path):
    path = write_cfg(tmp_path, "\n".join([
        "kind=anchors",
        "seeds=4,5",
        "t_rounds=1,2,inf",
        "f1_threshold=0.5",
    ]))
    config = load_experiment_config(path)
    assert config.seeds == [4, 5]
    assert config.t_rounds == [1, 2, None]


def test_anchor_experiment_requires_threshold(tmp_path):
    path = write_cfg(tmp_path, "kind=anchors\n")
    with pytest.raises(ConfigError, match="f1_threshold"):
        load_experiment_config(path)


def test_kind_conflict_is_reported(tmp_path):
    path = write_cfg(tmp_path, "kind=budget-sweep\n")
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(path, kind="percentile-bands")
    assert excinfo.value.field == "kind"


def test_config_hash_ignores_workers():
    config = ExperimentConfig(kind="budget-sweep")
    assert config.model_copy(update={"workers": 8}).config_hash() == config.config_hash()
    assert config.model_copy(update={"seeds": [9]}).config_hash() != config.config_hash()


def test_bad_worker_env(monkeypatch):
    monkeypatch.setenv("SMAR_WORKERS", "many")
    with pytest.raises(ConfigError) as excinfo:
        Settings()
    assert excinfo.value.field == "SMAR_WORKERS"


@pytest.mark.parametrize("name", [
    "percentile_bands.cfg", "budget_sweep.cfg", "anchors.cfg", "ablation_attention.cfg",
])
def test_shipped_experiment_configs_load(name):
    config = load_experiment_config(ASSETS / name)
    assert config.seeds == [1, 2, 3]
    assert config.workers == 4


def test_shipped_synth_and_model_configs_load():
    synth = load_synth_config(ASSETS / "synth.cfg")
    assert synth == SynthConfig()
    model, loss = load_model_config(ASSETS / "model.cfg")
    assert model.embed_dim == 32 and model.n_heads == 4
    assert loss.objective == "listwise"
