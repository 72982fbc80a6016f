"""
Configuration for SMAR
Process settings come from the environment (.env supported); experiment,
synthetic-data, model and loss settings come from flat key=value files.
"""

import hashlib
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

load_dotenv()


class Settings:
    def __init__(self):
        self.LOG_DIR = os.getenv("SMAR_LOG_DIR", "logs")
        self.LOG_LEVEL = os.getenv("SMAR_LOG_LEVEL", "INFO").upper()
        self.WORKERS = self._int_env("SMAR_WORKERS", 1)

    @staticmethod
    def _int_env(name: str, default: int) -> int:
        raw = os.getenv(name)
        if raw is None or raw.strip() == "":
            return default
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(name, f"expected an integer, got {raw!r}")


settings = Settings()


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def _unbounded(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("inf", "none", "unbounded", ""):
        return None
    return value


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModalitySynthConfig(_Strict):
    """One retrieval channel of the synthetic generator"""

    name: str
    queue_min: int = Field(4, ge=1)
    queue_max: int = Field(8, ge=1)
    score_alpha: float = Field(2.0, gt=0)
    score_beta: float = Field(2.0, gt=0)
    rho: float = Field(0.8, ge=0.0, le=1.0)
    visual_rate: float = Field(1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_queue_range(self):
        if self.queue_max < self.queue_min:
            raise ValueError("queue_max must be >= queue_min")
        return self


def _default_modalities() -> List[ModalitySynthConfig]:
    # mismatched upstream score shapes between the two queues
    return [
        ModalitySynthConfig(name="natural", score_alpha=2.0, score_beta=5.0, rho=0.8, visual_rate=0.5),
        ModalitySynthConfig(name="video", score_alpha=8.0, score_beta=2.0, rho=0.8, visual_rate=1.0),
    ]


class SynthConfig(_Strict):
    n_queries: int = Field(720, ge=1)
    modalities: List[ModalitySynthConfig] = Field(default_factory=_default_modalities, min_length=1)
    text_dim: int = Field(16, ge=1)
    visual_dim: int = Field(16, ge=1)
    item_feature_dim: int = Field(4, ge=1)
    user_feature_dim: int = Field(8, ge=1)
    label_noise: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = Field(42, ge=0, lt=2**64)
    user_dependence: float = Field(0.5, ge=0.0, le=1.0)
    modality_preference: float = Field(0.5, ge=0.0)
    visual_weight: float = Field(0.7, ge=0.0)
    taste_dim: int = Field(4, ge=1)
    embedding_noise: float = Field(0.3, ge=0.0)

    @field_validator("modalities")
    @classmethod
    def check_unique_names(cls, value):
        names = [m.name for m in value]
        if len(set(names)) != len(names):
            raise ValueError("modality names must be unique")
        return value


def _parse_boundaries(value: Any) -> Any:
    # "0.3,0.7;-1,0,1" -> [[0.3, 0.7], [-1, 0, 1]]
    if isinstance(value, str):
        if not value.strip():
            return None
        return [[float(x) for x in group.split(",") if x.strip()] for group in value.split(";")]
    return value


class ModelConfig(_Strict):
    embed_dim: int = Field(32, ge=2)
    n_heads: int = Field(4, ge=1)
    n_blocks: int = Field(2, ge=1)
    mlp_hidden: int = Field(64, ge=1)
    feature_hidden: int = Field(32, ge=1)
    user_tokens: int = Field(4, ge=1)
    n_buckets: int = Field(8, ge=2)
    item_bucket_boundaries: Optional[List[List[float]]] = None
    user_bucket_boundaries: Optional[List[List[float]]] = None
    learning_rate: float = Field(0.05, ge=0.0)
    epochs: int = Field(30, ge=0)
    batch_queries: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    attention: bool = True
    hybrid_fusion: bool = True
    use_upstream_feature: bool = True
    select_best_on_validation: bool = True

    @field_validator("item_bucket_boundaries", "user_bucket_boundaries", mode="before")
    @classmethod
    def parse_boundary_text(cls, value):
        return _parse_boundaries(value)

    @field_validator("item_bucket_boundaries", "user_bucket_boundaries")
    @classmethod
    def check_strictly_increasing(cls, value):
        if value is None:
            return value
        for cuts in value:
            if any(not math.isfinite(c) for c in cuts):
                raise ValueError("bucket boundaries must be finite")
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ValueError("bucket boundaries must be strictly increasing")
        return value

    @model_validator(mode="after")
    def check_heads_divide(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by n_heads ({self.n_heads})")
        return self


class LossConfig(_Strict):
    objective: Literal["listwise", "pairwise", "online", "anchor"] = "listwise"
    gamma: float = Field(0.1, gt=0.0)
    beta_m: Dict[str, float] = Field(default_factory=dict)
    alpha: float = Field(0.5, ge=0.0)
    beta: float = Field(0.5, ge=0.0)
    visual_modality: str = "video"
    distill_weights: Dict[str, float] = Field(default_factory=dict)
    margin1: float = Field(0.1, gt=0.0)
    margin2: float = Field(0.1, gt=0.0)
    online_alpha: float = Field(0.5, ge=0.0)
    online_beta: float = Field(0.2, ge=0.0)
    normalize_listmle: bool = True
    distill_on_labeled: bool = True
    upstream_bins: int = Field(0, ge=0)

    @field_validator("beta_m", "distill_weights")
    @classmethod
    def check_finite_weights(cls, value):
        for name, weight in value.items():
            if not math.isfinite(weight) or weight < 0:
                raise ValueError(f"weight for modality '{name}' must be finite and >= 0")
        return value

    def modality_weight(self, modality_name: str) -> float:
        """beta_m for pairwise supervision.

        With no beta_m configured every modality weighs 1.0; once any weight
        is configured, every modality that carries pairs needs one.
        """
        if not self.beta_m:
            return 1.0
        if modality_name not in self.beta_m:
            raise ConfigError(f"loss.beta_m.{modality_name}", "no weight configured for this modality")
        return float(self.beta_m[modality_name])

    def distill_weight(self, modality_name: str) -> float:
        """Weight of a modality's listwise distillation term (alpha for the visual queue, beta otherwise)"""
        if modality_name in self.distill_weights:
            return float(self.distill_weights[modality_name])
        return float(self.alpha if modality_name == self.visual_modality else self.beta)


class Band(_Strict):
    """Annotation slice of a queue: [lo, hi) of the upstream ranking, or a uniform random sample of p"""

    name: str
    lo: float = Field(0.0, ge=0.0, le=1.0)
    hi: float = Field(1.0, ge=0.0, le=1.0)
    random: bool = False

    @model_validator(mode="after")
    def check_ordered(self):
        if self.lo >= self.hi:
            raise ValueError(f"band '{self.name}': lo must be < hi")
        return self

    @classmethod
    def from_text(cls, text: str) -> "Band":
        parts = [p.strip() for p in text.split(":")]
        if len(parts) == 3:
            return cls(name=parts[0], lo=float(parts[1]), hi=float(parts[2]))
        if len(parts) == 2:
            return cls(name=parts[0], lo=0.0, hi=float(parts[1]), random=True)
        raise ValueError(f"cannot parse band {text!r}; use name:lo:hi or name:p")


def _default_bands() -> List[Band]:
    return [
        Band(name="top", lo=0.0, hi=0.3),
        Band(name="mid", lo=0.3, hi=0.7),
        Band(name="tail", lo=0.7, hi=1.0),
        Band(name="random", lo=0.0, hi=0.3, random=True),
    ]


ATTENTION_VARIANTS = ("mlp-no-attention", "cross-attention", "cross-attention-no-hybrid-fusion")
EXPERIMENT_KINDS = ("percentile-bands", "budget-sweep", "anchors", "ablation-attention")


class ExperimentConfig(_Strict):
    kind: Literal["percentile-bands", "budget-sweep", "anchors", "ablation-attention"]
    synth: SynthConfig = Field(default_factory=SynthConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    bands: List[Band] = Field(default_factory=_default_bands, min_length=1)
    budgets: List[float] = Field(default_factory=lambda: [0.1, 0.3, 1.0], min_length=1)
    budget_granularity: Literal["item", "query"] = "item"
    t_rounds: List[Optional[int]] = Field(default_factory=lambda: [1, 2, None], min_length=1)
    anchor_modalities: Tuple[str, str] = ("video", "natural")
    variants: List[str] = Field(default_factory=lambda: list(ATTENTION_VARIANTS), min_length=1)
    k: int = Field(10, ge=1)
    ndcg_k: Optional[int] = Field(None, ge=1)
    relevance_threshold: int = Field(2, ge=0, le=4)
    f1_threshold: Optional[float] = None
    split: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)

    @field_validator("seeds", "budgets", "variants", "anchor_modalities", "split", mode="before")
    @classmethod
    def split_list_text(cls, value):
        return _split_csv(value)

    @field_validator("bands", mode="before")
    @classmethod
    def parse_band_text(cls, value):
        value = _split_csv(value)
        if isinstance(value, list):
            return [Band.from_text(v) if isinstance(v, str) else v for v in value]
        return value

    @field_validator("t_rounds", mode="before")
    @classmethod
    def parse_round_text(cls, value):
        value = _split_csv(value)
        if isinstance(value, list):
            return [_unbounded(v) for v in value]
        return value

    @field_validator("t_rounds")
    @classmethod
    def check_rounds_nonnegative(cls, value):
        if any(t is not None and t < 0 for t in value):
            raise ValueError("t_rounds entries must be >= 0 or inf")
        return value

    @field_validator("budgets")
    @classmethod
    def check_budgets_in_range(cls, value):
        if any(not (0.0 < b <= 1.0) for b in value):
            raise ValueError("budgets must lie in (0, 1]")
        return value

    @field_validator("variants")
    @classmethod
    def check_known_variants(cls, value):
        unknown = [v for v in value if v not in ATTENTION_VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; expected a subset of {list(ATTENTION_VARIANTS)}")
        return value

    @field_validator("split")
    @classmethod
    def check_split_sums_to_one(cls, value):
        if any(f <= 0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        return value

    @model_validator(mode="after")
    def check_threshold_required(self):
        if self.kind == "anchors" and self.f1_threshold is None:
            raise ValueError("f1_threshold is required for the anchors experiment")
        return self

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json(exclude={"workers"}).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Flat key=value files
# ---------------------------------------------------------------------------

def read_flat_config(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a flat key=value file into a nested dict (dotted keys become levels).

    `modality.<k>.<field>` keys are collected into an ordered `modalities` list.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")

    flat = dotenv_values(path)
    nested: Dict[str, Any] = {}
    modalities: Dict[str, Dict[str, Any]] = {}

    for key, value in flat.items():
        if value is None:
            raise ConfigError(key, "missing value")
        parts = key.split(".")
        if parts[0] == "modality":
            if len(parts) != 3:
                raise ConfigError(key, "expected modality.<k>.<field>")
            modalities.setdefault(parts[1], {})[parts[2]] = value
            continue
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "conflicts with a scalar key")
        node[parts[-1]] = value

    if modalities:
        def order(k: str):
            return (0, int(k), k) if k.isdigit() else (1, 0, k)
        nested["modalities"] = [modalities[k] for k in sorted(modalities, key=order)]
    return nested


def _validate(model_cls, data: Dict[str, Any], prefix: str = ""):
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = ".".join(str(part) for part in error["loc"]) or "config"
        field = f"{prefix}{loc}" if prefix else loc
        raise ConfigError(field, error["msg"]) from None


def load_synth_config(path: Union[str, Path]) -> SynthConfig:
    nested = read_flat_config(path)
    data = dict(nested.get("synth", {}))
    if "modalities" in nested:
        data["modalities"] = nested["modalities"]
    for key, value in nested.items():
        if key not in ("synth", "modalities", "model", "loss") and not isinstance(value, dict):
            data.setdefault(key, value)
    # experiment-level keys are tolerated in a synth file
    allowed = set(SynthConfig.model_fields)
    data = {k: v for k, v in data.items() if k in allowed}
    return _validate(SynthConfig, data)


def load_model_config(path: Union[str, Path]) -> Tuple[ModelConfig, LossConfig]:
    nested = read_flat_config(path)
    model = _validate(ModelConfig, nested.get("model", {}), prefix="model.")
    loss = _validate(LossConfig, nested.get("loss", {}), prefix="loss.")
    return model, loss


def load_experiment_config(path: Union[str, Path], kind: Optional[str] = None) -> ExperimentConfig:
    nested = read_flat_config(path)
    data = {k: v for k, v in nested.items() if k != "modalities"}
    synth = dict(data.pop("synth", {}))
    if "modalities" in nested:
        synth["modalities"] = nested["modalities"]
    data["synth"] = synth
    if kind is not None:
        if "kind" in data and data["kind"] != kind:
            raise ConfigError("kind", f"config file declares '{data['kind']}' but '{kind}' was requested")
        data["kind"] = kind
    return _validate(ExperimentConfig, data)
