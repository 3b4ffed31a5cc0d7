"""Run configuration: typed sections, defaults and a strict loader.

Defaults follow the deployed production model (two sum-ensemble layers of
MLP+Transformer then MLP+MaskNet, token dim 64, layer width 1024, towers of
[128, 128, 128], sequence cutoff 500).  Unknown keys are rejected and every
error carries the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import yaml

from .errors import ConfigError

SEQUENCE_KINDS = ("search", "org", "ads", "match", "conv")
USER_CATEGORIES = ("demographic", "counting", "categorical", "pretrained", "sequence")
CONVERSION_HEADS = ("checkout", "add_to_cart", "signup", "lead")
MODULE_KINDS = ("mlp", "dcn_v2", "masknet", "transformer")


# --------------------------------------------------------------------------- world


@dataclass
class WorldConfig:
    n_users: int = 2000
    n_ads: int = 400
    n_advertisers: int = 40
    n_items: int = 1000
    n_queries: int = 300
    emb_dim: int = 8
    impressions_per_day: int = 2000
    positive_rate: dict[str, float] = field(default_factory=lambda: {
        "checkout": 0.02, "add_to_cart": 0.04, "signup": 0.01, "lead": 0.01})
    click_rate: float = 0.1
    downsample_rate: float = 0.05
    seq_rates: dict[str, float] = field(default_factory=lambda: {
        "search": 2.0, "org": 4.0, "ads": 2.0, "match": 0.3, "conv": 0.3})
    history_days: int = 20
    max_seq_len: int = 500
    click_strength: float = 1.5
    latent_strength: float = 1.0
    crossing_strength: float = 1.0
    sequence_strength: float = 1.0
    click_coupling: float = 1.0
    noise_scale: float = 0.3
    affinity_temperature: float = 2.0
    conv_taste_corr: float = 0.3
    pretrained_noise: float = 0.5
    recent_window: int = 10
    mask_rate: float = 0.0
    seed: int = 0

    def validate(self, path: str = "world") -> None:
        for name in ("n_users", "n_ads", "n_advertisers", "n_items", "n_queries", "emb_dim",
                     "impressions_per_day", "max_seq_len", "recent_window"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{path}.{name}")
        if self.n_advertisers > self.n_ads:
            raise ConfigError("cannot exceed n_ads", f"{path}.n_advertisers")
        for head, rate in self.positive_rate.items():
            if head not in CONVERSION_HEADS:
                raise ConfigError(f"unknown head {head!r}", f"{path}.positive_rate")
            if not 0.0 < rate <= 1.0:
                raise ConfigError("rates must lie in (0, 1]", f"{path}.positive_rate.{head}")
        for name in ("click_rate", "downsample_rate"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError("rates must lie in (0, 1]", f"{path}.{name}")
        for kind, rate in self.seq_rates.items():
            if kind not in SEQUENCE_KINDS:
                raise ConfigError(f"unknown sequence kind {kind!r}", f"{path}.seq_rates")
            if rate < 0:
                raise ConfigError("must be >= 0", f"{path}.seq_rates.{kind}")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{path}.mask_rate")
        if self.history_days < 0:
            raise ConfigError("must be >= 0", f"{path}.history_days")


# --------------------------------------------------------------------------- schema


@dataclass
class SchemaConfig:
    """Which feature families enter the token tensor."""

    user_categories: list[str] = field(default_factory=lambda: list(USER_CATEGORIES))
    sequence_kinds: list[str] = field(default_factory=lambda: list(SEQUENCE_KINDS))
    ad_features: bool = True
    categorical_dim: int = 64

    def validate(self, path: str = "schema") -> None:
        for c in self.user_categories:
            if c not in USER_CATEGORIES:
                raise ConfigError(f"unknown user feature category {c!r}", f"{path}.user_categories")
        for k in self.sequence_kinds:
            if k not in SEQUENCE_KINDS:
                raise ConfigError(f"unknown sequence kind {k!r}", f"{path}.sequence_kinds")
        if self.categorical_dim < 1:
            raise ConfigError("must be >= 1", f"{path}.categorical_dim")


# --------------------------------------------------------------------------- modules


@dataclass
class MLPConfig:
    """Hidden widths before the final affine map to the layer width."""

    kind: str = "mlp"
    name: str | None = None
    widths: list[int] = field(default_factory=lambda: [1024])


@dataclass
class DCNConfig:
    kind: str = "dcn_v2"
    name: str | None = None
    layers: int = 2
    rank: int = 64


@dataclass
class MaskNetConfig:
    kind: str = "masknet"
    name: str | None = None
    blocks: int = 2
    hidden: int = 256
    aggregation_dim: int | None = None
    dropout: float = 0.005


@dataclass
class TransformerConfig:
    kind: str = "transformer"
    name: str | None = None
    layers: int = 2
    heads: int = 4
    hidden: int = 256
    ff_size: int = 512
    dropout: float = 0.0
    max_positions: int = 500


ModuleConfig = Union[MLPConfig, DCNConfig, MaskNetConfig, TransformerConfig]
_MODULE_TYPES = {"mlp": MLPConfig, "dcn_v2": DCNConfig, "masknet": MaskNetConfig,
                 "transformer": TransformerConfig}


def validate_module(cfg: ModuleConfig, path: str) -> None:
    if isinstance(cfg, MLPConfig):
        if any(w < 1 for w in cfg.widths):
            raise ConfigError("MLP widths must be >= 1", f"{path}.widths")
    elif isinstance(cfg, DCNConfig):
        if cfg.layers < 0:
            raise ConfigError("must be >= 0", f"{path}.layers")
        if cfg.rank < 1:
            raise ConfigError("must be >= 1", f"{path}.rank")
    elif isinstance(cfg, MaskNetConfig):
        if cfg.blocks < 1 or cfg.hidden < 1:
            raise ConfigError("blocks and hidden must be >= 1", path)
        if cfg.aggregation_dim is not None and cfg.aggregation_dim < 1:
            raise ConfigError("must be >= 1", f"{path}.aggregation_dim")
        if not 0.0 <= cfg.dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{path}.dropout")
    elif isinstance(cfg, TransformerConfig):
        if cfg.layers < 0 or cfg.heads < 1 or cfg.hidden < 1 or cfg.ff_size < 1:
            raise ConfigError("layers >= 0 and heads, hidden, ff_size >= 1 required", path)
        if cfg.hidden % cfg.heads:
            raise ConfigError(f"heads ({cfg.heads}) must divide hidden ({cfg.hidden})", f"{path}.heads")
        if not 0.0 <= cfg.dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{path}.dropout")
        if cfg.max_positions < 1:
            raise ConfigError("must be >= 1", f"{path}.max_positions")


def module_name(cfg: ModuleConfig) -> str:
    return cfg.name or cfg.kind


# --------------------------------------------------------------------------- model


@dataclass
class LayerConfig:
    modules: list[ModuleConfig]
    width: int = 1024
    reshape_dim: int = 64


@dataclass
class HeadConfig:
    name: str
    tower: list[int] = field(default_factory=lambda: [128, 128, 128])
    weight: float = 1.0
    train_only: bool = False


def _default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(modules=[MLPConfig(), TransformerConfig()]),
        LayerConfig(modules=[MLPConfig(), MaskNetConfig()]),
    ]


def _default_heads() -> list[HeadConfig]:
    return [HeadConfig(h) for h in CONVERSION_HEADS] + [HeadConfig("ctr", train_only=True)]


@dataclass
class DhenConfig:
    layers: list[LayerConfig] = field(default_factory=_default_layers)
    residual: bool = False


@dataclass
class SequenceConfig:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff_size: int = 128
    dropout: float = 0.0
    action_dim: int = 8
    advertiser_dim: int = 8
    max_len: int = 500
    pooling: str = "mean"
    shared_encoder: bool = False


@dataclass
class ModelConfig:
    token_dim: int = 64
    dhen: DhenConfig = field(default_factory=DhenConfig)
    heads: list[HeadConfig] = field(default_factory=_default_heads)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    init_seed: int = 0

    def validate(self, path: str = "model") -> None:
        if self.token_dim < 1:
            raise ConfigError("must be >= 1", f"{path}.token_dim")
        layers = self.dhen.layers
        if not layers:
            raise ConfigError("DHEN needs at least one layer", f"{path}.dhen.layers")
        for i, layer in enumerate(layers):
            lp = f"{path}.dhen.layers[{i}]"
            if not layer.modules:
                raise ConfigError("every layer needs at least one module", f"{lp}.modules")
            if layer.width < 1:
                raise ConfigError("must be >= 1", f"{lp}.width")
            names = [module_name(m) for m in layer.modules]
            if len(set(names)) != len(names):
                raise ConfigError(f"module names must be unique within a layer: {names}", f"{lp}.modules")
            for j, m in enumerate(layer.modules):
                validate_module(m, f"{lp}.modules[{j}]")
            if i + 1 < len(layers) and (layer.reshape_dim < 1 or layer.width % layer.reshape_dim):
                raise ConfigError(f"width {layer.width} is not divisible by reshape_dim {layer.reshape_dim}",
                                  f"{lp}.reshape_dim")
        names = [h.name for h in self.heads]
        if not names:
            raise ConfigError("at least one head is required", f"{path}.heads")
        if len(set(names)) != len(names):
            raise ConfigError(f"head names must be unique: {names}", f"{path}.heads")
        if all(h.train_only for h in self.heads):
            raise ConfigError("at least one serving head is required", f"{path}.heads")
        for i, h in enumerate(self.heads):
            if any(w < 1 for w in h.tower):
                raise ConfigError("tower widths must be >= 1", f"{path}.heads[{i}].tower")
            if h.weight < 0:
                raise ConfigError("must be >= 0", f"{path}.heads[{i}].weight")
        s = self.sequence
        if s.hidden % s.heads:
            raise ConfigError(f"heads ({s.heads}) must divide hidden ({s.hidden})", f"{path}.sequence.heads")
        if s.pooling not in ("mean", "last"):
            raise ConfigError("must be 'mean' or 'last'", f"{path}.sequence.pooling")
        if not 1 <= s.max_len <= 500:
            raise ConfigError("must lie in [1, 500]", f"{path}.sequence.max_len")


# --------------------------------------------------------------------------- ssl / training


@dataclass
class SslConfig:
    objective: str = "NAL"
    num_pos: int = 90
    num_neg: int = 20
    org_weight: float = 0.0002
    ads_weight: float = 0.0001
    separate_target_table: bool = False

    def validate(self, path: str = "ssl") -> None:
        if self.objective not in ("NAL", "MLM"):
            raise ConfigError("must be 'NAL' or 'MLM'", f"{path}.objective")
        if self.num_pos < 1 or self.num_neg < 1:
            raise ConfigError("num_pos and num_neg must be >= 1", path)
        if self.org_weight < 0 or self.ads_weight < 0:
            raise ConfigError("weights must be >= 0", path)

    @property
    def enabled(self) -> bool:
        return self.org_weight > 0 or self.ads_weight > 0


SSL_GROUPS = {"search": "org", "org": "org", "ads": "ads", "match": "ads", "conv": "ads"}


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 1
    warmup_steps: int = 0
    max_loss: float = 1e6
    seed: int = 0
    train_days: int = 11
    incremental_days: int = 4
    eval_days: int = 1
    float32_checkpoint: bool = False

    def validate(self, path: str = "training") -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive", f"{path}.lr")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required", path)
        if self.warmup_steps < 0:
            raise ConfigError("must be >= 0", f"{path}.warmup_steps")
        if self.train_days < 0 or self.incremental_days < 0 or self.eval_days < 0:
            raise ConfigError("day counts must be >= 0", path)


# --------------------------------------------------------------------------- search / eval


@dataclass
class DimensionConfig:
    name: str
    kind: str
    values: list[Any] | None = None
    low: float | None = None
    high: float | None = None


@dataclass
class BudgetConfig:
    train_partitions: int = 3
    eval_partitions: int = 1
    epochs: int = 1


def _default_dimensions() -> list[DimensionConfig]:
    return [
        DimensionConfig("dhen_depth", "integer-range", low=1.0, high=3.0),
        DimensionConfig("layer_modules", "categorical",
                        values=["mlp+transformer", "mlp+masknet", "mlp+dcn_v2", "mlp+dcn_v2+transformer",
                                "mlp+dcn_v2+masknet+transformer"]),
        DimensionConfig("hidden", "categorical", values=[16, 32, 64]),
        DimensionConfig("heads", "categorical", values=[1, 2, 4]),
        DimensionConfig("lr", "log-uniform-float", low=1e-4, high=1e-2),
    ]


@dataclass
class SearchConfig:
    dimensions: list[DimensionConfig] = field(default_factory=_default_dimensions)
    constraints: list[list[str]] = field(default_factory=lambda: [["heads", "hidden"]])
    n_train: int = 16
    n_predict: int = 512
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    ridge_lambda: float = 1e-3
    quadratic: bool = False
    seed: int = 0

    def validate(self, path: str = "search") -> None:
        if self.n_train < 1:
            raise ConfigError("candidate budget must be >= 1", f"{path}.n_train")
        if self.n_predict < 1:
            raise ConfigError("must be >= 1", f"{path}.n_predict")
        if self.ridge_lambda <= 0:
            raise ConfigError("ridge regularization must be > 0", f"{path}.ridge_lambda")
        if self.budget.eval_partitions < 1:
            raise ConfigError("at least one evaluation partition is required",
                              f"{path}.budget.eval_partitions")
        if self.budget.train_partitions < 1:
            raise ConfigError("must be >= 1", f"{path}.budget.train_partitions")
        names = {d.name for d in self.dimensions}
        for i, c in enumerate(self.constraints):
            if len(c) != 2 or not set(c) <= names:
                raise ConfigError("constraints are [divisor, dividend] pairs of dimension names",
                                  f"{path}.constraints[{i}]")


@dataclass
class EvalConfig:
    plan: str = "crossing"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    jobs: int = 1


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    schema: SchemaConfig = field(default_factory=SchemaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.schema.validate()
        self.model.validate()
        self.ssl.validate()
        self.training.validate()
        self.search.validate()
        return self


# --------------------------------------------------------------------------- loading


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if tp is ModuleConfig or (origin is Union and set(args) == set(_MODULE_TYPES.values())):
        if not isinstance(value, dict):
            raise ConfigError("module entry must be a mapping", path)
        kind = value.get("kind")
        if kind not in _MODULE_TYPES:
            raise ConfigError(f"unknown module kind {kind!r}; expected one of {MODULE_KINDS}", f"{path}.kind")
        return from_dict(_MODULE_TYPES[kind], value, path)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", path)
        return {str(k): _convert(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise ConfigError(f"unsupported field type {_type_name(tp)}", path)


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", f"{path}.{key}" if path else key)
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError("required field is missing", sub)
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg) -> str:
    """Canonical JSON text of a config (stable key order)."""
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def parse_run_config(data: dict) -> RunConfig:
    return from_dict(RunConfig, data).validate()


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document: {exc}") from exc
    return parse_run_config(data or {})


def model_config_from_json(text: str) -> ModelConfig:
    return from_dict(ModelConfig, json.loads(text), "model")
