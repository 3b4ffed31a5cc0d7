"""Feature preprocessing and the unified projection into a B x L x D token tensor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import BatchNorm, Context, Embedding, Initializer, Linear, Module, Tensor
from .config import SEQUENCE_KINDS, SchemaConfig, WorldConfig
from .data import Batch, Partition
from .errors import ConfigError, DataError


def fit_minmax(column, name: str = "feature") -> tuple[float, float]:
    col = np.asarray(column, dtype=np.float64)
    if col.size == 0:
        raise DataError(f"cannot fit min-max for {name!r}: empty column")
    if np.isnan(col).any():
        raise DataError(f"NaN in continuous feature {name!r}")
    if not np.isfinite(col).all():
        raise DataError(f"non-finite value in continuous feature {name!r}")
    return float(col.min()), float(col.max())


def apply_minmax(value, lo, hi):
    """Scale into [0, 1], clipping out-of-range values; a degenerate range maps to 0."""
    v = np.asarray(value, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, np.clip((v - lo) / safe, 0.0, 1.0), 0.0)
    return out if out.ndim else float(out)


def timestamp_transform(timestamps) -> np.ndarray:
    """log(ts[i] - ts[i-1] + 1) with 0 for the first item."""
    ts = np.asarray(timestamps, dtype=np.float64)
    out = np.zeros(ts.shape)
    if ts.shape[-1] > 1:
        delta = np.diff(ts, axis=-1)
        if (delta < 0).any():
            raise DataError("timestamps must be non-decreasing")
        out[..., 1:] = np.log(delta + 1.0)
    return out


def padded_timestamp_transform(timestamps: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Row-wise :func:`timestamp_transform` over a right-padded (B, L) array; pads map to 0."""
    b, l = timestamps.shape
    out = np.zeros((b, l))
    if l > 1:
        valid = np.arange(1, l)[None, :] < lengths[:, None]
        delta = np.diff(timestamps, axis=1)
        if (delta[valid] < 0).any():
            raise DataError("timestamps must be non-decreasing within a sequence")
        out[:, 1:] = np.where(valid, np.log(np.where(valid, delta, 0.0) + 1.0), 0.0)
    return out


@dataclass(frozen=True)
class FeatureSpec:
    """One token source.  ``kind`` is continuous, categorical or pretrained."""

    name: str
    kind: str
    side: str
    category: str
    columns: tuple[str, ...] = ()
    vocab: int = 0
    dim: int = 0
    column: str = ""


@dataclass
class FeatureSchema:
    features: list[FeatureSpec]
    sequence_kinds: list[str] = field(default_factory=list)
    item_dim: int = 8
    n_advertisers: int = 1

    def token_names(self) -> list[str]:
        return [f.name for f in self.features] + [f"seq.{k}" for k in self.sequence_kinds]

    @property
    def n_tokens(self) -> int:
        return len(self.features) + len(self.sequence_kinds)

    def continuous(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == "continuous"]


USER_DENSE_DEMOGRAPHIC = ("age", "f1")
USER_COUNTING = ("cnt_search", "cnt_org", "cnt_ads", "cnt_match", "cnt_conv", "recent_conv")
AD_DENSE = ("f2",)
N_LOCATIONS = 20
N_GENDERS = 3
N_INTERESTS = 16


def build_schema(world: WorldConfig, schema: SchemaConfig) -> FeatureSchema:
    """Feature declarations of the synthetic world, filtered by the enabled categories."""
    cats = set(schema.user_categories)
    e = world.emb_dim
    full = [
        FeatureSpec("user.demographic_dense", "continuous", "user", "demographic", USER_DENSE_DEMOGRAPHIC),
        FeatureSpec("user.gender", "categorical", "user", "demographic", vocab=N_GENDERS + 1, column="gender"),
        FeatureSpec("user.location", "categorical", "user", "demographic", vocab=N_LOCATIONS + 1,
                    column="location"),
        FeatureSpec("user.counting", "continuous", "user", "counting", USER_COUNTING),
        FeatureSpec("user.interest", "categorical", "user", "categorical", vocab=N_INTERESTS + 1,
                    column="interest"),
        FeatureSpec("user.embedding", "pretrained", "user", "pretrained", dim=e, column="user_embedding"),
        FeatureSpec("ad.dense", "continuous", "ad", "ad", AD_DENSE),
        FeatureSpec("ad.ad_id", "categorical", "ad", "ad", vocab=world.n_ads + 1, column="ad_id"),
        FeatureSpec("ad.advertiser_id", "categorical", "ad", "ad", vocab=world.n_advertisers + 1,
                    column="advertiser_id"),
        FeatureSpec("ad.embedding", "pretrained", "ad", "ad", dim=e, column="ad_embedding"),
    ]
    feats = [f for f in full if (f.side == "user" and f.category in cats) or (f.side == "ad" and schema.ad_features)]
    kinds = [k for k in SEQUENCE_KINDS if k in schema.sequence_kinds] if "sequence" in cats else []
    if not feats and not kinds:
        raise ConfigError("schema selects no features at all", "schema")
    return FeatureSchema(feats, kinds, item_dim=e, n_advertisers=world.n_advertisers)


def column_key(spec: FeatureSpec) -> str:
    """Name of the batch column holding a categorical/pretrained feature."""
    return spec.column or spec.name.split(".", 1)[1]


@dataclass
class TokenTensor:
    tensor: Tensor
    names: list[str]


class FeaturePipeline(Module):
    """Normalizes raw columns and maps every feature to one D-dim token."""

    def __init__(self, path: str, schema: FeatureSchema, token_dim: int, categorical_dim: int,
                 summary_dim: int, init: Initializer):
        super().__init__(path)
        self.schema, self.token_dim = schema, token_dim
        self.proj: dict[str, Linear] = {}
        self.embeddings: dict[str, Embedding] = {}
        self.norms: dict[str, BatchNorm] = {}
        for f in schema.features:
            base = self.child_path(f.name)
            if f.kind == "continuous":
                self.register_buffer(f"{f.name}.min", np.zeros(len(f.columns)))
                self.register_buffer(f"{f.name}.max", np.zeros(len(f.columns)))
                self.proj[f.name] = Linear(f"{base}.proj", len(f.columns), token_dim, init)
            elif f.kind == "categorical":
                self.embeddings[f.name] = Embedding(f"{base}.table", f.vocab, categorical_dim, init)
                self.proj[f.name] = Linear(f"{base}.proj", categorical_dim, token_dim, init)
            elif f.kind == "pretrained":
                self.norms[f.name] = BatchNorm(f"{base}.bn", f.dim)
                self.proj[f.name] = Linear(f"{base}.proj", f.dim, token_dim, init)
            else:
                raise ConfigError(f"unknown feature kind {f.kind!r}", f.name)
        for k in schema.sequence_kinds:
            self.proj[f"seq.{k}"] = Linear(self.child_path(f"seq.{k}.proj"), summary_dim, token_dim, init)
        self.register_buffer("fitted", np.zeros(1))

    @property
    def fitted(self) -> bool:
        return bool(self._buffers["fitted"][0])

    def fit(self, partitions: Sequence[Partition]) -> None:
        """Fit min-max statistics of every continuous feature on training data."""
        for f in self.schema.continuous():
            lo, hi = self._buffers[f"{f.name}.min"], self._buffers[f"{f.name}.max"]
            for j, col in enumerate(f.columns):
                missing = [p.day for p in partitions if col not in p.dense]
                if missing:
                    raise DataError(f"continuous column {col!r} missing from partitions {missing}")
                lo[j], hi[j] = fit_minmax(np.concatenate([p.dense[col] for p in partitions]), col)
        self._buffers["fitted"][0] = 1.0

    def check_batch(self, batch: Batch) -> None:
        missing = []
        for f in self.schema.features:
            if f.kind == "continuous":
                missing += [c for c in f.columns if c not in batch.dense]
            elif f.kind == "categorical" and column_key(f) not in batch.categorical:
                missing.append(f.name)
            elif f.kind == "pretrained" and column_key(f) not in batch.pretrained:
                missing.append(f.name)
        if missing:
            raise DataError(f"batch is missing features: {', '.join(missing)}")

    def feature_tokens(self, batch: Batch, ctx: Context) -> list[Tensor]:
        """One (B, D) tensor per non-sequence feature, in schema order."""
        out = []
        for f in self.schema.features:
            if f.kind == "continuous":
                raw = np.stack([batch.dense[c] for c in f.columns], axis=1)
                x = Tensor(apply_minmax(raw, self._buffers[f"{f.name}.min"], self._buffers[f"{f.name}.max"]))
            elif f.kind == "categorical":
                x = self.embeddings[f.name](batch.categorical[column_key(f)])
            else:
                x = self.norms[f.name](Tensor(batch.pretrained[column_key(f)]), ctx)
            out.append(self.proj[f.name](x))
        return out

    def project(self, batch: Batch, summaries: dict[str, Tensor], ctx: Context) -> TokenTensor:
        """Stack all feature tokens and sequence-summary tokens into (B, L, D)."""
        self.check_batch(batch)
        toks = self.feature_tokens(batch, ctx)
        for k in self.schema.sequence_kinds:
            if k not in summaries:
                raise DataError(f"missing sequence summary for kind {k!r}")
            toks.append(self.proj[f"seq.{k}"](summaries[k]))
        b = batch.size
        parts = [ag.reshape(t, (b, 1, self.token_dim)) for t in toks]
        tensor = parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)
        return TokenTensor(tensor, self.schema.token_names())
