"""The full conversion model: features and sequences -> tokens -> DHEN -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import EVAL, Context, Initializer, Module, Tensor
from .config import ModelConfig, RunConfig, SchemaConfig, SslConfig, WorldConfig
from .data import Batch
from .dhen import DHEN, Head
from .features import FeaturePipeline, FeatureSchema, TokenTensor, build_schema
from .sequence import SequenceModel
from .ssl import SslLoss


@dataclass
class ForwardOutput:
    logits: dict[str, Tensor]
    tokens: TokenTensor
    encoded: dict[str, Tensor]
    hidden: Tensor


class CvrModel(Module):
    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, categorical_dim: int = 64,
                 ssl_cfg: SslConfig | None = None):
        super().__init__("")
        cfg.validate()
        self.cfg, self.schema = cfg, schema
        init = Initializer(cfg.init_seed)
        self.sequence = SequenceModel("sequence", schema.sequence_kinds, schema.item_dim, schema.n_advertisers,
                                      cfg.sequence, init)
        self.features = FeaturePipeline("features", schema, cfg.token_dim, categorical_dim, cfg.sequence.hidden,
                                        init)
        self.dhen = DHEN("dhen", cfg.dhen, schema.n_tokens, cfg.token_dim, init)
        self.heads = {h.name: Head(f"heads.{h.name}", h, self.dhen.out_dim, init) for h in cfg.heads}
        self.ssl = SslLoss(ssl_cfg, self.sequence, init) if ssl_cfg is not None and ssl_cfg.enabled else None

    @property
    def serving_heads(self) -> list[str]:
        return [n for n, h in self.heads.items() if not h.train_only]

    def forward(self, batch: Batch, ctx: Context) -> ForwardOutput:
        b = batch.size
        summaries, encoded = {}, {}
        for k in self.sequence.kinds:
            seq = batch.sequences.get(k)
            if seq is None or not seq.lengths.any():
                summaries[k] = self.sequence.null_summary(k, b)
                continue
            enc = self.sequence.item_encode(k, seq)
            encoded[k] = enc
            summaries[k] = self.sequence.summary(k, seq, ctx, encoded=enc)
        tokens = self.features.project(batch, summaries, ctx)
        hidden = self.dhen(tokens.tensor, ctx)
        logits = {n: h.logit(hidden) for n, h in self.heads.items()}
        return ForwardOutput(logits, tokens, encoded, hidden)

    def predict(self, batch: Batch, include_train_only: bool = False) -> dict[str, np.ndarray]:
        """Serving probabilities in eval mode; train-only heads are left out."""
        out = self.forward(batch, EVAL)
        return {n: ag.stable_sigmoid(z.data) for n, z in out.logits.items()
                if include_train_only or not self.heads[n].train_only}

    def parameter_names(self) -> list[str]:
        return list(self.named_parameters())


def build_model(run: RunConfig) -> CvrModel:
    schema = build_schema(run.world, run.schema)
    return CvrModel(run.model, schema, run.schema.categorical_dim, run.ssl)


def build_model_from(world: WorldConfig, schema_cfg: SchemaConfig, model_cfg: ModelConfig,
                     ssl_cfg: SslConfig | None = None) -> CvrModel:
    return CvrModel(model_cfg, build_schema(world, schema_cfg), schema_cfg.categorical_dim, ssl_cfg)

