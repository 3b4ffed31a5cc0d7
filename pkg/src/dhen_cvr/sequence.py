"""Behavior-sequence encoders: per-item encoding, summaries and causal contexts."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Context, Embedding, Initializer, Linear, Module, Tensor
from .config import SequenceConfig
from .crossing import TransformerEncoder, masked_mean
from .data import ACTIONS, PaddedSequence
from .features import padded_timestamp_transform

ADVERTISER_KINDS = ("match", "conv")


class ItemEncoder(Module):
    """affine(concat(item embedding, action embedding, log-delta timestamp[, advertiser embedding]))."""

    def __init__(self, path: str, kind: str, item_dim: int, n_advertisers: int, cfg: SequenceConfig,
                 init: Initializer):
        super().__init__(path)
        self.kind, self.item_dim = kind, item_dim
        self.actions = Embedding(self.child_path("action"), len(ACTIONS), cfg.action_dim, init)
        d = item_dim + cfg.action_dim + 1
        self.advertisers = None
        if kind in ADVERTISER_KINDS:
            self.advertisers = Embedding(self.child_path("advertiser"), n_advertisers + 1, cfg.advertiser_dim, init)
            d += cfg.advertiser_dim
        self.proj = Linear(self.child_path("proj"), d, cfg.hidden, init)

    def __call__(self, seq: PaddedSequence) -> Tensor:
        """(B, L, hidden) encodings; padded positions get encodings too and are masked later."""
        parts = [Tensor(seq.embeddings), self.actions(seq.actions),
                 Tensor(padded_timestamp_transform(seq.timestamps, seq.lengths)[..., None])]
        if self.advertisers is not None:
            parts.append(self.advertisers(seq.advertisers))
        return self.proj(ag.concat(parts, axis=-1))


def select_last(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Output at the last valid position of each row (zeros for empty rows)."""
    b, l, h = x.shape
    onehot = (np.arange(l)[None, :] == (lengths - 1)[:, None]).astype(np.float64)
    w = Tensor(np.broadcast_to(onehot[:, :, None], (b, l, h)).copy())
    return ag.sum_pool(ag.mul(x, w), axis=1)


class SequenceModel(Module):
    """One item encoder and (by default) one transformer encoder per sequence kind."""

    def __init__(self, path: str, kinds: list[str], item_dim: int, n_advertisers: int,
                 cfg: SequenceConfig, init: Initializer):
        super().__init__(path)
        self.kinds, self.cfg = list(kinds), cfg
        self.items = {k: ItemEncoder(self.child_path(f"{k}.item"), k, item_dim, n_advertisers, cfg, init)
                      for k in self.kinds}

        def encoder(p):
            return TransformerEncoder(p, cfg.hidden, cfg.hidden, cfg.layers, cfg.heads, cfg.ff_size,
                                      cfg.dropout, cfg.max_len, init)

        if cfg.shared_encoder:
            shared = encoder(self.child_path("shared.encoder")) if self.kinds else None
            self.encoders = {k: shared for k in self.kinds}
        else:
            self.encoders = {k: encoder(self.child_path(f"{k}.encoder")) for k in self.kinds}
        self.null = {k: self.param(f"{k}.null", init.normal(self.child_path(f"{k}.null"), (cfg.hidden,), 0.1))
                     for k in self.kinds}

    def item_encode(self, kind: str, seq: PaddedSequence) -> Tensor:
        return self.items[kind](seq)

    def contextualize(self, kind: str, x: Tensor, seq: PaddedSequence, ctx: Context,
                      causal: bool = False) -> Tensor:
        return self.encoders[kind](x, ctx, lengths=seq.lengths, causal=causal, padded=True)

    def pool(self, kind: str, h: Tensor, lengths: np.ndarray) -> Tensor:
        """Pooled summary with the learned null vector for empty sequences."""
        b = h.shape[0]
        pooled = masked_mean(h, lengths) if self.cfg.pooling == "mean" else select_last(h, lengths)
        empty = (lengths == 0).astype(np.float64)[:, None]
        if not empty.any():
            return pooled
        fill = ag.matmul(Tensor(empty), ag.reshape(self.null[kind], (1, self.cfg.hidden)))
        return ag.add(pooled, fill) if b else pooled

    def summary(self, kind: str, seq: PaddedSequence, ctx: Context, encoded: Tensor | None = None) -> Tensor:
        x = self.item_encode(kind, seq) if encoded is None else encoded
        return self.pool(kind, self.contextualize(kind, x, seq, ctx), seq.lengths)

    def causal_context(self, kind: str, seq: PaddedSequence, ctx: Context,
                       encoded: Tensor | None = None) -> Tensor:
        x = self.item_encode(kind, seq) if encoded is None else encoded
        return self.contextualize(kind, x, seq, ctx, causal=True)

    def null_summary(self, kind: str, batch_size: int) -> Tensor:
        return ag.matmul(Tensor(np.ones((batch_size, 1))), ag.reshape(self.null[kind], (1, self.cfg.hidden)))

    def summaries(self, sequences: dict[str, PaddedSequence], ctx: Context,
                  batch_size: int) -> dict[str, Tensor]:
        """Summaries for every configured kind in fixed order; absent kinds get the null vector."""
        out = {}
        for k in self.kinds:
            seq = sequences.get(k)
            if seq is None or not seq.lengths.any():
                out[k] = self.null_summary(k, batch_size)
            else:
                out[k] = self.summary(k, seq, ctx)
        return out
