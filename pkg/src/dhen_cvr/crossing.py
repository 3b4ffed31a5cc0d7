"""Feature-crossing modules behind one layer interface.

Every module reads a :class:`CrossingInput` (tokens B x L x D with a flat
B x (L*D) view) and returns a flat B x W tensor, so a DHEN layer can sum
the outputs of any mix of modules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Context, Initializer, LayerNorm, Linear, Module, Tensor
from .config import (DCNConfig, MaskNetConfig, MLPConfig, ModuleConfig, TransformerConfig,
                     module_name, validate_module)
from .errors import ConfigError

MASK_VALUE = -1e30


@dataclass
class CrossingInput:
    tokens: Tensor

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def flat(self) -> Tensor:
        b, l, d = self.tokens.shape
        return ag.reshape(self.tokens, (b, l * d))


class MLP(Module):
    """Affine/ReLU chain over the last axis; no activation after the final layer."""

    def __init__(self, path: str, d_in: int, widths: list[int], init: Initializer):
        super().__init__(path)
        if not widths:
            raise ConfigError("MLP needs at least one width", path)
        if any(w < 1 for w in widths):
            raise ConfigError(f"MLP widths must be >= 1, got {widths}", path)
        dims = [d_in] + list(widths)
        self.layers = [Linear(self.child_path(f"fc{i}"), dims[i], dims[i + 1], init)
                       for i in range(len(widths))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ag.relu(x)
        return x


class MLPCrossing(Module):
    def __init__(self, path: str, cfg: MLPConfig, n_tokens: int, token_dim: int, width: int,
                 init: Initializer):
        super().__init__(path)
        self.mlp = MLP(self.child_path("mlp"), n_tokens * token_dim, list(cfg.widths) + [width], init)

    def __call__(self, inp: CrossingInput, ctx: Context) -> Tensor:
        return self.mlp(inp.flat)


class DCNv2(Module):
    """Low-rank cross network: x_{l+1} = x0 * (x_l V U^T + b) + x_l, then affine to W."""

    def __init__(self, path: str, cfg: DCNConfig, n_tokens: int, token_dim: int, width: int,
                 init: Initializer):
        super().__init__(path)
        d = n_tokens * token_dim
        if cfg.rank > d:
            raise ConfigError(f"rank {cfg.rank} exceeds input dim {d}", f"{path}.rank")
        self.d, self.rank = d, cfg.rank
        std = 1.0 / math.sqrt(d)
        self.u = [self.param(f"cross{i}.u", init.normal(self.child_path(f"cross{i}.u"), (d, cfg.rank), std))
                  for i in range(cfg.layers)]
        self.v = [self.param(f"cross{i}.v", init.normal(self.child_path(f"cross{i}.v"), (d, cfg.rank), std))
                  for i in range(cfg.layers)]
        self.b = [self.param(f"cross{i}.bias", np.zeros(d)) for i in range(cfg.layers)]
        self.out = Linear(self.child_path("out"), d, width, init)

    def cross(self, x0: Tensor) -> Tensor:
        x = x0
        for u, v, b in zip(self.u, self.v, self.b):
            w_x = ag.add(ag.matmul(ag.matmul(x, v), ag.transpose(u, (1, 0))), b)
            x = ag.add(ag.mul(x0, w_x), x)
        return x

    def __call__(self, inp: CrossingInput, ctx: Context) -> Tensor:
        return self.out(self.cross(inp.flat))


class MaskBlock(Module):
    """ReLU(LN(mask(x) * (x V))) with a two-layer bottleneck instance mask."""

    def __init__(self, path: str, d_in: int, hidden: int, aggregation: int, init: Initializer):
        super().__init__(path)
        self.agg = Linear(self.child_path("mask_agg"), d_in, aggregation, init)
        self.proj = Linear(self.child_path("mask_proj"), aggregation, hidden, init)
        self.v = Linear(self.child_path("hidden"), d_in, hidden, init, bias=False)
        self.norm = LayerNorm(self.child_path("norm"), hidden)

    def mask(self, x: Tensor) -> Tensor:
        return self.proj(ag.relu(self.agg(x)))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.relu(self.norm(ag.mul(self.mask(x), self.v(x))))


class MaskNet(Module):
    """Parallel mask blocks over the same flattened input, concatenated then mapped to W."""

    def __init__(self, path: str, cfg: MaskNetConfig, n_tokens: int, token_dim: int, width: int,
                 init: Initializer):
        super().__init__(path)
        d = n_tokens * token_dim
        agg = cfg.aggregation_dim or 2 * cfg.hidden
        self.dropout = cfg.dropout
        self.blocks = [MaskBlock(self.child_path(f"block{i}"), d, cfg.hidden, agg, init)
                       for i in range(cfg.blocks)]
        self.out = Linear(self.child_path("out"), cfg.blocks * cfg.hidden, width, init)

    def __call__(self, inp: CrossingInput, ctx: Context) -> Tensor:
        x = inp.flat
        parts = []
        for block in self.blocks:
            h = block(x)
            if ctx.train and self.dropout > 0:
                h = ag.dropout(h, self.dropout, True, ctx.dropout_seed())
            parts.append(h)
        return self.out(parts[0] if len(parts) == 1 else ag.concat(parts, axis=-1))


def attention_mask(batch: int, heads: int, length: int, lengths: np.ndarray | None,
                   causal: bool) -> np.ndarray | None:
    """Additive mask: 0 where attention is allowed, a large negative constant elsewhere."""
    allowed = None
    if causal:
        allowed = np.tril(np.ones((length, length), dtype=bool))
    if lengths is not None:
        keys = np.arange(length)[None, :] < lengths[:, None]
        full = np.broadcast_to(keys[:, None, None, :], (batch, heads, length, length))
        allowed = full if allowed is None else full & allowed
    if allowed is None:
        return None
    return np.where(allowed, 0.0, MASK_VALUE)


class EncoderLayer(Module):
    """Pre-LN block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, path: str, hidden: int, heads: int, ff_size: int, dropout: float,
                 init: Initializer):
        super().__init__(path)
        self.hidden, self.heads, self.dropout = hidden, heads, dropout
        self.ln1 = LayerNorm(self.child_path("ln1"), hidden)
        self.wq = Linear(self.child_path("attn.wq"), hidden, hidden, init)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.wk = Linear(self.child_path("attn.wk"), hidden, hidden, init, bias=False)
        self.wv = Linear(self.child_path("attn.wv"), hidden, hidden, init)
        self.wo = Linear(self.child_path("attn.wo"), hidden, hidden, init)
        self.ln2 = LayerNorm(self.child_path("ln2"), hidden)
        self.ff1 = Linear(self.child_path("ffn.fc0"), hidden, ff_size, init)
        self.ff2 = Linear(self.child_path("ffn.fc1"), ff_size, hidden, init)

    def _split(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return ag.transpose(ag.reshape(x, (b, l, self.heads, self.hidden // self.heads)), (0, 2, 1, 3))

    def _drop(self, x: Tensor, ctx: Context) -> Tensor:
        if ctx.train and self.dropout > 0:
            return ag.dropout(x, self.dropout, True, ctx.dropout_seed())
        return x

    def attention(self, x: Tensor, mask: np.ndarray | None, ctx: Context) -> Tensor:
        b, l, _ = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(self.hidden // self.heads))
        if mask is not None:
            scores = ag.add(scores, Tensor(mask))
        weights = self._drop(ag.softmax(scores, axis=-1), ctx)
        out = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (b, l, self.hidden))
        return self.wo(out)

    def __call__(self, x: Tensor, mask: np.ndarray | None, ctx: Context) -> Tensor:
        x = ag.add(x, self._drop(self.attention(self.ln1(x), mask, ctx), ctx))
        h = self.ff2(ag.relu(self.ff1(self.ln2(x))))
        return ag.add(x, self._drop(h, ctx))


class TransformerEncoder(Module):
    """Token lift to ``hidden`` plus learned positions, then pre-LN encoder layers."""

    def __init__(self, path: str, d_in: int, hidden: int, layers: int, heads: int, ff_size: int,
                 dropout: float, max_positions: int, init: Initializer):
        super().__init__(path)
        if hidden % heads:
            raise ConfigError(f"heads ({heads}) must divide hidden ({hidden})", path)
        self.hidden, self.heads, self.max_positions = hidden, heads, max_positions
        self.lift = Linear(self.child_path("lift"), d_in, hidden, init)
        self.positions = self.param("positions", init.normal(self.child_path("positions"),
                                                             (max_positions, hidden), 0.02))
        self.layers = [EncoderLayer(self.child_path(f"layer{i}"), hidden, heads, ff_size, dropout, init)
                       for i in range(layers)]

    def __call__(self, x: Tensor, ctx: Context, lengths: np.ndarray | None = None,
                 causal: bool = False, padded: bool = False) -> Tensor:
        """Per-position outputs (B, L, hidden).

        ``padded`` declares that rows have different valid lengths; it then
        requires ``lengths`` so padded keys can be masked out.
        """
        b, l, _ = x.shape
        if padded and lengths is None:
            raise ValueError(f"{self.path}: padded input requires a lengths vector to build the padding mask")
        if l > self.max_positions:
            raise ag.ShapeError(f"{self.path}: sequence length {l} exceeds {self.max_positions} positions")
        if lengths is not None:
            lengths = np.asarray(lengths, dtype=np.int64)
            if lengths.shape != (b,):
                raise ag.ShapeError(f"{self.path}: lengths shape {lengths.shape} != ({b},)")
            if (lengths == l).all():
                lengths = None
        h = ag.add(self.lift(x), ag.slice_(self.positions, (slice(0, l),)))
        mask = attention_mask(b, self.heads, l, lengths, causal)
        for layer in self.layers:
            h = layer(h, mask, ctx)
        return h


def masked_mean(x: Tensor, lengths: np.ndarray | None) -> Tensor:
    """Mean over axis 1 of a (B, L, H) tensor counting only the first lengths[b] positions."""
    b, l, hdim = x.shape
    if lengths is None:
        return ag.mean_pool(x, axis=1)
    lengths = np.asarray(lengths)
    valid = (np.arange(l)[None, :] < lengths[:, None]).astype(np.float64)
    weights = valid / np.maximum(lengths, 1)[:, None]
    w = Tensor(np.broadcast_to(weights[:, :, None], (b, l, hdim)).copy())
    return ag.sum_pool(ag.mul(x, w), axis=1)


class TransformerCrossing(Module):
    def __init__(self, path: str, cfg: TransformerConfig, n_tokens: int, token_dim: int, width: int,
                 init: Initializer):
        super().__init__(path)
        if n_tokens > cfg.max_positions:
            raise ConfigError(f"{n_tokens} tokens exceed max_positions {cfg.max_positions}", path)
        self.encoder = TransformerEncoder(self.child_path("encoder"), token_dim, cfg.hidden, cfg.layers,
                                          cfg.heads, cfg.ff_size, cfg.dropout, cfg.max_positions, init)
        self.out = Linear(self.child_path("out"), cfg.hidden, width, init)

    def __call__(self, inp: CrossingInput, ctx: Context) -> Tensor:
        return self.out(ag.mean_pool(self.encoder(inp.tokens, ctx), axis=1))


_BUILDERS = {
    MLPConfig: MLPCrossing,
    DCNConfig: DCNv2,
    MaskNetConfig: MaskNet,
    TransformerConfig: TransformerCrossing,
}


def build_crossing(path: str, cfg: ModuleConfig, n_tokens: int, token_dim: int, width: int,
                   init: Initializer) -> Module:
    """Construct a crossing module; its parameters live under ``path.<name>``."""
    validate_module(cfg, path)
    cls = _BUILDERS.get(type(cfg))
    if cls is None:
        raise ConfigError(f"unknown module config {type(cfg).__name__}", path)
    return cls(f"{path}.{module_name(cfg)}" if path else module_name(cfg), cfg, n_tokens, token_dim,
               width, init)
