"""Self-supervised sequence objective: sampled-softmax InfoNCE over future or masked actions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Context, Initializer, Tensor
from .config import SSL_GROUPS, SslConfig
from .data import PaddedSequence
from .sequence import SequenceModel


@dataclass
class SslTargets:
    """Flattened targets of one sequence kind across a batch.

    ``rows``/``positions`` locate each target; ``contexts`` is the position
    whose context vector predicts it; ``negatives`` are flat indices into
    the (B*L) item pool.
    """

    rows: np.ndarray
    positions: np.ndarray
    contexts: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def nal_positions(length: int, num_pos: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets are the last min(num_pos, length-1) positions; context sits one step earlier."""
    n = min(num_pos, length - 1)
    if n <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    targets = np.arange(length - n, length, dtype=np.int64)
    return targets, targets - 1


def mlm_positions(length: int, num_pos: int, rng: np.random.Generator) -> np.ndarray:
    n = min(num_pos, length)
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(length, size=n, replace=False)).astype(np.int64)


def _rng(seed: int, kind: str) -> np.random.Generator:
    tag = sum((i + 1) * ord(c) for i, c in enumerate(kind))
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))


def sample_targets(seq: PaddedSequence, cfg: SslConfig, seed: int, kind: str = "") -> SslTargets:
    """Choose target positions and in-batch negatives for one kind.

    Negatives are drawn uniformly from the batch's valid items of the same
    kind whose id differs from the target id.  A target without any eligible
    negative is dropped.
    """
    rng = _rng(seed, kind)
    b, l = seq.items.shape
    rows, pos, ctx = [], [], []
    for r in range(b):
        n = int(seq.lengths[r])
        if cfg.objective == "NAL":
            t, c = nal_positions(n, cfg.num_pos)
        else:
            t = mlm_positions(n, cfg.num_pos, rng)
            c = t
        rows.append(np.full(len(t), r, dtype=np.int64))
        pos.append(t)
        ctx.append(c)
    rows_a = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    pos_a = np.concatenate(pos) if pos else np.zeros(0, dtype=np.int64)
    ctx_a = np.concatenate(ctx) if ctx else np.zeros(0, dtype=np.int64)
    valid = (np.arange(l)[None, :] < seq.lengths[:, None]).reshape(-1)
    pool = np.flatnonzero(valid)
    pool_ids = seq.items.reshape(-1)[pool]
    keep = np.ones(len(rows_a), dtype=bool)
    negs = np.zeros((len(rows_a), cfg.num_neg), dtype=np.int64)
    if len(rows_a):
        order = np.argsort(pool_ids, kind="stable")
        sorted_ids = pool_ids[order]
        target_ids = seq.items[rows_a, pos_a]
        lo = np.searchsorted(sorted_ids, target_ids, side="left")
        hi = np.searchsorted(sorted_ids, target_ids, side="right")
        n_ok = len(pool) - (hi - lo)
        keep = n_ok > 0
        # draw in the id-sorted pool with the target's id block skipped
        u = rng.integers(0, np.maximum(n_ok, 1)[:, None], size=(len(rows_a), cfg.num_neg))
        shifted = np.where(u >= lo[:, None], u + (hi - lo)[:, None], u)
        negs = pool[order[np.minimum(shifted, max(len(pool) - 1, 0))]] if len(pool) else negs
    return SslTargets(rows_a[keep], pos_a[keep], ctx_a[keep], negs[keep])


def info_nce(context: Tensor, target: Tensor, negatives: Tensor) -> Tensor:
    """Per-row -log(e^{x.x_t} / (e^{x.x_t} + sum e^{x.x_-})) for (N,H), (N,H), (N,K,H) inputs."""
    if context.shape != target.shape or negatives.ndim != 3 or negatives.shape[0] != context.shape[0] \
            or negatives.shape[2] != context.shape[1]:
        raise ag.ShapeError(f"info_nce shapes differ: context {context.shape}, target {target.shape}, "
                            f"negatives {negatives.shape}")
    n, h = context.shape
    pos = ag.reshape(ag.sum_pool(ag.mul(context, target), axis=1), (n, 1))
    neg = ag.reshape(ag.matmul(ag.reshape(context, (n, 1, h)), ag.transpose(negatives, (0, 2, 1))),
                     (n, negatives.shape[1]))
    logits = ag.concat([pos, neg], axis=1)
    return ag.scale(ag.slice_(ag.log_softmax(logits, axis=1), (slice(None), 0)), -1.0)


def info_nce_value(context, target, negatives) -> float:
    """Scalar InfoNCE for one context/target pair and a (K, H) negative list."""
    c = Tensor(np.atleast_2d(np.asarray(context, dtype=np.float64)))
    t = Tensor(np.atleast_2d(np.asarray(target, dtype=np.float64)))
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.ndim == 1:
        negs = negs[None, :]
    return float(info_nce(c, t, Tensor(negs[None, :, :])).data[0])


def _gather(x: Tensor, rows: np.ndarray, positions: np.ndarray) -> Tensor:
    b, l, h = x.shape
    return ag.embedding(ag.reshape(x, (b * l, h)), rows * l + positions)


TARGET_BUCKETS = 1024


class SslLoss:
    """Sum over batch rows and kinds of the per-target mean InfoNCE, grouped by weight.

    Targets are the item encodings by default; ``separate_target_table``
    swaps in a per-kind table indexed by item id modulo TARGET_BUCKETS.
    """

    def __init__(self, cfg: SslConfig, model: SequenceModel, init: Initializer | None = None):
        self.cfg, self.model = cfg, model
        self.target_table = {}
        if cfg.separate_target_table:
            init = init or Initializer(0)
            h = model.cfg.hidden
            self.target_table = {k: model.param(f"{k}.target_table",
                                                init.normal(model.child_path(f"{k}.target_table"),
                                                            (TARGET_BUCKETS, h), 0.1))
                                 for k in model.kinds}
            model.target_tables = self.target_table
        if cfg.objective == "MLM":
            h = model.cfg.hidden
            self.mask_token = {k: model.param(f"{k}.mask_token", np.zeros(h)) for k in model.kinds}
            model.mask_tokens = self.mask_token

    def weight(self, kind: str) -> float:
        return self.cfg.org_weight if SSL_GROUPS[kind] == "org" else self.cfg.ads_weight

    def kind_loss(self, kind: str, seq: PaddedSequence, encoded: Tensor, ctx: Context,
                  seed: int) -> Tensor | None:
        """Unweighted sum over rows of the per-row mean InfoNCE, or None without targets."""
        tg = sample_targets(seq, self.cfg, seed, kind)
        if not len(tg):
            return None
        b, l, h = encoded.shape
        if self.cfg.objective == "NAL":
            contexts = self.model.causal_context(kind, seq, ctx, encoded=encoded)
        else:
            flags = np.zeros((b, l, 1))
            flags[tg.rows, tg.positions] = 1.0
            fill = ag.matmul(Tensor(flags), ag.reshape(self.mask_token[kind], (1, h)))
            keep = Tensor(np.broadcast_to(1.0 - flags, (b, l, h)).copy())
            masked = ag.add(ag.mul(encoded, keep), fill)
            contexts = self.model.contextualize(kind, masked, seq, ctx)
        x = _gather(contexts, tg.rows, tg.contexts)
        if kind in self.target_table:
            table = self.target_table[kind]
            xt = ag.embedding(table, seq.items[tg.rows, tg.positions] % TARGET_BUCKETS)
            neg_ids = seq.items.reshape(-1)[tg.negatives.reshape(-1)] % TARGET_BUCKETS
            negs = ag.reshape(ag.embedding(table, neg_ids), (len(tg), tg.negatives.shape[1], h))
        else:
            xt = _gather(encoded, tg.rows, tg.positions)
            flat = ag.reshape(encoded, (b * l, h))
            negs = ag.reshape(ag.embedding(flat, tg.negatives.reshape(-1)), (len(tg), tg.negatives.shape[1], h))
        per_target = info_nce(x, xt, negs)
        counts = np.bincount(tg.rows, minlength=b).astype(np.float64)
        w = 1.0 / counts[tg.rows]
        return ag.sum_pool(ag.mul(per_target, Tensor(w)))

    def __call__(self, sequences: dict[str, PaddedSequence], encoded: dict[str, Tensor], ctx: Context,
                 seed: int) -> dict[str, Tensor]:
        """Unweighted per-group losses (keys ``org``/``ads``).

        Kinds whose group weight is 0 are skipped; groups without any target
        are absent from the result.
        """
        out: dict[str, Tensor] = {}
        for i, kind in enumerate(self.model.kinds):
            if self.weight(kind) == 0 or kind not in encoded:
                continue
            loss = self.kind_loss(kind, sequences[kind], encoded[kind], ctx, seed * 8 + i)
            if loss is None:
                continue
            g = SSL_GROUPS[kind]
            out[g] = loss if g not in out else ag.add(out[g], loss)
        return out

    def group_weight(self, group: str) -> float:
        return self.cfg.org_weight if group == "org" else self.cfg.ads_weight
