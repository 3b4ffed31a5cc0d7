"""Multitask objective, the training loop and model checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .autograd import Adam, Context, NonFiniteError, Tape, Tensor
from .config import RunConfig, dumps, from_dict
from .data import Batch, Partition
from .errors import DataError, DivergenceError
from .model import CvrModel, build_model


def bce(p: float, y: float) -> float:
    """Binary cross-entropy of a probability, via the logit form."""
    p = min(max(float(p), 1e-12), 1.0 - 1e-12)
    z = math.log(p) - math.log1p(-p)
    return float(ag.bce_with_logits(Tensor(np.array([z])), np.array([float(y)])).data[0])


@dataclass
class LossReport:
    bce: dict[str, float]
    head_weights: dict[str, float]
    ssl: dict[str, float]
    ssl_weights: dict[str, float]
    total: float

    def reconstruct(self) -> float:
        return (sum(self.head_weights[h] * v for h, v in self.bce.items())
                + sum(self.ssl_weights[g] * v for g, v in self.ssl.items()))

    def to_dict(self) -> dict:
        return {"total": self.total, "bce": self.bce, "ssl": self.ssl}


def mix_seed(*parts: int) -> int:
    h = hashlib.blake2b(":".join(str(int(p)) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


def multitask_loss(model: CvrModel, batch: Batch, ctx: Context, ssl_seed: int = 0) -> tuple[Tensor, LossReport]:
    """sum_h w_h * mean BCE_h + sum_g w_g * SSL_g.

    Rows whose label is masked out contribute zero to their head's mean.
    """
    out = model.forward(batch, ctx)
    b = batch.size
    terms: list[Tensor] = []
    bce_vals, weights = {}, {}
    for name, head in model.heads.items():
        if name not in batch.labels:
            raise DataError(f"batch has no labels for head {name!r}")
        y = batch.labels[name]
        per_row = ag.bce_with_logits(out.logits[name], y)
        w_rows = np.full(b, 1.0 / b)
        if name in batch.masks:
            w_rows = w_rows * batch.masks[name]
        mean = ag.sum_pool(ag.mul(per_row, Tensor(w_rows)))
        bce_vals[name] = float(mean.data)
        weights[name] = head.weight
        terms.append(ag.scale(mean, head.weight))
    ssl_vals, ssl_w = {}, {}
    if model.ssl is not None:
        groups = model.ssl(batch.sequences, out.encoded, ctx, ssl_seed)
        for g, t in groups.items():
            w = model.ssl.group_weight(g)
            ssl_vals[g] = float(t.data)
            ssl_w[g] = w
            terms.append(ag.scale(t, w))
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return total, LossReport(bce_vals, weights, ssl_vals, ssl_w, float(total.data))


@dataclass
class Cursor:
    """Position of the next mini-batch: partition day, epoch and batch index."""

    day: int | None = None
    epoch: int = 0
    batch: int = 0
    finished: bool = True

    def to_dict(self) -> dict:
        return {"day": self.day, "epoch": self.epoch, "batch": self.batch, "finished": self.finished}

    @classmethod
    def from_dict(cls, d: dict) -> "Cursor":
        return cls(d.get("day"), int(d.get("epoch", 0)), int(d.get("batch", 0)), bool(d.get("finished", True)))


@dataclass
class TrainState:
    run: RunConfig
    model: CvrModel
    optimizer: Adam
    step: int = 0
    cursor: Cursor = field(default_factory=Cursor)
    trace: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, run: RunConfig) -> "TrainState":
        model = build_model(run)
        t = run.training
        return cls(run, model, Adam(model.parameters(), lr=t.lr, betas=(t.beta1, t.beta2), eps=t.eps))


def shuffle_order(n: int, seed: int, day: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, mix_seed(day, epoch)]))
    return rng.permutation(n)


def _lr(cfg, step: int) -> float:
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def train(state: TrainState, partitions: Sequence[Partition], max_steps: int | None = None,
          eval_partitions: Sequence[Partition] | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainState:
    """Shuffled mini-batch Adam over time-ordered partitions.

    Training is deterministic in (seed, partitions).  With ``max_steps`` it
    stops early and leaves a cursor, so resuming from that state on the same
    partitions reproduces an uninterrupted run bit-exactly.  Resuming from a
    finished state starts a new pass (incremental training on new days).
    """
    cfg = state.run.training
    days = [p.day for p in partitions]
    if days != sorted(days):
        raise DataError(f"partitions must be time-ordered, got days {days}")
    model = state.model
    if not model.features.fitted:
        model.features.fit(partitions)
    cursor = state.cursor
    resume = not cursor.finished and cursor.day is not None
    max_len = state.run.model.sequence.max_len
    taken = 0

    def emit(rec: dict) -> None:
        state.trace.append(rec)
        if on_record is not None:
            on_record(rec)

    for part in partitions:
        if resume and part.day < cursor.day:
            continue
        n = len(part)
        n_batches = math.ceil(n / cfg.batch_size) if n else 0
        start_epoch = cursor.epoch if resume and part.day == cursor.day else 0
        losses = []
        for epoch in range(start_epoch, cfg.epochs):
            order = shuffle_order(n, cfg.seed, part.day, epoch)
            first = cursor.batch if resume and part.day == cursor.day and epoch == start_epoch else 0
            for bi in range(first, n_batches):
                if max_steps is not None and taken >= max_steps:
                    state.cursor = Cursor(part.day, epoch, bi, finished=False)
                    return state
                idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs two rows in train mode
                report = _step(state, part.batch(idx, max_len))
                losses.append(report.total)
                taken += 1
        resume = False
        emit({"type": "partition", "day": part.day, "step": state.step,
              "mean_loss": float(np.mean(losses)) if losses else None})
        if eval_partitions:
            from .metrics import evaluate
            rep = evaluate(model, eval_partitions)
            emit({"type": "eval", "day": part.day, "step": state.step,
                  "heads": {h: {"roc_auc": m.roc_auc, "pr_auc": m.pr_auc} for h, m in rep.heads.items()}})
    state.cursor = Cursor(partitions[-1].day if partitions else None, 0, 0, finished=True)
    return state


def _step(state: TrainState, batch: Batch):
    cfg = state.run.training
    next_step = state.step + 1
    ctx = Context(train=True, seed=cfg.seed, step=next_step)
    model = state.model
    model.zero_grad()
    try:
        with Tape() as tape:
            loss, report = multitask_loss(model, batch, ctx, ssl_seed=mix_seed(cfg.seed, next_step))
        if not math.isfinite(report.total) or report.total > cfg.max_loss:
            raise DivergenceError(f"loss {report.total} at step {next_step}", state.step)
        tape.backward(loss)
    except NonFiniteError as exc:
        raise DivergenceError(f"non-finite values at step {next_step}: {exc}", state.step) from exc
    for p in model.parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for {p.name} at step {next_step}", state.step)
    state.optimizer.step(lr=_lr(cfg, next_step))
    state.step = next_step
    return report


# --------------------------------------------------------------------------- checkpoints


def canonical_config(run: RunConfig) -> dict:
    """Config as stored in checkpoints; one parse round trip fixes int/float spellings."""
    return json.loads(dumps(from_dict(RunConfig, json.loads(dumps(run)))))


def to_checkpoint(state: TrainState) -> ckpt_io.Checkpoint:
    model, opt = state.model, state.optimizer
    header = {
        "config": canonical_config(state.run),
        "step": state.step,
        "adam_t": opt.t,
        "cursor": state.cursor.to_dict(),
        "seed": state.run.training.seed,
        "serving_heads": model.serving_heads,
        "parameters": model.parameter_names(),
    }
    params = {n: p.data for n, p in model.named_parameters().items()}
    return ckpt_io.Checkpoint(header, params, dict(model.buffers()), dict(opt.m), dict(opt.v),
                              float32=state.run.training.float32_checkpoint)


def save_checkpoint(state: TrainState, path: str | Path) -> str:
    return ckpt_io.save(to_checkpoint(state), path)


def state_from_checkpoint(ck: ckpt_io.Checkpoint, run: RunConfig | None = None) -> TrainState:
    """Rebuild a training state; ``run`` overrides the stored config (it must be shape-compatible)."""
    stored = from_dict(RunConfig, ck.header["config"]).validate()
    run = run or stored
    state = TrainState.fresh(run)
    try:
        ag.load_state(state.model, ck.params, ck.buffers)
    except ValueError as exc:
        raise ckpt_io.CheckpointError(f"warm start is incompatible: {exc}") from exc
    names = state.model.named_parameters()
    for n, a in ck.adam_m.items():
        if n in names:
            state.optimizer.m[n][...] = a
    for n, a in ck.adam_v.items():
        if n in names:
            state.optimizer.v[n][...] = a
    state.optimizer.t = int(ck.header.get("adam_t", 0))
    state.step = ck.step
    state.cursor = Cursor.from_dict(ck.header.get("cursor", {}))
    return state


def load_checkpoint(path: str | Path, run: RunConfig | None = None) -> TrainState:
    return state_from_checkpoint(ckpt_io.load(path), run)


def load_model(path: str | Path) -> CvrModel:
    return load_checkpoint(path).model
