"""Ranking metrics, cost-per-acquisition and model cost measurement."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .autograd import EVAL, FlopCounter


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic P(s+ > s-) + P(s+ = s-)/2 via mid-ranks."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (delta recall) x precision."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # evaluate only at the last index of each tied score block
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def cpa(total_cost: float, conversions: int) -> float:
    if conversions < 1:
        raise UndefinedMetricError("CPA is undefined without conversions")
    return float(total_cost) / conversions


def linear_flops(d_in: int, d_out: int, bias: bool = True) -> int:
    return 2 * d_in * d_out + (d_out if bias else 0)


def analytic_flops(model, batch) -> int:
    """Operation count of one eval forward, per example."""
    one = batch if batch.size == 1 else _first(batch)
    with FlopCounter() as fc:
        model.forward(one, EVAL)
    return fc.flops


def _first(batch):
    from .data import Batch

    def cut(d):
        return {k: v[:1] for k, v in d.items()}

    seqs = {}
    for k, s in batch.sequences.items():
        seqs[k] = type(s)(s.items[:1], s.actions[:1], s.timestamps[:1], s.embeddings[:1], s.advertisers[:1],
                          s.lengths[:1])
    return Batch(batch.user_ids[:1], batch.ad_ids[:1], cut(batch.dense), cut(batch.categorical),
                 cut(batch.pretrained), seqs, cut(batch.labels), cut(batch.masks))


@dataclass
class Throughput:
    examples_per_sec: float
    stdev: float
    flops_per_example: int
    parameters: int
    timings: list[float] = field(default_factory=list)


def measure_throughput(model, batch, repetitions: int = 3) -> Throughput:
    """Median wall-clock examples/sec over ``repetitions`` timed runs after one warmup."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    model.predict(batch)
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.predict(batch)
        rates.append(batch.size / max(time.perf_counter() - t0, 1e-12))
    return Throughput(statistics.median(rates), statistics.stdev(rates), analytic_flops(model, batch),
                      model.num_parameters(), rates)


# --------------------------------------------------------------------------- reports


REPORT_COLUMNS = ("arm", "head", "roc_auc", "pr_auc", "lift", "flops", "params")


@dataclass
class HeadMetrics:
    head: str
    examples: int
    positives: int
    roc_auc: float | None
    pr_auc: float | None

    @property
    def defined(self) -> bool:
        return self.roc_auc is not None


@dataclass
class EvalReport:
    heads: dict[str, HeadMetrics]
    examples: int
    flops: int = 0
    params: int = 0
    data_hash: str = ""

    def to_dict(self) -> dict:
        return {"examples": self.examples, "flops": self.flops, "params": self.params,
                "data_hash": self.data_hash, "heads": {k: asdict(v) for k, v in self.heads.items()}}

    def records(self) -> list[dict]:
        return [{"head": h.head, "examples": h.examples, "positives": h.positives,
                 "roc_auc": _fmt(h.roc_auc), "pr_auc": _fmt(h.pr_auc)} for h in self.heads.values()]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "examples", "positives", "roc_auc", "pr_auc"])
        for r in self.records():
            w.writerow([r["head"], r["examples"], r["positives"], r["roc_auc"], r["pr_auc"]])
        return buf.getvalue()

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records())


def _fmt(v):
    return "undefined" if v is None else float(v)


def head_metrics(name: str, scores: np.ndarray, labels: np.ndarray) -> HeadMetrics:
    pos = int(np.sum(labels))
    try:
        roc = roc_auc(scores, labels)
        pr = pr_auc(scores, labels)
    except UndefinedMetricError:
        roc = pr = None
    return HeadMetrics(name, int(len(labels)), pos, roc, pr)


def evaluate(model, partitions: Sequence, batch_size: int = 1024, max_len: int | None = None) -> EvalReport:
    """Serving-mode scores over all examples, then per-head ROC-AUC and PR-AUC."""
    from .data import hash_partitions

    max_len = max_len or model.cfg.sequence.max_len
    scores: dict[str, list] = {h: [] for h in model.serving_heads}
    labels: dict[str, list] = {h: [] for h in model.serving_heads}
    total = 0
    for part in partitions:
        for start in range(0, len(part), batch_size):
            idx = np.arange(start, min(start + batch_size, len(part)))
            batch = part.batch(idx, max_len)
            probs = model.predict(batch)
            for h in model.serving_heads:
                y = batch.labels[h]
                keep = batch.masks[h] if h in batch.masks else np.ones(len(y), dtype=bool)
                scores[h].append(probs[h][keep])
                labels[h].append(y[keep])
            total += len(idx)
    heads = {h: head_metrics(h, np.concatenate(scores[h]) if scores[h] else np.zeros(0),
                             np.concatenate(labels[h]) if labels[h] else np.zeros(0))
             for h in model.serving_heads}
    flops = analytic_flops(model, partitions[0].batch(np.arange(1), max_len)) if partitions and len(partitions[0]) else 0
    return EvalReport(heads, total, flops, model.num_parameters(), hash_partitions(partitions))


def mean_defined(values: Sequence[float | None]) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
