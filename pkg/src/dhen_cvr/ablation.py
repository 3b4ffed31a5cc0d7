"""Ablation plans: train several model arms on identical data and compare AUC lifts."""

from __future__ import annotations

import copy
import csv
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .config import (DCNConfig, LayerConfig, MaskNetConfig, MLPConfig, RunConfig, SslConfig,
                     TransformerConfig, USER_CATEGORIES)
from .data import Partition, hash_partitions
from .errors import ConfigError
from .metrics import REPORT_COLUMNS, EvalReport, evaluate, mean_defined
from .synthetic import generate_partitions
from .training import TrainState, train

PLANS = ("crossing", "dhen-depth", "ssl", "feature-category")

MODULE_DEFAULTS = {"mlp": MLPConfig, "dcn_v2": DCNConfig, "masknet": MaskNetConfig, "transformer": TransformerConfig}
CATEGORY_LABELS = {"demographic": "Demographic", "counting": "Counting", "categorical": "Categorical",
                   "pretrained": "Pre-trained Embedding", "sequence": "Sequence"}


@dataclass
class Arm:
    name: str
    run: RunConfig


@dataclass
class Plan:
    name: str
    baseline: str
    metric: str  # "roc_auc" or "pr_auc"
    arms: list[Arm]


def module_template(run: RunConfig, kind: str):
    """First module of ``kind`` in the base model, else the default for that kind."""
    for layer in run.model.dhen.layers:
        for m in layer.modules:
            if m.kind == kind:
                t = copy.deepcopy(m)
                t.name = None
                return t
    return MODULE_DEFAULTS[kind]()


def _with_layers(run: RunConfig, layers: list[list], **module_overrides) -> RunConfig:
    out = copy.deepcopy(run)
    base = run.model.dhen.layers
    width, reshape = base[0].width, base[0].reshape_dim
    new = []
    for kinds in layers:
        mods = []
        for kind in kinds:
            m = module_template(run, kind)
            for k, v in module_overrides.get(kind, {}).items():
                setattr(m, k, v)
            mods.append(m)
        new.append(LayerConfig(modules=mods, width=width, reshape_dim=reshape))
    out.model.dhen.layers = new
    return out


def _crossing(run: RunConfig) -> Plan:
    depth = len(run.model.dhen.layers)
    arms = [Arm("mlp", _with_layers(run, [["mlp"]] * depth))]
    for kind in ("dcn_v2", "masknet", "transformer"):
        arms.append(Arm(kind, _with_layers(run, [[kind]] * depth)))
    arms.append(Arm("mlp+transformer/mlp+masknet",
                    _with_layers(run, [["mlp", "transformer"], ["mlp", "masknet"]])))
    return Plan("crossing", "mlp", "roc_auc", arms)


def _depth(run: RunConfig) -> Plan:
    three = ["mlp", "dcn_v2", "transformer"]
    four = ["mlp", "dcn_v2", "masknet", "transformer"]
    arms = [
        Arm("transformer-4", _with_layers(run, [["transformer"]], transformer={"layers": 4})),
        Arm("1-layer", _with_layers(run, [["mlp"]])),
        Arm("2-layer", _with_layers(run, [three, four])),
        Arm("3-layer", _with_layers(run, [three, four, four])),
        Arm("3-layer-s", _with_layers(run, [three, three, three])),
    ]
    return Plan("dhen-depth", "transformer-4", "roc_auc", arms)


SSL_GRID = (
    ("NAL", 90, 20, 0.0002, 0.0001),
    ("NAL", 90, 20, 0.0, 0.0002),
    ("NAL", 20, 100, 0.0005, 0.0005),
    ("NAL", 20, 100, 0.001, 0.001),
    ("NAL", 20, 100, 0.01, 0.01),
    ("MLM", 60, 30, 0.0002, 0.0001),
)


def ssl_arm_name(objective: str, pos: int, neg: int, org: float, ads: float) -> str:
    return f"{objective} {pos}/{neg} org={org:g} ads={ads:g}"


def _ssl(run: RunConfig) -> Plan:
    base = copy.deepcopy(run)
    base.ssl = SslConfig(org_weight=0.0, ads_weight=0.0)
    arms = [Arm("no-ssl", base)]
    for obj, pos, neg, org, ads in SSL_GRID:
        r = copy.deepcopy(run)
        r.ssl = SslConfig(objective=obj, num_pos=pos, num_neg=neg, org_weight=org, ads_weight=ads)
        arms.append(Arm(ssl_arm_name(obj, pos, neg, org, ads), r))
    return Plan("ssl", "no-ssl", "pr_auc", arms)


def _features(run: RunConfig) -> Plan:
    def only(cats: list[str]) -> RunConfig:
        r = copy.deepcopy(run)
        r.schema.user_categories = cats
        if "sequence" not in cats:
            r.ssl = SslConfig(org_weight=0.0, ads_weight=0.0)
        return r

    arms = [Arm("no-user-features", only([]))]
    arms += [Arm(CATEGORY_LABELS[c], only([c])) for c in USER_CATEGORIES]
    return Plan("feature-category", "no-user-features", "roc_auc", arms)


def build_plan(plan: str, run: RunConfig) -> Plan:
    builders = {"crossing": _crossing, "dhen-depth": _depth, "ssl": _ssl, "feature-category": _features}
    if plan not in builders:
        raise ConfigError(f"unknown ablation plan {plan!r}; choose one of {', '.join(PLANS)}", "eval.plan")
    out = builders[plan](run)
    for arm in out.arms:
        arm.run.validate()
    return out


def seeded(run: RunConfig, seed: int) -> RunConfig:
    """Offset the world, initialization and training seeds by ``seed``."""
    r = copy.deepcopy(run)
    r.world.seed = run.world.seed + seed
    r.model.init_seed = run.model.init_seed + seed
    r.training.seed = run.training.seed + seed
    return r


def split_days(run: RunConfig) -> tuple[list[int], list[int]]:
    t = run.training
    return list(range(t.train_days)), list(range(t.train_days, t.train_days + t.eval_days))


def make_data(run: RunConfig) -> tuple[list[Partition], list[Partition]]:
    train_days, eval_days = split_days(run)
    parts = generate_partitions(run.world, train_days + eval_days)
    return parts[:len(train_days)], parts[len(train_days):]


def train_and_evaluate(run: RunConfig, train_parts: Sequence[Partition],
                       eval_parts: Sequence[Partition]) -> EvalReport:
    state = train(TrainState.fresh(run), train_parts)
    return evaluate(state.model, eval_parts)


def _job(args) -> EvalReport:
    return train_and_evaluate(*args)


@dataclass
class ArmResult:
    arm: str
    seed: int
    report: EvalReport

    def score(self, metric: str) -> float:
        return mean_defined([getattr(h, metric) for h in self.report.heads.values()])


@dataclass
class AblationReport:
    plan: str
    baseline: str
    metric: str
    arms: list[str]
    results: list[ArmResult] = field(default_factory=list)
    data_hashes: dict[int, str] = field(default_factory=dict)

    def seeds(self) -> list[int]:
        return sorted(self.data_hashes)

    def score(self, arm: str, seed: int, metric: str | None = None) -> float:
        for r in self.results:
            if r.arm == arm and r.seed == seed:
                return r.score(metric or self.metric)
        raise KeyError((arm, seed))

    def median(self, arm: str, metric: str | None = None) -> float:
        return statistics.median(self.score(arm, s, metric) for s in self.seeds())

    def lift(self, arm: str, metric: str | None = None) -> float:
        """Relative lift of the median score over the baseline's median score."""
        base = self.median(self.baseline, metric)
        return (self.median(arm, metric) - base) / base

    def rows(self) -> list[dict]:
        """One row per (arm, head) with medians over seeds; the ``mean`` head averages the heads."""
        out = []
        per_arm = {a: [r for r in self.results if r.arm == a] for a in self.arms}
        base = per_arm[self.baseline]
        for arm in self.arms:
            res = per_arm[arm]
            heads = list(res[0].report.heads)
            for head in heads + ["mean"]:
                vals = {m: _median_head(res, head, m) for m in ("roc_auc", "pr_auc")}
                b = _median_head(base, head, self.metric)
                lift = None
                if vals[self.metric] is not None and b:
                    lift = (vals[self.metric] - b) / b
                out.append({"arm": arm, "head": head, "roc_auc": vals["roc_auc"], "pr_auc": vals["pr_auc"],
                            "lift": lift, "flops": res[0].report.flops, "params": res[0].report.params})
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows():
            w.writerow(["undefined" if r[c] is None else r[c] for c in REPORT_COLUMNS])
        return buf.getvalue()

    def jsonl(self) -> str:
        lines = []
        for r in self.results:
            lines.append({"arm": r.arm, "seed": r.seed, "data_hash": r.report.data_hash,
                          **{k: v for k, v in r.report.to_dict().items() if k != "data_hash"}})
        return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)

    def table(self) -> str:
        """Arms by median metric and lift versus the baseline."""
        label = "ROC-AUC" if self.metric == "roc_auc" else "PR-AUC"
        lines = [f"plan: {self.plan}  baseline: {self.baseline}  seeds: {self.seeds()}",
                 f"{'arm':<40} {label:>9} {'lift':>9}"]
        for arm in self.arms:
            lines.append(f"{arm:<40} {self.median(arm):>9.4f} {100 * self.lift(arm):>8.2f}%")
        return "\n".join(lines) + "\n"


def _median_head(results: list[ArmResult], head: str, metric: str) -> float | None:
    if head == "mean":
        vals = [r.score(metric) for r in results]
    else:
        vals = [getattr(r.report.heads[head], metric) for r in results]
    vals = [v for v in vals if v is not None and v == v]
    return statistics.median(vals) if vals else None


def run_ablation(plan: str, run: RunConfig, seeds: Sequence[int] | None = None, jobs: int = 1,
                 arms: Sequence[str] | None = None) -> AblationReport:
    """Train every arm of ``plan`` for each seed on the same generated data; ``arms`` restricts the set."""
    p = build_plan(plan, run)
    chosen = p.arms
    if arms is not None:
        wanted = set(arms) | {p.baseline}
        unknown = wanted - {a.name for a in p.arms}
        if unknown:
            raise ConfigError(f"unknown arms for plan {plan!r}: {sorted(unknown)}", "arms")
        chosen = [a for a in p.arms if a.name in wanted]
    seeds = list(run.eval.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("at least one seed is required", "eval.seeds")
    report = AblationReport(p.name, p.baseline, p.metric, [a.name for a in chosen])
    jobs_args, keys = [], []
    for s in seeds:
        train_parts, eval_parts = make_data(seeded(run, s))
        report.data_hashes[s] = hash_partitions(list(train_parts) + list(eval_parts))
        for arm in chosen:
            jobs_args.append((seeded(arm.run, s), train_parts, eval_parts))
            keys.append((arm.name, s))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_job, jobs_args))
    else:
        reports = [_job(a) for a in jobs_args]
    for (name, s), rep in zip(keys, reports):
        report.results.append(ArmResult(name, s, rep))
    return report
