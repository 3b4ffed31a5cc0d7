"""Architecture search: sample, evaluate, fit a surrogate, predict and extract the Pareto front."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ablation import MODULE_DEFAULTS, module_template
from .config import LayerConfig, RunConfig, SearchConfig
from .data import Partition
from .errors import ConfigError, DivergenceError
from .metrics import analytic_flops, evaluate, mean_defined
from .training import TrainState, mix_seed, train

DIMENSION_KINDS = ("integer-range", "categorical", "log-uniform-float")
KNOWN_DIMENSIONS = ("dhen_depth", "layer_modules", "hidden", "heads", "width", "token_dim", "lr",
                    "batch_size", "objective", "num_pos", "num_neg", "org_weight", "ads_weight")


# --------------------------------------------------------------------------- search space


@dataclass
class Dimension:
    name: str
    kind: str
    values: list | None = None
    low: float | None = None
    high: float | None = None

    def draw(self, rng: np.random.Generator):
        if self.kind == "categorical":
            return self.values[int(rng.integers(len(self.values)))]
        if self.kind == "integer-range":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


class SearchSpace:
    """Named dimensions plus divisibility constraints ``[divisor, dividend]``."""

    def __init__(self, dimensions: Sequence[Dimension], constraints: Sequence[Sequence[str]] = ()):
        self.dimensions = list(dimensions)
        self.constraints = [tuple(c) for c in constraints]
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dimension names: {names}", "search.dimensions")
        for i, d in enumerate(self.dimensions):
            path = f"search.dimensions[{i}]"
            if d.kind not in DIMENSION_KINDS:
                raise ConfigError(f"unknown dimension kind {d.kind!r}", f"{path}.kind")
            if d.kind == "categorical":
                if not d.values:
                    raise ConfigError("categorical dimension needs values", f"{path}.values")
            elif d.low is None or d.high is None or d.low > d.high:
                raise ConfigError("range dimension needs low <= high", path)
            elif d.kind == "log-uniform-float" and d.low <= 0:
                raise ConfigError("log-uniform bounds must be positive", f"{path}.low")
        for c in self.constraints:
            if len(c) != 2 or not set(c) <= set(names):
                raise ConfigError(f"constraint {list(c)} must name two dimensions", "search.constraints")

    @classmethod
    def from_config(cls, cfg: SearchConfig) -> "SearchSpace":
        return cls([Dimension(d.name, d.kind, d.values, d.low, d.high) for d in cfg.dimensions], cfg.constraints)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def satisfied(self, a: dict) -> bool:
        return all(a[b] % a[d] == 0 for d, b in self.constraints)

    def sample(self, n: int, seed: int) -> list[dict]:
        """i.i.d. draws satisfying the constraints by rejection."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5EA2C4]))
        out, tries = [], 0
        while len(out) < n:
            a = {d.name: d.draw(rng) for d in self.dimensions}
            tries += 1
            if self.satisfied(a):
                out.append(a)
            elif tries >= 1000 and len(out) < 0.01 * tries:
                raise ConfigError(f"constraints reject over 99% of draws ({len(out)}/{tries} accepted); "
                                  "revise the search space", "search.constraints")
        return out


def sample(space: SearchSpace, n: int, seed: int) -> list[dict]:
    return space.sample(n, seed)


# --------------------------------------------------------------------------- candidates


@dataclass
class CandidateResult:
    assignment: dict
    auc: float | None
    throughput: float | None
    seed: int
    status: str  # ok, failed or invalid
    reason: str = ""
    flops: int | None = None
    params: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def candidate_run(base: RunConfig, assignment: dict) -> RunConfig:
    """Apply a dimension assignment to a copy of ``base``."""
    run = copy.deepcopy(base)
    unknown = set(assignment) - set(KNOWN_DIMENSIONS)
    if unknown:
        raise ConfigError(f"unknown search dimensions {sorted(unknown)}", "search.dimensions")
    layers = run.model.dhen.layers
    depth = int(assignment.get("dhen_depth", len(layers)))
    width = int(assignment.get("width", layers[0].width))
    reshape = layers[0].reshape_dim
    if "layer_modules" in assignment:
        kinds = str(assignment["layer_modules"]).split("+")
        for k in kinds:
            if k not in MODULE_DEFAULTS:
                raise ConfigError(f"unknown module kind {k!r}", "search.layer_modules")
        layers = [LayerConfig(modules=[module_template(base, k) for k in kinds], width=width, reshape_dim=reshape)
                  for _ in range(depth)]
    else:
        layers = [copy.deepcopy(layers[min(i, len(layers) - 1)]) for i in range(depth)]
    for layer in layers:
        layer.width = width
        for m in layer.modules:
            if "hidden" in assignment:
                h = int(assignment["hidden"])
                if m.kind in ("masknet", "transformer"):
                    m.hidden = h
                if m.kind == "transformer":
                    m.ff_size = 2 * h
                if m.kind == "mlp":
                    m.widths = [h]
                if m.kind == "dcn_v2":
                    m.rank = min(m.rank, h)
            if "heads" in assignment and m.kind == "transformer":
                m.heads = int(assignment["heads"])
    run.model.dhen.layers = layers
    if "token_dim" in assignment:
        run.model.token_dim = int(assignment["token_dim"])
    if "lr" in assignment:
        run.training.lr = float(assignment["lr"])
    if "batch_size" in assignment:
        run.training.batch_size = int(assignment["batch_size"])
    for key in ("objective", "num_pos", "num_neg", "org_weight", "ads_weight"):
        if key in assignment:
            setattr(run.ssl, key, assignment[key])
    return run.validate()


def evaluate_candidate(assignment: dict, base: RunConfig, train_parts: Sequence[Partition],
                       eval_parts: Sequence[Partition], seed: int, epochs: int = 1) -> CandidateResult:
    """Train one candidate and score it; divergence yields ``failed`` and bad configs ``invalid``."""
    if not eval_parts:
        raise ValueError("evaluation needs at least one partition")
    try:
        run = candidate_run(base, assignment)
    except ConfigError as exc:
        return CandidateResult(assignment, None, None, seed, "invalid", str(exc))
    run.model.init_seed = seed
    run.training.seed = seed
    run.training.epochs = epochs
    try:
        state = train(TrainState.fresh(run), train_parts)
    except ConfigError as exc:
        return CandidateResult(assignment, None, None, seed, "invalid", str(exc))
    except DivergenceError as exc:
        return CandidateResult(assignment, None, None, seed, "failed", f"{exc} (last good step {exc.last_good_step})")
    report = evaluate(state.model, eval_parts)
    auc = mean_defined([h.roc_auc for h in report.heads.values()])
    if math.isnan(auc):
        return CandidateResult(assignment, None, None, seed, "failed", "no evaluation head has both classes")
    flops = analytic_flops(state.model, eval_parts[0].batch(np.arange(1), run.model.sequence.max_len))
    return CandidateResult(assignment, auc, analytic_throughput(flops), seed, "ok", "", flops, report.params)


def analytic_throughput(flops: int) -> float:
    """Examples per second at a nominal 1 GFLOP/s, a machine-independent cost axis."""
    return 1e9 / max(int(flops), 1)


# --------------------------------------------------------------------------- surrogate


@dataclass
class Surrogate:
    """Ridge regression on standardized dimensions for AUC and log-throughput."""

    space_names: list[str]
    kinds: dict[str, str]
    levels: dict[str, list]
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray  # (features, 2)
    intercept: np.ndarray  # (2,)
    lam: float
    quadratic: bool
    r2: dict[str, float] = field(default_factory=dict)

    def features(self, assignments: Sequence[dict]) -> np.ndarray:
        raw = _raw_features(assignments, self.space_names, self.kinds, self.levels, self.quadratic)
        return (raw - self.mean) / self.scale

    def predict(self, assignments: Sequence[dict]) -> np.ndarray:
        """(n, 2) array of predicted AUC and throughput."""
        if not assignments:
            return np.zeros((0, 2))
        y = self.features(assignments) @ self.weights + self.intercept
        return np.column_stack([y[:, 0], np.exp(y[:, 1])])

    def summary(self) -> dict:
        return {"lambda": self.lam, "quadratic": self.quadratic, "r2": self.r2,
                "dimensions": self.space_names, "features": int(self.weights.shape[0])}


def _raw_features(assignments, names, kinds, levels, quadratic) -> np.ndarray:
    cols = []
    for name in names:
        kind = kinds[name]
        if kind == "categorical":
            lv = levels[name]
            onehot = np.zeros((len(assignments), len(lv)))
            for i, a in enumerate(assignments):
                v = a[name]
                if v not in lv:
                    raise ConfigError(f"unseen value {v!r} for categorical dimension {name!r}", name)
                onehot[i, lv.index(v)] = 1.0
            cols.append(onehot)
        else:
            v = np.array([float(a[name]) for a in assignments])
            cols.append((np.log(v) if kind == "log-uniform-float" else v)[:, None])
    x = np.hstack(cols) if cols else np.zeros((len(assignments), 0))
    if quadratic and x.shape[1] > 1:
        i, j = np.triu_indices(x.shape[1], k=1)
        x = np.hstack([x, x[:, i] * x[:, j]])
    return x


def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss = float(np.sum((y - y.mean()) ** 2))
    res = float(np.sum((y - pred) ** 2))
    return 1.0 if ss == 0 else 1.0 - res / ss


def fit_surrogate(results: Sequence[CandidateResult], space: SearchSpace, lam: float = 1e-3,
                  quadratic: bool = False) -> Surrogate:
    if lam <= 0:
        raise ValueError("ridge regularization must be > 0")
    ok = [r for r in results if r.status == "ok"]
    if len(ok) < len(space.dimensions) + 1:
        raise ValueError(f"need at least {len(space.dimensions) + 1} ok results, got {len(ok)}")
    kinds = {d.name: d.kind for d in space.dimensions}
    levels = {}
    for d in space.dimensions:
        if d.kind == "categorical":
            seen = {json.dumps(r.assignment[d.name]) for r in ok}
            levels[d.name] = [v for v in d.values if json.dumps(v) in seen]
    assignments = [r.assignment for r in ok]
    raw = _raw_features(assignments, space.names, kinds, levels, quadratic)
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    x = (raw - mean) / scale
    y = np.column_stack([[r.auc for r in ok], [math.log(r.throughput) for r in ok]])
    intercept = y.mean(axis=0)
    a = x.T @ x + lam * np.eye(x.shape[1])
    w = np.linalg.solve(a, x.T @ (y - intercept)) if x.shape[1] else np.zeros((0, 2))
    s = Surrogate(space.names, kinds, levels, mean, scale, w, intercept, lam, quadratic)
    pred = x @ w + intercept
    s.r2 = {"auc": _r2(y[:, 0], pred[:, 0]), "log_throughput": _r2(y[:, 1], pred[:, 1])}
    return s


def r2_scores(surrogate: Surrogate, results: Sequence[CandidateResult]) -> dict[str, float]:
    """Out-of-sample R^2 for AUC and log-throughput on ``ok`` results."""
    ok = [r for r in results if r.status == "ok"]
    pred = surrogate.predict([r.assignment for r in ok])
    return {"auc": _r2(np.array([r.auc for r in ok]), pred[:, 0]),
            "log_throughput": _r2(np.log([r.throughput for r in ok]), np.log(pred[:, 1]))}


# --------------------------------------------------------------------------- front


def pareto_front(points: Sequence[Sequence[float]]) -> list[int]:
    """Indices of non-dominated points (both objectives maximized), AUC descending.

    Points are swept in AUC-descending order; a point survives when its
    throughput is the best in its AUC tie group and strictly beats every point
    of higher AUC.  Exact duplicates survive together.
    """
    pts = [(float(a), float(t)) for a, t in points]
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], -pts[i][1], i))
    front: list[int] = []
    best_above = -math.inf
    k = 0
    while k < len(order):
        a = pts[order[k]][0]
        group = []
        while k < len(order) and pts[order[k]][0] == a:
            group.append(order[k])
            k += 1
        top = pts[group[0]][1]
        if top > best_above:
            front.extend(i for i in group if pts[i][1] == top)
        best_above = max(best_above, top)
    return front


def dominated_brute_force(points: Sequence[Sequence[float]]) -> list[int]:
    """O(n^2) reference: indices of non-dominated points in input order."""
    out = []
    for i, p in enumerate(points):
        if not any(q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1]) for q in points):
            out.append(i)
    return out


# --------------------------------------------------------------------------- end-to-end


Evaluator = Callable[[dict, int], CandidateResult]


@dataclass
class SearchResult:
    candidates: list[CandidateResult]
    surrogate: Surrogate
    predicted: list[dict]
    predictions: np.ndarray
    front: list[int]

    def candidate_log(self) -> str:
        return "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in self.candidates)

    def front_csv(self) -> str:
        names = self.surrogate.space_names
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", *names, "predicted_auc", "predicted_throughput"])
        for i in self.front:
            a = self.predicted[i]
            w.writerow([i, *[a[n] for n in names], repr(float(self.predictions[i, 0])),
                        repr(float(self.predictions[i, 1]))])
        return buf.getvalue()

    def plot_data(self) -> str:
        """x = throughput, y = AUC for every predicted candidate, with a front flag."""
        on = set(self.front)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["throughput", "auc", "on_front"])
        for i, (auc, thr) in enumerate(self.predictions):
            w.writerow([repr(float(thr)), repr(float(auc)), int(i in on)])
        return buf.getvalue()


class _TrainingEvaluator:
    """Picklable evaluator that trains candidates on fixed partitions."""

    def __init__(self, base: RunConfig, train_parts, eval_parts, epochs: int):
        self.base, self.train_parts, self.eval_parts, self.epochs = base, train_parts, eval_parts, epochs

    def __call__(self, assignment: dict, seed: int) -> CandidateResult:
        return evaluate_candidate(assignment, self.base, self.train_parts, self.eval_parts, seed, self.epochs)


def _call(args):
    fn, a, s = args
    return fn(a, s)


def training_evaluator(run: RunConfig) -> _TrainingEvaluator:
    from .synthetic import generate_partitions

    b = run.search.budget
    if b.eval_partitions < 1:
        raise ConfigError("at least one evaluation partition is required", "search.budget.eval_partitions")
    parts = generate_partitions(run.world, range(b.train_partitions + b.eval_partitions))
    return _TrainingEvaluator(run, parts[:b.train_partitions], parts[b.train_partitions:], b.epochs)


def run_search(run: RunConfig, evaluator: Evaluator | None = None, jobs: int = 1) -> SearchResult:
    """Sample, evaluate, fit, predict over a larger sample, then take the predicted front."""
    cfg = run.search
    cfg.validate()
    space = SearchSpace.from_config(cfg)
    evaluator = evaluator or training_evaluator(run)
    planned = space.sample(cfg.n_train, cfg.seed)
    seeds = [mix_seed(cfg.seed, i) & 0xFFFFFFFF for i in range(len(planned))]
    args = [(evaluator, a, s) for a, s in zip(planned, seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_call, args))
    else:
        results = [_call(x) for x in args]
    surrogate = fit_surrogate(results, space, cfg.ridge_lambda, cfg.quadratic)
    pool = space.sample(cfg.n_predict, mix_seed(cfg.seed, 1 << 20))
    pool = [a for a in pool if _known_levels(a, surrogate)]
    preds = surrogate.predict(pool)
    front = pareto_front([tuple(p) for p in preds])
    return SearchResult(results, surrogate, pool, preds, front)


def _known_levels(a: dict, s: Surrogate) -> bool:
    return all(a[n] in s.levels[n] for n in s.levels)
