"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
together in the pytest terminal summary.  Criteria 5 to 7 train real models on
planted synthetic worlds and dominate the runtime (roughly 15 minutes on one core).
"""

import copy
import math
import statistics
import time

import numpy as np

from dhen_cvr import autograd as ag
from dhen_cvr.ablation import build_plan, make_data, seeded, ssl_arm_name, train_and_evaluate
from dhen_cvr.autograd import EVAL, Context, Initializer, Tensor, grad_check
from dhen_cvr.config import (CONVERSION_HEADS, SEQUENCE_KINDS, DCNConfig, DhenConfig, DimensionConfig, HeadConfig,
                             LayerConfig, MaskNetConfig, MLPConfig, ModelConfig, RunConfig, SchemaConfig,
                             SearchConfig, SequenceConfig, SslConfig, TrainingConfig, TransformerConfig,
                             WorldConfig)
from dhen_cvr.crossing import CrossingInput, DCNv2, MaskNet, MLPCrossing, TransformerCrossing
from dhen_cvr.features import timestamp_transform
from dhen_cvr.metrics import cpa, evaluate, mean_defined, pr_auc, roc_auc
from dhen_cvr.model import build_model
from dhen_cvr.pareto import (CandidateResult, SearchSpace, dominated_brute_force, pareto_front, r2_scores,
                             run_search)
from dhen_cvr.ssl import SslLoss, info_nce_value
from dhen_cvr.synthetic import generate_partitions
from dhen_cvr.training import (TrainState, bce, load_checkpoint, multitask_loss, save_checkpoint, to_checkpoint,
                               train)
from dhen_cvr import checkpoint as ckpt_io

from conftest import ACCEPTANCE_LINES, toy_run, toy_world
from test_metrics import brute_ap, brute_roc, instance
from test_pareto import canonical
from test_sequence import CFG as SEQ_CFG, model as seq_model, padded


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def readout(out: Tensor, seed: int = 99) -> Tensor:
    # random weights keep every coordinate's gradient well away from zero
    w = Tensor(rand(out.shape, seed))
    return ag.sum_pool(ag.reshape(ag.mul(out, w), (-1,)), axis=0)


def auc_of(rep, metric="roc_auc") -> float:
    return mean_defined([getattr(h, metric) for h in rep.heads.values()])


def planted_world(**kw) -> WorldConfig:
    base = dict(n_users=2000, impressions_per_day=3000, downsample_rate=1.0, history_days=10,
                seq_rates={"search": 0.5, "org": 0.5, "ads": 0.5, "match": 0.3, "conv": 0.5},
                sequence_strength=2.0, crossing_strength=0.0, latent_strength=0.5,
                positive_rate={h: 0.05 for h in CONVERSION_HEADS})
    base.update(kw)
    return WorldConfig(**base)


def desk_model(layers) -> ModelConfig:
    return ModelConfig(token_dim=16, dhen=DhenConfig(layers=layers),
                       heads=[HeadConfig(h, tower=[32]) for h in CONVERSION_HEADS]
                       + [HeadConfig("ctr", tower=[32], train_only=True)],
                       sequence=SequenceConfig(hidden=16, layers=1, heads=2, ff_size=32, action_dim=4,
                                               advertiser_dim=4, max_len=32))


def sequence_run(positive_rate: float) -> RunConfig:
    run = RunConfig()
    run.world = planted_world(positive_rate={h: positive_rate for h in CONVERSION_HEADS})
    run.schema = SchemaConfig(categorical_dim=8)
    run.model = desk_model([LayerConfig(modules=[MLPConfig(widths=[64]), MaskNetConfig(hidden=32)], width=64,
                                        reshape_dim=16)])
    run.ssl = SslConfig(org_weight=0.0, ads_weight=0.0)
    run.training = TrainingConfig(batch_size=256, train_days=8, eval_days=2, lr=3e-3, epochs=3)
    return run.validate()


def arm(plan, name):
    return next(a.run for a in plan.arms if a.name == name)


class TestAcceptance:
    def test_criterion_1_gradients(self):
        t0 = time.perf_counter()
        errs = {}
        x = Tensor(rand((3, 4, 5), 0))
        crossing = {
            "mlp": MLPCrossing("mlp", MLPConfig(widths=[6]), 4, 5, 3, Initializer(1)),
            "dcn_v2": DCNv2("dcn", DCNConfig(layers=2, rank=2), 4, 5, 3, Initializer(2)),
            "masknet": MaskNet("mn", MaskNetConfig(blocks=2, hidden=7, dropout=0.0), 4, 5, 3, Initializer(3)),
            "transformer": TransformerCrossing("tr", TransformerConfig(layers=1, heads=2, hidden=8, ff_size=16),
                                               4, 5, 3, Initializer(4)),
        }
        for name, m in crossing.items():
            errs[name] = grad_check(lambda: readout(m(CrossingInput(x), EVAL)), m.parameters() + [x])

        seq = seq_model(("org", "match"), cfg=SequenceConfig(**{**SEQ_CFG.__dict__, "max_len": 8}), seed=3)
        seqs = {"org": padded([4, 2], 5, 8), "match": padded([3, 0], 6, 8)}

        def seq_fn():
            out = seq.summaries(seqs, EVAL, 2)
            return ag.add(readout(out["org"], 9), readout(out["match"], 10))

        errs["sequence"] = grad_check(seq_fn, seq.parameters())

        sm = seq_model(("org", "ads"), cfg=SequenceConfig(**{**SEQ_CFG.__dict__, "max_len": 8}), seed=0)
        ssl = SslLoss(SslConfig(num_pos=3, num_neg=2, org_weight=1.0, ads_weight=1.0), sm)
        sseqs = {"org": padded([6, 3, 1], 3, 8), "ads": padded([4, 5, 0], 4, 8)}

        def ssl_fn():
            enc = {k: sm.item_encode(k, s) for k, s in sseqs.items()}
            g = ssl(sseqs, enc, EVAL, 4)
            return ag.add(g["org"], g["ads"])

        errs["ssl"] = grad_check(ssl_fn, sm.parameters())

        # production layout: {MLP + Transformer} then {MLP + MaskNet}, toy widths
        run = toy_run(ssl=SslConfig(num_pos=2, num_neg=2, org_weight=0.5, ads_weight=0.5))
        model = build_model(run)
        parts = generate_partitions(toy_world(), [0])
        model.features.fit(parts)
        batch = parts[0].batch(np.arange(4), 6)
        errs["dhen"] = grad_check(lambda: multitask_loss(model, batch, Context(train=True, seed=1), 7)[0],
                                  model.parameters(), max_coords=6)
        elapsed = time.perf_counter() - t0
        worst = max(errs.values())
        detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
        report(1, worst < 1e-4 and elapsed < 120, f"max rel err {worst:.2e} in {elapsed:.0f}s ({detail})")

    def test_criterion_2_metric_oracles(self):
        rng = np.random.default_rng(20)
        worst = 0.0
        for _ in range(1000):
            s, y = instance(rng)
            worst = max(worst, abs(roc_auc(s, y) - brute_roc(s, y)), abs(pr_auc(s, y) - brute_ap(s, y)))
        report(2, worst <= 1e-12, f"max |metric - brute force| = {worst:.1e} over 1000 instances")

    def test_criterion_3_pareto_oracle(self):
        rng = np.random.default_rng(30)
        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(1, 501))
            pts = [tuple(p) for p in rng.integers(0, int(rng.integers(2, 60)), (n, 2)).astype(float)]
            mismatches += pareto_front(pts) != canonical(dominated_brute_force(pts), pts)
        worked = sorted(pareto_front([(1, 1), (2, 3), (3, 2), (0, 4)]))
        report(3, mismatches == 0 and worked == [1, 2, 3],
               f"{mismatches} mismatches over 1000 sets; worked example front {worked}")

    def test_criterion_4_formulas(self):
        ts = np.array([100.0, 103.0, 110.0, 110.0, 500.0])
        stamp = bool(np.array_equal(timestamp_transform(ts)[1:], np.log(np.diff(ts) + 1.0)))
        b = bce(0.5, 1) == math.log(2)
        nce = [abs(info_nce_value([0.0, 0.0], [1.0, 2.0], np.ones((n, 2))) - math.log(n + 1)) for n in (1, 20, 100)]
        c = cpa(2.00 + 4.00, 2)
        ok = stamp and b and max(nce) < 1e-12 and c == 3.00
        report(4, ok, f"ln(delta+1) exact {stamp}; BCE ln2 {b}; InfoNCE err {max(nce):.1e}; CPA ${c:.2f}")

    def test_criterion_5_crossing(self):
        run = RunConfig()
        run.world = WorldConfig(n_users=2000, impressions_per_day=5000, downsample_rate=1.0, history_days=0,
                                seq_rates={k: 0.0 for k in SEQUENCE_KINDS}, sequence_strength=0.0,
                                crossing_strength=2.0, positive_rate={h: 0.05 for h in CONVERSION_HEADS})
        run.schema = SchemaConfig(user_categories=["demographic", "counting", "categorical", "pretrained"],
                                  categorical_dim=8)
        run.model = desk_model([
            LayerConfig(modules=[MLPConfig(widths=[64]), TransformerConfig(layers=1, heads=2, hidden=32, ff_size=64)],
                        width=64, reshape_dim=16),
            LayerConfig(modules=[MLPConfig(widths=[64]), MaskNetConfig(hidden=32)], width=64, reshape_dim=16)])
        run.ssl = SslConfig(org_weight=0.0, ads_weight=0.0)
        run.training = TrainingConfig(batch_size=256, train_days=10, eval_days=2, lr=3e-3)
        plan = build_plan("crossing", run.validate())
        gains = []
        for s in (0, 1, 2):
            tr, ev = make_data(seeded(run, s))
            mlp = auc_of(train_and_evaluate(seeded(arm(plan, "mlp"), s), tr, ev))
            dhen = auc_of(train_and_evaluate(seeded(arm(plan, "mlp+transformer/mlp+masknet"), s), tr, ev))
            gains.append(dhen - mlp)
        med = statistics.median(gains)
        report(5, med >= 0.01, f"median DHEN - MLP ROC-AUC {med:+.4f} (seeds {[round(g, 4) for g in gains]})")

    def test_criterion_6_sequences(self):
        run = sequence_run(0.05)
        plan = build_plan("feature-category", run)
        base_run, seq_run = arm(plan, "no-user-features"), arm(plan, "Sequence")
        removed = copy.deepcopy(seq_run)
        removed.schema.user_categories = [c for c in removed.schema.user_categories if c != "sequence"]
        gains, reverted = [], []
        for s in (0, 1, 2):
            tr, ev = make_data(seeded(run, s))
            base = auc_of(train_and_evaluate(seeded(base_run, s), tr, ev))
            with_seq = auc_of(train_and_evaluate(seeded(seq_run, s), tr, ev))
            without = auc_of(train_and_evaluate(seeded(removed, s), tr, ev))
            gains.append(with_seq - base)
            reverted.append(without - base)
        med, back = statistics.median(gains), statistics.median(reverted)
        ok = med >= 0.02 and abs(back) < 0.5 * med
        report(6, ok, f"median gain {med:+.4f} (seeds {[round(g, 4) for g in gains]}); "
                      f"after removal {back:+.4f} vs baseline")

    def test_criterion_7_ssl(self):
        run = sequence_run(0.005)
        plan = build_plan("ssl", run)
        no_ssl, nal = arm(plan, "no-ssl"), arm(plan, ssl_arm_name("NAL", 90, 20, 0.0002, 0.0001))
        margins = []
        for s in (0, 1, 2):
            tr, ev = make_data(seeded(run, s))
            a = auc_of(train_and_evaluate(seeded(no_ssl, s), tr, ev), "pr_auc")
            b = auc_of(train_and_evaluate(seeded(nal, s), tr, ev), "pr_auc")
            margins.append(b - a)
        wins = sum(m > 0 for m in margins)
        report(7, wins >= 2, f"NAL improves PR-AUC in {wins}/3 seeds (margins {[round(m, 4) for m in margins]})")

    def test_criterion_8_determinism(self, tmp_path):
        run = toy_run(training=TrainingConfig(lr=3e-3, batch_size=64, epochs=2, train_days=2, eval_days=1))
        parts = generate_partitions(toy_world(), range(3))
        a = train(TrainState.fresh(run), parts[:2])
        b = train(TrainState.fresh(run), parts[:2])
        same_ckpt = save_checkpoint(a, tmp_path / "a.ckpt") == save_checkpoint(b, tmp_path / "b.ckpt")
        same_report = evaluate(a.model, parts[2:]).jsonl() == evaluate(b.model, parts[2:]).jsonl()
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        round_trip = ckpt_io.encode(to_checkpoint(loaded)) == (tmp_path / "a.ckpt").read_bytes()
        first = train(TrainState.fresh(run), parts[:2], max_steps=5)
        save_checkpoint(first, tmp_path / "part.ckpt")
        resumed = train(load_checkpoint(tmp_path / "part.ckpt"), parts[:2])
        split = save_checkpoint(resumed, tmp_path / "resumed.ckpt") == save_checkpoint(a, tmp_path / "a2.ckpt")
        report(8, same_ckpt and same_report and round_trip and split,
               f"checkpoints equal {same_ckpt}; reports equal {same_report}; round trip {round_trip}; "
               f"split run {split}")

    def test_criterion_9_pareto_search(self):
        def truth(a, seed=0):
            d, h, lr = a["dhen_depth"], a["hidden"], a["lr"]
            auc = 0.6 + 0.03 * d + 0.02 * math.log2(h / 16) + 0.01 * math.log10(lr / 1e-4)
            return CandidateResult(a, auc, 1e4 / (d * h), seed, "ok")

        run = toy_run()
        run.search = SearchConfig(dimensions=[DimensionConfig("dhen_depth", "integer-range", low=1.0, high=3.0),
                                              DimensionConfig("hidden", "categorical", values=[16, 32, 64]),
                                              DimensionConfig("lr", "log-uniform-float", low=1e-4, high=1e-2)],
                                  constraints=[], n_train=24, n_predict=400, seed=0)
        res = run_search(run, truth)
        space = SearchSpace.from_config(run.search)
        oos = r2_scores(res.surrogate, [truth(a) for a in space.sample(500, 99)])
        true = [truth(a) for a in res.predicted]
        best = max(range(len(true)), key=lambda i: (true[i].auc, true[i].throughput))
        cheapest = max(range(len(true)), key=lambda i: (true[i].throughput, true[i].auc))
        front = set(res.front)
        ok = min(oos.values()) > 0.9 and best in front and cheapest in front
        report(9, ok, f"out-of-sample R2 auc {oos['auc']:.3f}, log-throughput {oos['log_throughput']:.3f}; "
                      f"best-AUC on front {best in front}; cheapest on front {cheapest in front}")

    def test_criterion_10_production_default(self, tmp_path):
        run = RunConfig()
        run.world.n_users, run.world.n_ads, run.world.n_advertisers = 60, 20, 4
        run.world.impressions_per_day, run.world.history_days = 40, 1
        run.world.downsample_rate = 1.0
        run.training.batch_size = 4
        run.validate()
        m = run.model
        layers_ok = [[mod.kind for mod in layer.modules] for layer in m.dhen.layers] == [["mlp", "transformer"],
                                                                                       ["mlp", "masknet"]]
        parts = generate_partitions(run.world, [0, 1])
        state = train(TrainState.fresh(run), parts[1:], max_steps=1)
        digest = save_checkpoint(state, tmp_path / "prod.ckpt")
        loaded = load_checkpoint(tmp_path / "prod.ckpt")
        ok = layers_ok and state.step == 1 and loaded.step == 1 and m.token_dim == 64 and len(digest) == 64
        report(10, ok, f"layers {layers_ok}; {state.model.num_parameters():,} parameters; one step; "
                       f"checkpoint sha256 {digest[:12]}")
