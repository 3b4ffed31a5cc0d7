import copy

import numpy as np
import pytest

from dhen_cvr import autograd as ag
from dhen_cvr.autograd import EVAL, Context, Initializer, Tensor, grad_check
from dhen_cvr.config import (DCNConfig, DhenConfig, HeadConfig, LayerConfig, MaskNetConfig, MLPConfig,
                             RunConfig, SslConfig, TransformerConfig)
from dhen_cvr.crossing import MLPCrossing, CrossingInput
from dhen_cvr.dhen import DHEN, Head
from dhen_cvr.model import build_model
from dhen_cvr.training import multitask_loss

from conftest import toy_model, toy_run


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def tokens(b=3, l=4, d=5, seed=0):
    return Tensor(rand((b, l, d), seed))


class TestEnsemble:
    def test_single_mlp_equals_module(self):
        cfg = DhenConfig(layers=[LayerConfig(modules=[MLPConfig(widths=[6])], width=4)])
        net = DHEN("dhen", cfg, 4, 5, Initializer(0))
        ref = MLPCrossing("dhen.layer1.mlp", MLPConfig(widths=[6]), 4, 5, 4, Initializer(0))
        x = tokens()
        np.testing.assert_array_equal(net(x, EVAL).data, ref(CrossingInput(x), EVAL).data)

    def test_identical_modules_double(self):
        a = MLPConfig(widths=[6], name="a")
        b = MLPConfig(widths=[6], name="b")
        net = DHEN("dhen", DhenConfig(layers=[LayerConfig(modules=[a, b], width=4)]), 4, 5, Initializer(0))
        ma, mb = net.layers[0].blocks
        for pa, pb in zip(ma.parameters(), mb.parameters()):
            pb.data[...] = pa.data
        x = tokens()
        np.testing.assert_array_equal(net(x, EVAL).data, 2 * ma(CrossingInput(x), EVAL).data)

    def test_permutation_bit_identical(self):
        mods = [MLPConfig(widths=[6]), DCNConfig(rank=2), MaskNetConfig(hidden=4),
                TransformerConfig(layers=1, heads=2, hidden=4, ff_size=4)]
        x = tokens()
        outs, grads = [], []
        for order in (mods, mods[::-1], [mods[2], mods[0], mods[3], mods[1]]):
            net = DHEN("dhen", DhenConfig(layers=[LayerConfig(modules=list(order), width=8, reshape_dim=4),
                                                  LayerConfig(modules=[MLPConfig(widths=[4])], width=2)]),
                       4, 5, Initializer(0))
            with ag.Tape() as tape:
                loss = ag.sum_pool(ag.reshape(net(x, EVAL), (-1,)), axis=0)
            tape.backward(loss)
            outs.append(loss.data)
            grads.append({n: p.grad.copy() for n, p in net.named_parameters().items()})
        assert outs[0] == outs[1] == outs[2]
        for g in grads[1:]:
            assert g.keys() == grads[0].keys()
            for n in g:
                np.testing.assert_array_equal(g[n], grads[0][n])

    def test_reshape_between_layers(self):
        cfg = DhenConfig(layers=[LayerConfig(modules=[MLPConfig(widths=[6])], width=12, reshape_dim=3),
                                 LayerConfig(modules=[TransformerConfig(layers=1, heads=1, hidden=4, ff_size=4)],
                                             width=2)])
        net = DHEN("dhen", cfg, 4, 5, Initializer(0))
        assert net.grids == [(4, 5), (4, 3)]
        assert net(tokens(), EVAL).shape == (3, 2)

    def test_residual_flag(self):
        cfg = DhenConfig(layers=[LayerConfig(modules=[MLPConfig(widths=[6])], width=4)], residual=True)
        net = DHEN("dhen", cfg, 4, 5, Initializer(0))
        assert "dhen.layer1.residual.weight" in net.named_parameters()

    def test_gradient(self):
        cfg = DhenConfig(layers=[
            LayerConfig(modules=[MLPConfig(widths=[6]), TransformerConfig(layers=1, heads=2, hidden=4, ff_size=4)],
                        width=8, reshape_dim=4),
            LayerConfig(modules=[MLPConfig(widths=[6]), MaskNetConfig(blocks=2, hidden=3)], width=4)])
        net = DHEN("dhen", cfg, 4, 5, Initializer(1))
        head = Head("heads.a", HeadConfig("a", tower=[3]), 4, Initializer(1))
        x = tokens(seed=2)
        y = np.array([1.0, 0.0, 1.0])

        def fn():
            return ag.sum_pool(ag.bce_with_logits(head.logit(net(x, EVAL)), y))

        assert grad_check(fn, net.parameters() + head.parameters() + [x]) < 1e-4


class TestHeads:
    def test_zero_final_weights(self):
        head = Head("h", HeadConfig("a", tower=[4, 4]), 6, Initializer(0))
        last = head.tower.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = 0.0
        np.testing.assert_array_equal(head(Tensor(rand((5, 6)))).data, 0.5)

    def test_default_tower(self):
        head = Head("h", HeadConfig("a"), 6, Initializer(0))
        assert [layer.d_out for layer in head.tower.layers] == [128, 128, 128, 1]

    def test_probability_range(self):
        head = Head("h", HeadConfig("a", tower=[8]), 6, Initializer(3))
        p = head(Tensor(rand((10_000, 6), 4))).data
        assert ((p > 0) & (p < 1)).all()


class TestModel:
    def test_serving_heads(self, small_batch):
        model_cfg = toy_model(heads=[HeadConfig("checkout", tower=[4]), HeadConfig("add_to_cart", tower=[4]),
                                     HeadConfig("ctr", tower=[4], train_only=True)])
        model = build_model(toy_run(model=model_cfg))
        assert set(model.predict(small_batch)) == {"checkout", "add_to_cart"}
        assert "ctr" in model.predict(small_batch, include_train_only=True)

    def test_eval_deterministic(self, toy_partitions, small_batch):
        model = build_model(toy_run())
        model.features.fit(toy_partitions[:1])
        a, b = model.predict(small_batch), model.predict(small_batch)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_single_row_eval(self, toy_partitions):
        model = build_model(toy_run())
        model.features.fit(toy_partitions[:1])
        out = model.predict(toy_partitions[0].batch(np.array([3]), 12))
        assert all(v.shape == (1,) for v in out.values())

    def test_eval_is_pure(self, toy_partitions, small_batch):
        model = build_model(toy_run())
        model.features.fit(toy_partitions[:1])
        before = copy.deepcopy(model.buffers())
        model.predict(small_batch)
        for k, v in model.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_full_model_gradient(self, toy_partitions):
        run = toy_run(ssl=SslConfig(num_pos=2, num_neg=2, org_weight=0.5, ads_weight=0.5))
        model = build_model(run)
        model.features.fit(toy_partitions[:1])
        batch = toy_partitions[0].batch(np.arange(4), 6)
        # a fresh context per call keeps the dropout masks fixed
        fn = lambda: multitask_loss(model, batch, Context(train=True, seed=1), 7)[0]
        err = grad_check(fn, model.parameters(), max_coords=6)
        assert err < 1e-4

    def test_production_default_constructs(self):
        run = RunConfig().validate()
        run.world.n_users, run.world.n_ads = 50, 10
        model = build_model(run)
        names = model.parameter_names()
        assert any(n.startswith("dhen.layer1.transformer") for n in names)
        assert any(n.startswith("dhen.layer2.masknet") for n in names)
        assert model.dhen.out_dim == 1024
        assert model.dhen.grids[1] == (16, 64)
