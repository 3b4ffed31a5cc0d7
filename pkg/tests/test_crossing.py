import numpy as np
import pytest

from dhen_cvr import autograd as ag
from dhen_cvr.autograd import EVAL, Initializer, Tensor, grad_check
from dhen_cvr.config import DCNConfig, MaskNetConfig, MLPConfig, TransformerConfig
from dhen_cvr.crossing import (MLP, CrossingInput, DCNv2, MaskNet, TransformerCrossing, TransformerEncoder,
                               build_crossing, masked_mean)
from dhen_cvr.errors import ConfigError


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def weighted_sum(out: Tensor, seed=99) -> Tensor:
    w = Tensor(rand(out.shape, seed))
    return ag.sum_pool(ag.reshape(ag.mul(out, w), (-1,)), axis=0)


class TestMLP:
    def test_zero_weights_give_bias(self):
        m = MLP("m", 4, [5, 3], Initializer(0))
        for p in m.parameters():
            p.data[...] = 0.0
        m.layers[-1].bias.data[...] = [1.0, 2.0, 3.0]
        np.testing.assert_array_equal(m(Tensor(rand((2, 4)))).data, [[1, 2, 3], [1, 2, 3]])

    def test_identity_single_layer(self):
        m = MLP("m", 3, [3], Initializer(0))
        m.layers[0].weight.data[...] = np.eye(3)
        x = rand((4, 3))
        np.testing.assert_array_equal(m(Tensor(x)).data, x)

    def test_empty_widths(self):
        with pytest.raises(ConfigError):
            MLP("m", 3, [], Initializer(0))

    def test_gradient(self):
        m = MLP("m", 4, [5, 3], Initializer(1))
        x = Tensor(rand((3, 4)))
        assert grad_check(lambda: weighted_sum(m(x)), m.parameters() + [x]) < 1e-6


class TestDCN:
    def test_worked_example(self):
        # x0 = [1, 2], V = U = I, b = 0: x1 = x0 * x0 + x0 = [2, 6]
        m = DCNv2("dcn", DCNConfig(layers=1, rank=2), 1, 2, 2, Initializer(0))
        m.u[0].data[...] = np.eye(2)
        m.v[0].data[...] = np.eye(2)
        np.testing.assert_array_equal(m.cross(Tensor([[1.0, 2.0]])).data, [[2.0, 6.0]])

    def test_zero_u_is_identity(self):
        m = DCNv2("dcn", DCNConfig(layers=3, rank=2), 2, 3, 4, Initializer(0))
        for u in m.u:
            u.data[...] = 0.0
        x = rand((5, 6))
        np.testing.assert_array_equal(m.cross(Tensor(x)).data, x)

    def test_rank_exceeds_dim(self):
        with pytest.raises(ConfigError, match="rank"):
            DCNv2("dcn", DCNConfig(rank=7), 2, 3, 4, Initializer(0))

    def test_gradient(self):
        m = DCNv2("dcn", DCNConfig(layers=2, rank=2), 2, 3, 4, Initializer(2))
        x = Tensor(rand((3, 2, 3)))
        assert grad_check(lambda: weighted_sum(m(CrossingInput(x), EVAL)), m.parameters() + [x]) < 1e-6


class TestMaskNet:
    def cfg(self, **kw):
        return MaskNetConfig(**{"blocks": 2, "hidden": 7, "dropout": 0.0, **kw})

    def test_zero_value_projection_gives_bias(self):
        m = MaskNet("mn", self.cfg(), 4, 5, 3, Initializer(0))
        for blk in m.blocks:
            blk.v.weight.data[...] = 0.0
        out = m(CrossingInput(Tensor(rand((3, 4, 5)))), EVAL).data
        np.testing.assert_allclose(out, np.broadcast_to(m.out.bias.data, (3, 3)), atol=1e-12)

    def test_block_permutation(self):
        m = MaskNet("mn", self.cfg(), 4, 5, 3, Initializer(0))
        x = CrossingInput(Tensor(rand((3, 4, 5))))
        before = m(x, EVAL).data
        h = 7
        w = m.out.weight.data.copy()
        m.out.weight.data[:h], m.out.weight.data[h:] = w[h:], w[:h]
        m.blocks.reverse()
        np.testing.assert_allclose(m(x, EVAL).data, before, atol=1e-12)

    def test_aggregation_default(self):
        m = MaskNet("mn", self.cfg(), 4, 5, 3, Initializer(0))
        assert m.blocks[0].agg.d_out == 14

    def test_gradient(self):
        m = MaskNet("mn", self.cfg(), 4, 5, 3, Initializer(3))
        x = Tensor(rand((3, 4, 5)))
        assert grad_check(lambda: weighted_sum(m(CrossingInput(x), EVAL)), m.parameters() + [x]) < 1e-6


class TestTransformer:
    def encoder(self, seed=0, **kw):
        args = {"d_in": 3, "hidden": 4, "layers": 2, "heads": 2, "ff_size": 8, "dropout": 0.0,
                "max_positions": 8}
        args.update(kw)
        return TransformerEncoder("enc", init=Initializer(seed), **args)

    def test_zero_weights_leave_residual(self):
        enc = self.encoder()
        for p in enc.parameters():
            p.data[...] = 0.0
        enc.lift.weight.data[...] = np.eye(3, 4)
        x = rand((2, 5, 3))
        np.testing.assert_allclose(enc(Tensor(x), EVAL).data[..., :3], x, atol=1e-12)

    def test_causality(self):
        enc = self.encoder()
        x = rand((1, 5, 3))
        base = enc(Tensor(x), EVAL, causal=True).data
        y = x.copy()
        y[0, 3:] += 10.0
        pert = enc(Tensor(y), EVAL, causal=True).data
        np.testing.assert_allclose(pert[0, :3], base[0, :3], atol=1e-12)
        assert not np.allclose(pert[0, 3:], base[0, 3:])

    def test_padding_invariance(self):
        enc = self.encoder()
        x = rand((2, 6, 3))
        lengths = np.array([4, 6])
        base = enc(Tensor(x), EVAL, lengths=lengths, padded=True).data
        y = x.copy()
        y[0, 4:] = 1e3
        out = enc(Tensor(y), EVAL, lengths=lengths, padded=True).data
        np.testing.assert_allclose(out[0, :4], base[0, :4], atol=1e-10)
        pooled = masked_mean(Tensor(out), lengths).data
        np.testing.assert_allclose(pooled[0], base[0, :4].mean(axis=0), atol=1e-10)

    def test_padding_requires_lengths(self):
        with pytest.raises(ValueError, match="padding mask"):
            self.encoder()(Tensor(rand((2, 3, 3))), EVAL, padded=True)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            self.encoder(hidden=5)

    def test_gradient(self):
        m = TransformerCrossing("tr", TransformerConfig(layers=1, heads=2, hidden=8, ff_size=16, dropout=0.0),
                                5, 3, 2, Initializer(4))
        x = Tensor(rand((2, 5, 3)))
        assert grad_check(lambda: weighted_sum(m(CrossingInput(x), EVAL)), m.parameters() + [x]) < 1e-4

    def test_padded_gradient(self):
        enc = self.encoder(seed=5)
        x = Tensor(rand((2, 5, 3)))
        lengths = np.array([3, 5])
        fn = lambda: weighted_sum(masked_mean(enc(x, EVAL, lengths=lengths, causal=True, padded=True), lengths))
        assert grad_check(fn, enc.parameters() + [x]) < 1e-4


class TestBuild:
    @pytest.mark.parametrize("cfg", [MLPConfig(widths=[4]), DCNConfig(rank=2), MaskNetConfig(hidden=4),
                                     TransformerConfig(layers=1, heads=2, hidden=4, ff_size=4)])
    def test_flat_output(self, cfg):
        m = build_crossing("layer1", cfg, 3, 4, 6, Initializer(0))
        assert m(CrossingInput(Tensor(rand((2, 3, 4)))), EVAL).shape == (2, 6)
        assert all(n.startswith("layer1.") for n in m.named_parameters())
