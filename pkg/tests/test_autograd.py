import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhen_cvr import autograd as ag
from dhen_cvr.autograd import (Adam, Context, EVAL, GradCheckError, Initializer, NondeterministicFunctionError,
                               Parameter, Tape, Tensor, grad_check)
from dhen_cvr.errors import ConfigError


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestForward:
    def test_sigmoid_zero(self):
        assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_identity_matmul(self):
        a = rand((3, 3))
        np.testing.assert_array_equal(ag.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_uniform_softmax(self):
        np.testing.assert_allclose(ag.softmax(Tensor([1.0, 1, 1, 1])).data, [0.25] * 4, atol=1e-15)

    def test_layer_norm_example(self):
        out = ag.layer_norm(Tensor([2.0, 4.0, 6.0]), eps=0.0).data
        np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_rejects_general_broadcasting(self):
        with pytest.raises(ag.ShapeError):
            ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
        with pytest.raises(ag.ShapeError):
            ag.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_bias_broadcast_allowed(self):
        out = ag.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_matmul_shape_error_is_descriptive(self):
        with pytest.raises(ag.ShapeError, match="matmul"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batch_norm_train_needs_two_rows(self):
        bn = ag.BatchNorm("bn", 3)
        with pytest.raises(ag.ShapeError):
            bn(Tensor(np.ones((1, 3))), Context(train=True))
        bn(Tensor(np.ones((1, 3))), EVAL)

    def test_non_finite_is_an_error(self):
        with pytest.raises(ag.NonFiniteError):
            ag.log(Tensor([0.0]))

    def test_zero_extent_rejected(self):
        with pytest.raises(ag.ShapeError):
            Tensor(np.zeros((0, 3)))


class TestBackward:
    def test_square_gradient(self):
        w = Parameter("w", [3.0, -2.0])
        with Tape() as tape:
            loss = ag.sum_pool(ag.mul(w, w))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [6.0, -4.0])

    def test_sigmoid_gradient(self):
        w = Parameter("w", [0.0])
        with Tape() as tape:
            loss = ag.sum_pool(ag.sigmoid(w))
        tape.backward(loss)
        assert w.grad[0] == 0.25

    def test_double_backward_accumulates(self):
        w = Parameter("w", rand(4))
        with Tape() as tape:
            loss = ag.sum_pool(ag.exp(w))
        tape.backward(loss)
        first = w.grad.copy()
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, 2 * first)

    def test_zero_grad_then_repeat_is_bit_identical(self):
        w = Parameter("w", rand((3, 4)))
        x = Tensor(rand((2, 3), 1))

        def run():
            w.grad = None
            with Tape() as tape:
                loss = ag.sum_pool(ag.softmax(ag.matmul(x, w)) * Tensor(rand((2, 4), 2)))
            tape.backward(loss)
            return w.grad.copy()

        np.testing.assert_array_equal(run(), run())

    def test_non_scalar_loss_rejected(self):
        w = Parameter("w", rand(3))
        with Tape() as tape:
            out = ag.exp(w)
        with pytest.raises(ag.ShapeError):
            tape.backward(out)

    def test_embedding_gradient_support(self):
        table = Parameter("t", rand((5, 3)))
        with Tape() as tape:
            loss = ag.sum_pool(ag.embedding(table, np.array([2])))
        tape.backward(loss)
        expected = np.zeros((5, 3))
        expected[2] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_repeated_ids_sum_contributions(self):
        table = Parameter("t", rand((4, 2)))
        weights = Tensor(rand((2, 2), 3))
        with Tape() as tape:
            loss = ag.sum_pool(ag.mul(ag.embedding(table, np.array([1, 1])), weights))
        tape.backward(loss)
        np.testing.assert_allclose(table.grad[1], weights.data.sum(axis=0))
        err = grad_check(lambda: ag.sum_pool(ag.mul(ag.embedding(table, np.array([1, 1])), weights)), [table])
        assert err < 1e-8


def _primitives():
    r = np.random.default_rng(7)
    g, b = Tensor(r.standard_normal(4)), Tensor(r.standard_normal(4))
    w = Tensor(r.standard_normal((4, 3)))
    rm, rv = np.zeros(4), np.ones(4)
    return {
        "matmul": lambda x: ag.matmul(x, w),
        "sigmoid": ag.sigmoid,
        "relu": lambda x: ag.relu(ag.add(x, Tensor(np.full(4, 0.05)))),
        "softmax": lambda x: ag.softmax(x, axis=-1),
        "log_softmax": lambda x: ag.log_softmax(x, axis=0),
        "log": lambda x: ag.log(ag.exp(x)),
        "layer_norm": lambda x: ag.layer_norm(x, g, b),
        "batch_norm": lambda x: ag.batch_norm(x, g, b, rm.copy(), rv.copy(), train=True),
        "dropout": lambda x: ag.dropout(x, 0.3, True, seed=11),
        "concat": lambda x: ag.concat([x, ag.scale(x, 2.0)], axis=0),
        "slice": lambda x: ag.slice_(x, (slice(1, 3),)),
        "reshape": lambda x: ag.reshape(x, (4, 3)),
        "mean_pool": lambda x: ag.mean_pool(x, axis=0),
        "sub": lambda x: ag.sub(x, ag.exp(x)),
    }


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(_primitives()))
    def test_primitive(self, name):
        fn = _primitives()[name]
        x = Tensor(rand((3, 4), 5))
        weights = Tensor(rand(fn(Tensor(x.data)).shape, 6))
        err = grad_check(lambda: ag.sum_pool(ag.mul(fn(x), weights)), [x])
        assert err < 1e-6, name

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    def test_random_shapes(self, m, n, seed):
        x = Tensor(rand((m, n), seed))
        w = Tensor(rand((n, 3), seed + 1))
        err = grad_check(lambda: ag.sum_pool(ag.sigmoid(ag.matmul(x, w))), [x, w])
        assert err < 1e-6

    def test_sum_of_squares_is_exact(self):
        x = Tensor(rand(6))
        assert grad_check(lambda: ag.sum_pool(ag.mul(x, x)), [x]) < 1e-9

    def test_sign_flip_detected(self):
        def bad(a):
            return ag.apply_op("bad", a.data ** 2, (a,), lambda g: (-2 * a.data * g,))

        x = Tensor(rand(4) + 3.0)
        err = grad_check(lambda: ag.sum_pool(bad(x)), [x])
        assert err == pytest.approx(2.0, rel=1e-6)
        with pytest.raises(GradCheckError):
            grad_check(lambda: ag.sum_pool(bad(x)), [x], tolerance=1e-4)

    def test_nondeterministic_function_rejected(self):
        x = Tensor(rand(50))
        with pytest.raises(NondeterministicFunctionError):
            grad_check(lambda: ag.sum_pool(ag.dropout(x, 0.5, True, seed=None)), [x])


class TestInvariants:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    def test_softmax_normalized(self, m, n, seed):
        out = ag.softmax(Tensor(rand((m, n), seed) * 10), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
    def test_sigmoid_range(self, xs):
        out = ag.sigmoid(Tensor(xs)).data
        assert ((out > 0) & (out < 1)).all()

    def test_round_trips_bit_exact(self):
        x = Tensor(rand((3, 4)))
        back = ag.reshape(ag.reshape(x, (12,)), (3, 4))
        np.testing.assert_array_equal(back.data, x.data)
        parts = ag.concat([ag.slice_(x, (slice(0, 1),)), ag.slice_(x, (slice(1, 3),))], axis=0)
        np.testing.assert_array_equal(parts.data, x.data)

    def test_dropout_eval_identity_and_fixed_seed(self):
        x = Tensor(rand(1000))
        np.testing.assert_array_equal(ag.dropout(x, 0.4, False, seed=1).data, x.data)
        a = ag.dropout(x, 0.4, True, seed=3).data
        b = ag.dropout(x, 0.4, True, seed=3).data
        np.testing.assert_array_equal(a, b)
        zeros = int((a == 0).sum())
        sd = math.sqrt(1000 * 0.4 * 0.6)
        assert abs(zeros - 400) < 4 * sd
        kept = a != 0
        np.testing.assert_allclose(a[kept], x.data[kept] / 0.6)

    def test_flop_counter_linear(self):
        lin = ag.Linear("l", 5, 7, Initializer(0))
        with ag.FlopCounter() as fc:
            lin(Tensor(rand((1, 5))))
        assert fc.flops == 2 * 5 * 7 + 7


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        bn = ag.BatchNorm("bn", 3)
        out = bn(Tensor(rand((200, 3)) * 5 + 2), Context(train=True)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=0, ddof=1), 1.0, atol=1e-3)

    def test_constant_column_maps_to_shift(self):
        bn = ag.BatchNorm("bn", 2)
        out = bn(Tensor(np.full((4, 2), 3.0)), Context(train=True)).data
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_eval_converges_to_train(self):
        bn = ag.BatchNorm("bn", 4)
        r = np.random.default_rng(0)
        for _ in range(50):
            bn(Tensor(r.standard_normal((4096, 4)) * 2 + 1), Context(train=True))
        x = Tensor(r.standard_normal((4096, 4)) * 2 + 1)
        diff = np.abs(bn(x, EVAL).data - bn(x, Context(train=True)).data).max()
        assert diff < 0.1


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = Parameter("p", rand(5))
        before = p.data.copy()
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(5)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_example(self):
        p = Parameter("w", [1.0])
        opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_mirror_symmetry(self):
        a, b = Parameter("a", [0.7]), Parameter("b", [-0.7])
        oa, ob = Adam([a], lr=0.05), Adam([b], lr=0.05)
        for _ in range(2):
            a.grad, b.grad = 2 * a.data, 2 * b.data
            oa.step()
            ob.step()
        assert a.data[0] == -b.data[0]

    def test_non_positive_lr(self):
        with pytest.raises(ConfigError):
            Adam([Parameter("p", [1.0])], lr=0.0)
        with pytest.raises(ConfigError):
            ag.adam_step([np.ones(1)], [np.ones(1)], [np.zeros(1)], [np.zeros(1)], -1.0, 0.9, 0.999, 1e-8, 1)


class TestModules:
    def test_initializer_is_order_independent(self):
        a = Initializer(3).normal("x.w", (2, 2), 1.0)
        Initializer(3).normal("y.w", (2, 2), 1.0)
        np.testing.assert_array_equal(a, Initializer(3).normal("x.w", (2, 2), 1.0))

    def test_embedding_oov_mapping(self):
        emb = ag.Embedding("e", 4, 2, Initializer(0))
        out = emb(np.array([7, -1, 2])).data
        np.testing.assert_array_equal(out[0], emb.table.data[0])
        np.testing.assert_array_equal(out[1], emb.table.data[0])
        assert emb.oov_count == 2

    def test_load_state_reports_mismatches(self):
        lin = ag.Linear("l", 2, 3, Initializer(0))
        with pytest.raises(ValueError, match="l.weight"):
            ag.load_state(lin, {"l.weight": np.zeros((3, 3)), "l.bias": np.zeros(3)})
        with pytest.raises(ValueError, match="missing l.bias"):
            ag.load_state(lin, {"l.weight": np.zeros((2, 3))})
