import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vaediff_docre.engine as E
from vaediff_docre.engine import Tensor
from vaediff_docre.errors import ContractError, DomainError, ShapeError

N_INSTANCES = 20


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


class TestForwardExamples:
    def test_logsumexp_two_values(self):
        out = E.logsumexp(Tensor([0.0, math.log(3.0)]), axis=0)
        assert out.item() == pytest.approx(math.log(4.0), abs=1e-12)

    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 800.0])
    def test_softmax_uniform(self, c):
        out = E.softmax(Tensor([c, c, c]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_matmul_row_sums(self):
        out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 1)))
        assert out.shape == (2, 1)
        np.testing.assert_array_equal(out.data, [[3.0], [3.0]])

    def test_matmul_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        assert exc.value.op == "matmul"
        assert exc.value.shapes == ((2, 3), (2, 3))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            E.log(Tensor([1.0, 0.0]))

    def test_logsumexp_stable_for_large_inputs(self):
        out = E.logsumexp(Tensor([1000.0, 1000.0]), axis=0)
        assert out.item() == pytest.approx(1000.0 + math.log(2.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=12))
    def test_logsumexp_shift_identity(self, xs):
        x = np.array(xs)
        lhs = E.logsumexp(Tensor(x), axis=0).item()
        rhs = E.logsumexp(Tensor(x - x.max()), axis=0).item() + x.max()
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_batch_norm_train_updates_running_stats(self):
        rng = np.random.default_rng(0)
        x = rng.normal(loc=2.0, size=(50, 3))
        rm, rv = np.zeros(3), np.ones(3)
        E.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, mode="train", momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_batch_norm_eval_is_affine(self):
        rng = np.random.default_rng(1)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
        gain, bias = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        f = lambda x: E.batch_norm(Tensor(x), gain, bias, rm.copy(), rv.copy(), mode="eval").data
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        # affine: f(ta + (1-t)b) = t f(a) + (1-t) f(b)
        np.testing.assert_allclose(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b), atol=1e-12)
        np.testing.assert_array_equal(f(a), f(a))

    def test_slice_copies(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        s = x[0]
        s.data[0] = 99.0
        assert x.data[0, 0] == 0.0


class TestBackwardExamples:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        E.tsum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_tanh_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        E.tanh(x).backward()
        assert x.grad == pytest.approx(1.0)

    def test_logsumexp_grad(self):
        x = Tensor([0.0, 0.0], requires_grad=True)
        E.logsumexp(x, axis=0).backward()
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            E.backward(x * 2.0)

    def test_unreachable_leaf_has_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        E.zero_grad([x, y])
        E.tsum(x * x).backward()
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_reuse_accumulates(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(3, 3))
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        h = E.tanh(E.matmul(E.reshape(x, (1, 3)), Tensor(w)))
        E.tsum(h * x + E.exp(x)).backward()
        # duplicated-leaf construction: two independent copies, grads summed
        x1 = Tensor(x.data, requires_grad=True)
        x2 = Tensor(x.data, requires_grad=True)
        x3 = Tensor(x.data, requires_grad=True)
        h2 = E.tanh(E.matmul(E.reshape(x1, (1, 3)), Tensor(w)))
        E.tsum(h2 * x2 + E.exp(x3)).backward()
        np.testing.assert_allclose(x.grad, x1.grad + x2.grad + x3.grad, atol=1e-14)

    def test_tape_reverse_order(self):
        x = Tensor([1.0], requires_grad=True)
        y = E.tsum(E.exp(x) * x)
        tape = E.Tape.trace(y)
        ids = [n.output_id for n in tape.nodes]
        assert ids == sorted(ids)
        for node in tape.nodes:
            assert all(i is None or i < node.output_id for i in node.input_ids)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with E.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.tape_id is None


def _scalarize(out: Tensor, w: np.ndarray) -> Tensor:
    return E.tsum(out * Tensor(w))


UNARY = {
    "tanh": (E.tanh, {}),
    "sigmoid": (E.sigmoid, {}),
    "softplus": (E.softplus, {}),
    "exp": (E.exp, {"scale": 0.5}),
    "log": (lambda x: E.log(E.exp(x) + 0.1), {}),
    "sqrt": (lambda x: E.sqrt(x * x + 0.5), {}),
    "power": (lambda x: E.power(x, 3), {}),
    "leaky_relu": (lambda x: E.leaky_relu(x, 0.2), {}),
    "neg": (lambda x: -x, {}),
    "silu": (E.silu, {}),
    "softmax": (lambda x: E.softmax(x, axis=-1), {}),
    "softmax_axis0": (lambda x: E.softmax(x, axis=0), {}),
    "log_softmax": (lambda x: E.log_softmax(x, axis=-1), {}),
    "logsumexp": (lambda x: E.logsumexp(x, axis=-1), {}),
    "logsumexp_keep": (lambda x: E.logsumexp(x, axis=0, keepdims=True), {}),
    "sum_axis": (lambda x: E.tsum(x, axis=1), {}),
    "mean_axis": (lambda x: E.mean(x, axis=0, keepdims=True), {}),
    "reshape": (lambda x: E.reshape(x, (-1,)), {}),
    "transpose": (lambda x: E.transpose(x, (1, 0)), {}),
    "slice": (lambda x: x[1:, ::2], {}),
    "fancy_index": (lambda x: x[np.array([0, 2, 0])], {}),
    "l2_normalize": (lambda x: E.l2_normalize(x, axis=-1), {}),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, kw = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(N_INSTANCES):
        x = _rand(rng, 3, 4, scale=kw.get("scale", 1.0))
        w = rng.normal(size=fn(x).shape)
        rep = E.finite_difference_check(lambda t: _scalarize(fn(t), w), x, eps=1e-5, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-4, worst


BINARY = {
    "add": (lambda a, b: a + b, (3, 4), (4,)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": (lambda a, b: a * b, (3, 4), (3, 4)),
    "div": (lambda a, b: a / (E.exp(b) + 0.5), (2, 3), (2, 3)),
    "matmul": (lambda a, b: a @ b, (3, 4), (4, 2)),
    "batched_matmul": (lambda a, b: a @ b, (2, 3, 4), (2, 4, 5)),
    "broadcast_matmul": (lambda a, b: a @ b, (2, 3, 4), (4, 2)),
    "concat": (lambda a, b: E.concat([a, b], axis=1), (3, 2), (3, 4)),
    "stack": (lambda a, b: E.stack([a, b], axis=1), (3, 2), (3, 2)),
    "mse": (lambda a, b: E.mse(a, b), (3, 4), (3, 4)),
    "where": (lambda a, b: E.where(np.array([[True, False, True]]), a, b), (2, 3), (2, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(N_INSTANCES):
        a, b = _rand(rng, *sa), _rand(rng, *sb)
        w = rng.normal(size=fn(a, b).shape)
        rep = E.finite_difference_check(lambda x, y: _scalarize(fn(x, y), w), [a, b])
        worst = max(worst, rep.max_rel_error)
    assert worst <= 1e-4, worst


def test_embedding_lookup_gradient():
    rng = np.random.default_rng(7)
    idx = np.array([[0, 3], [3, 1]])
    for _ in range(N_INSTANCES):
        table = _rand(rng, 5, 3)
        w = rng.normal(size=(2, 2, 3))
        rep = E.finite_difference_check(lambda t: _scalarize(E.embedding_lookup(t, idx), w), table)
        assert rep.passed, rep


def test_layer_norm_gradient():
    rng = np.random.default_rng(8)
    for _ in range(N_INSTANCES):
        x, g, b = _rand(rng, 3, 5), _rand(rng, 5), _rand(rng, 5)
        w = rng.normal(size=(3, 5))
        rep = E.finite_difference_check(lambda *t: _scalarize(E.layer_norm(*t), w), [x, g, b])
        assert rep.passed, rep


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradient(mode):
    rng = np.random.default_rng(9)
    for _ in range(N_INSTANCES):
        x, g, b = _rand(rng, 6, 4), _rand(rng, 4), _rand(rng, 4)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        w = rng.normal(size=(6, 4))

        def f(*t):
            return _scalarize(E.batch_norm(*t, rm.copy(), rv.copy(), mode=mode), w)

        rep = E.finite_difference_check(f, [x, g, b])
        assert rep.passed, rep


class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(0)
        x = _rand(rng, 10)
        rep = E.finite_difference_check(lambda t: E.tsum(t * t), x, eps=1e-5)
        assert rep.max_rel_error < 1e-8

    def test_softplus_at_zero(self):
        x = Tensor(np.zeros(4))
        rep = E.finite_difference_check(lambda t: E.tsum(E.softplus(t)), x)
        assert rep.passed
        x.requires_grad = True
        E.tsum(E.softplus(x)).backward()
        np.testing.assert_allclose(x.grad, 0.5)

    def test_composite_random(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(4, 4)))
        x = _rand(rng, 4, 4)
        rep = E.finite_difference_check(lambda t: E.tsum(E.logsumexp(E.tanh(t @ w), axis=-1)), x)
        assert rep.max_rel_error < 1e-4

    def test_detects_wrong_gradient(self):
        def bad(t):
            out = E.tsum(t * t)
            out._backward = lambda g: (g * 0.0,)  # deliberately broken rule
            return out

        x = Tensor(np.array([1.0, 2.0]))
        assert not E.finite_difference_check(bad, x).passed


class TestAdamW:
    def test_zero_gradient_no_decay_is_noop(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = E.AdamWState.for_params([p], lr=0.1)
        E.adamw_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr(self):
        p = Tensor(0.0, requires_grad=True)
        state = E.AdamWState.for_params([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        E.adamw_step([p], [np.array(1.0)], state)
        assert p.data == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)
        assert state.step == 1

    def test_decoupled_decay(self):
        p = Tensor(1.0, requires_grad=True)
        state = E.AdamWState.for_params([p], lr=0.1, weight_decay=0.01)
        E.adamw_step([p], [np.array(0.0)], state)
        assert p.data == pytest.approx(0.999, abs=1e-15)

    def test_step_counter_and_shapes(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True)
        opt = E.AdamW([p], lr=0.01)
        for k in range(3):
            p.grad = np.ones((2, 2))
            opt.step()
            assert opt.state.step == k + 1
            assert opt.state.m[0].shape == (2, 2)
        with pytest.raises(ShapeError):
            E.adamw_step([p], [np.ones(3)], opt.state)

    def test_rejects_non_positive_lr(self):
        p = Tensor(1.0, requires_grad=True)
        with pytest.raises(ContractError):
            E.adamw_step([p], [np.array(1.0)], E.AdamWState.for_params([p], lr=0.0))

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = E.AdamW([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            E.tsum(p * p).backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestModules:
    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(0)
        bn = E.BatchNorm1d(3)
        lin = E.Linear(3, 2, rng)
        bn(Tensor(rng.normal(size=(5, 3))))
        sd = bn.state_dict()
        assert set(sd) == {"gain", "bias", "running_mean", "running_var"}
        bn2 = E.BatchNorm1d(3)
        bn2.load_state_dict(sd)
        np.testing.assert_array_equal(bn2._buffers["running_mean"], bn._buffers["running_mean"])
        assert [n for n, _ in lin.named_parameters()] == ["weight", "bias"]

    def test_attention_rows_are_distributions(self):
        rng = np.random.default_rng(0)
        attn = E.MultiHeadSelfAttention(8, 2, rng)
        out, probs = attn(Tensor(rng.normal(size=(5, 8))))
        assert out.shape == (5, 8) and probs.shape == (2, 5, 5)
        np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)

    def test_attention_gradient(self):
        rng = np.random.default_rng(0)
        attn = E.MultiHeadSelfAttention(4, 2, rng)
        x = _rand(rng, 2, 3, 4)
        w = rng.normal(size=(2, 3, 4))
        rep = E.finite_difference_check(lambda t, *_: _scalarize(attn(t)[0], w), [x] + attn.parameters())
        assert rep.passed, rep
