import math

import mpmath
import numpy as np
import pytest
from oracles import lstm_reference

from ctxreport.autodiff import (
    ContractError,
    LstmCellParams,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    blend,
    check_gradients,
    columns,
    concat,
    dropout,
    elementwise,
    gather_columns,
    linear,
    lstm_step,
    matmul,
    mul,
    scale,
    sgd_step,
    sigmoid,
    softmax,
    softmax_nll,
    tanh,
    total,
)


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def grads_of(build, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def central_fd(build, p, eps=1e-5):
    out = np.zeros_like(p.data)
    flat, g = p.data.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = float(build().data)
        flat[j] = orig - eps
        down = float(build().data)
        flat[j] = orig
        g[j] = (up - down) / (2 * eps)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        A, B = param(rng.normal(size=(3, 3))), param(rng.normal(size=(3, 3)))
        build = lambda: total(matmul(A, B))
        ga, gb = grads_of(build, [A, B])
        assert rel_err(ga, central_fd(build, A)) < 1e-6
        assert rel_err(gb, central_fd(build, B)) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_tanh_zero_value_and_slope(self):
        x = param([0.0])
        with Tape() as tape:
            y = total(elementwise("tanh", x))
        tape.backward(y)
        assert y.item() == 0.0
        assert x.grad[0] == 1.0

    def test_mul_annihilator(self):
        out = elementwise("mul", Tensor([1, 2, 3]), Tensor([0, 0, 0]))
        np.testing.assert_array_equal(out.data, [0, 0, 0])

    def test_sigmoid_derivative(self):
        x = param([-2.0, 0.3, 4.0])
        (g,) = grads_of(lambda: total(sigmoid(x)), [x])
        s = 1 / (1 + np.exp(-x.data))
        np.testing.assert_allclose(g, s * (1 - s), rtol=1e-14)

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data.tolist() == [0.0, 1.0]

    @pytest.mark.parametrize("op", ["add", "mul"])
    def test_binary_shape_mismatch(self, op):
        with pytest.raises(ShapeError):
            elementwise(op, Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            elementwise("relu", Tensor([1.0]))


class TestSoftmaxNll:
    def test_uniform_logits_give_log_vocab(self):
        loss = softmax_nll(Tensor(np.zeros(4007)), 17)
        assert loss.item() == pytest.approx(math.log(4007), abs=1e-12)
        assert loss.item() == pytest.approx(8.2958, abs=5e-5)

    def test_large_logits_do_not_overflow(self):
        loss = softmax_nll(Tensor([1000.0, 0.0]), 0)
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(0.0, abs=1e-300)

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(3)
        z = rng.normal(scale=3.0, size=5)
        mpmath.mp.dps = 50
        for t in range(5):
            exact = -mpmath.log(mpmath.e ** mpmath.mpf(z[t]) / mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in z))
            assert softmax_nll(Tensor(z), t).item() == pytest.approx(float(exact), rel=1e-14)

    def test_gradient_is_softmax_minus_onehot(self):
        z = param([0.5, -1.0, 2.0])
        (g,) = grads_of(lambda: softmax_nll(z, 1), [z])
        expected = softmax(z.data)
        expected[1] -= 1
        np.testing.assert_allclose(g, expected, atol=1e-15)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_nll(Tensor([0.0, 0.0]), 2)

    def test_masked_rows_contribute_nothing(self):
        z = param(np.random.default_rng(1).normal(size=(3, 4)))
        mask = [True, False, True]
        (g,) = grads_of(lambda: softmax_nll(z, [0, 1, 2], mask), [z])
        assert np.all(g[1] == 0.0)
        full = softmax_nll(Tensor(z.data), [0, 1, 2], mask).item()
        parts = softmax_nll(Tensor(z.data[0]), 0).item() + softmax_nll(Tensor(z.data[2]), 2).item()
        assert full == pytest.approx(parts, rel=1e-14)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = softmax(rng.normal(scale=10, size=rng.integers(2, 9)))
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all((p > 0) & (p < 1))


class TestLstmStep:
    def test_zero_params_and_state(self):
        p = LstmCellParams.zeros(3, 2)
        h, c = lstm_step(Tensor(np.zeros(3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), p)
        assert h.data.tolist() == [0.0, 0.0]
        assert c.data.tolist() == [0.0, 0.0]

    def test_hand_weights(self):
        w_ih = [[0.5], [-0.3], [0.8], [0.1], [-0.6], [0.2], [0.4], [-0.9]]
        w_hh = [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.6], [0.2, -0.1], [0.7, -0.3], [-0.5, 0.25], [0.15, 0.35], [-0.45, 0.55]]
        b = [0.1, -0.1, 1.0, 1.0, 0.0, 0.2, -0.3, 0.05]
        x, h0, c0 = [0.7], [0.2, -0.4], [0.5, -0.25]
        p = LstmCellParams(Tensor(w_ih), Tensor(w_hh), Tensor(b))
        h, c = lstm_step(Tensor(x), Tensor(h0), Tensor(c0), p)
        h_ref, c_ref = lstm_reference(x, h0, c0, w_ih, w_hh, b)
        np.testing.assert_allclose(h.data, h_ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(c.data, c_ref, atol=1e-12, rtol=0)

    def test_gradients_of_sum_h(self):
        rng = np.random.default_rng(11)
        p = LstmCellParams.init(rng, 4, 3)
        x, h0, c0 = (param(rng.normal(size=s)) for s in (4, 3, 3))
        build = lambda: total(lstm_step(x, h0, c0, p)[0])
        tracked = p.tensors() + [x, h0, c0]
        for t, g in zip(tracked, grads_of(build, tracked)):
            assert rel_err(g, central_fd(build, t)) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        p = LstmCellParams.init(rng, 5, 4)
        args = [Tensor(rng.normal(size=s)) for s in ((3, 5), (3, 4), (3, 4))]
        a = lstm_step(*args, p)
        b = lstm_step(*args, p)
        assert a[0].data.tobytes() == b[0].data.tobytes()
        assert a[1].data.tobytes() == b[1].data.tobytes()

    def test_dimension_mismatch(self):
        p = LstmCellParams.zeros(3, 2)
        with pytest.raises(ShapeError):
            lstm_step(Tensor(np.zeros(4)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), p)

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(4)
        p = LstmCellParams.init(rng, 3, 2)
        X, Hs, Cs = rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        hb, cb = lstm_step(Tensor(X), Tensor(Hs), Tensor(Cs), p)
        for r in range(5):
            h, c = lstm_step(Tensor(X[r]), Tensor(Hs[r]), Tensor(Cs[r]), p)
            np.testing.assert_allclose(hb.data[r], h.data, atol=1e-15)
            np.testing.assert_allclose(cb.data[r], c.data, atol=1e-15)


class TestBackward:
    def test_constant_loss_leaves_zero_grads(self):
        w = param(np.ones((2, 2)))
        with Tape() as tape:
            loss = total(Tensor(np.ones(3)))
        tape.backward(loss)
        assert np.all(w.grad == 0)

    def test_linear_map(self):
        W = param(np.random.default_rng(0).normal(size=(3, 4)))
        x = Tensor([1.0, -2.0, 0.5, 3.0])
        with Tape() as tape:
            loss = total(matmul(W, Tensor(x.data[:, None])))
        backward(loss)
        np.testing.assert_allclose(W.grad, np.outer(np.ones(3), x.data))

    def test_non_scalar_rejected(self):
        a = param([1.0, 2.0])
        with Tape() as tape:
            y = scale(a, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_repeated_backward_accumulates(self):
        a = param([1.0, 2.0])
        with Tape() as tape:
            y = total(mul(a, a))
        tape.backward(y)
        tape.backward(y)
        np.testing.assert_allclose(a.grad, 2 * 2 * a.data)

    def test_unused_parameter_grad_exactly_zero(self):
        used, unused = param([1.0, 2.0]), param([3.0, 4.0])
        with Tape() as tape:
            y = total(tanh(used))
        tape.backward(y)
        assert np.all(unused.grad == 0.0)
        assert np.all(used.grad != 0.0)

    def test_each_node_visited_once(self):
        a = param([0.3, -0.2])
        calls = []
        with Tape() as tape:
            b = tanh(a)
            y = total(add(b, b))
        for node in tape.nodes:
            inner = node.backward
            node.backward = lambda g, inner=inner, op=node.op: calls.append(op) or inner(g)
        tape.backward(y)
        assert sorted(calls) == sorted(n.op for n in tape.nodes)

    def test_no_recording_outside_tape(self):
        a = param([1.0])
        y = tanh(a)
        assert y.is_leaf and not y.requires_grad


OPS = {
    "matmul": lambda r: ((r.normal(size=(r.integers(1, 9), 3)), r.normal(size=(3, r.integers(1, 9)))), lambda a, b: matmul(a, b)),
    "add": lambda r: ((r.normal(size=(2, 5)), r.normal(size=(2, 5))), add),
    "mul": lambda r: ((r.normal(size=(4,)), r.normal(size=(4,))), mul),
    "sigmoid": lambda r: ((r.normal(size=(3, 4)),), sigmoid),
    "tanh": lambda r: ((r.normal(size=(6,)),), tanh),
    "linear": lambda r: ((r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=5)), linear),
    "concat": lambda r: ((r.normal(size=(2, 3)), r.normal(size=(2, 2))), lambda a, b: concat([a, b])),
    "columns": lambda r: ((r.normal(size=(3, 8)),), lambda a: columns(a, 2, 6)),
    "gather": lambda r: ((r.normal(size=(4, 6)),), lambda w: gather_columns(w, [1, 5, 1])),
    "blend": lambda r: ((r.normal(size=(3, 2)), r.normal(size=(3, 2))), lambda a, b: blend([1, 0, 1], a, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_random_shapes(name):
    """Every primitive against central differences, 100 seeds, random weighting."""
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        arrays, fn = OPS[name](rng)
        inputs = [param(a) for a in arrays]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        weight = Tensor(rng.normal(size=out_shape))
        build = lambda: total(mul(fn(*inputs), weight))
        for t, g in zip(inputs, grads_of(build, inputs)):
            worst = max(worst, rel_err(g, central_fd(build, t)))
    assert worst < 1e-4


def test_softmax_nll_gradient_random():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        V = int(rng.integers(2, 9))
        z = param(rng.normal(size=(3, V)))
        targets = rng.integers(V, size=3)
        build = lambda: softmax_nll(z, targets, [1, 1, 0])
        (g,) = grads_of(build, [z])
        worst = max(worst, rel_err(g, central_fd(build, z)))
    assert worst < 1e-4


class TestCheckGradients:
    def test_quadratic(self):
        W = param(np.random.default_rng(0).normal(size=(3, 3)))
        assert check_gradients(lambda: total(mul(W, W)), [W]) < 1e-8

    def test_lstm_chain_of_three(self):
        rng = np.random.default_rng(7)
        p = LstmCellParams.init(rng, 2, 3)
        xs = [Tensor(rng.normal(size=2)) for _ in range(3)]

        def build():
            h, c = Tensor(np.zeros(3)), Tensor(np.zeros(3))
            for x in xs:
                h, c = lstm_step(x, h, c, p)
            return total(h)

        assert check_gradients(build, p.tensors()) < 1e-4

    def test_dropout_is_rejected(self):
        W = param(np.ones((2, 2)))
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            check_gradients(lambda: total(dropout(W, 0.5, rng, training=True)), [W])

    def test_bad_eps(self):
        W = param([1.0])
        with pytest.raises(ContractError):
            check_gradients(lambda: total(W), [W], eps=0.0)


class TestSgdStep:
    def test_zero_lr_leaves_params(self):
        p = param([1.0, 2.0])
        p.grad[:] = [5.0, 5.0]
        sgd_step([p], 0.0)
        assert p.data.tolist() == [1.0, 2.0]
        assert p.grad.tolist() == [0.0, 0.0]

    def test_arithmetic(self):
        p = param([1.0])
        p.grad[:] = 2.0
        sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)

    def test_descends_convex_quadratic(self):
        rng = np.random.default_rng(0)
        W = param(rng.normal(size=(3, 3)))
        target = Tensor(rng.normal(size=(3, 3)))
        build = lambda: total(mul(add(W, scale(target, -1.0)), add(W, scale(target, -1.0))))
        before = build().item()
        grads_of(build, [W])
        sgd_step([W], 0.01)
        assert build().item() < before


class TestDropout:
    def test_identity_when_eval_or_zero_rate(self):
        a = Tensor([1.0, 2.0])
        rng = np.random.default_rng(0)
        assert dropout(a, 0.5, rng, training=False) is a
        assert dropout(a, 0.0, rng, training=True) is a

    def test_inverted_scaling(self):
        a = Tensor(np.ones(10000))
        out = dropout(a, 0.25, np.random.default_rng(0), training=True)
        kept = out.data[out.data != 0]
        assert np.all(kept == 1 / 0.75)
        assert abs(out.data.mean() - 1.0) < 0.03


class TestCheckGradientsOrder:
    def test_fourth_order_exact_on_quartic(self):
        w = param([0.7, -1.3])
        build = lambda: total(mul(mul(w, w), mul(w, w)))
        assert check_gradients(build, [w], eps=1e-2, order=4) < 1e-10
        assert check_gradients(build, [w], eps=1e-2, order=2) > 1e-6

    def test_unknown_order(self):
        w = param([1.0])
        with pytest.raises(ContractError):
            check_gradients(lambda: total(w), [w], order=3)
