import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pcm3 import tensor as T
from pcm3.errors import ContractError, NumericDomainError, ShapeError
from pcm3.verify import GRAD_TOL, op_graphs


def leaf(x):
    return T.Tensor(np.array(x, dtype=np.float64), requires_grad=True)


# -- forward oracles -------------------------------------------------------------------


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(np.eye(3), A).data, A)


def test_log_softmax_constant_row():
    out = T.log_softmax(np.full(4, 2.5)).data
    np.testing.assert_allclose(out, -math.log(4), rtol=0, atol=1e-15)
    assert abs(out[0] + 1.386294) < 1e-6


def test_l2_normalize_345():
    np.testing.assert_allclose(T.l2_normalize([3.0, 4.0]).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_zero_raises():
    with pytest.raises(NumericDomainError):
        T.l2_normalize(np.zeros(3))


def test_log_nonpositive_raises():
    with pytest.raises(NumericDomainError):
        T.log([1.0, 0.0])


def test_non_finite_output_raises():
    with pytest.raises(NumericDomainError):
        T.exp([1000.0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


# -- backward oracles ------------------------------------------------------------------


def test_bilinear_grad():
    x, y = leaf([1.0, 2.0]), leaf([5.0, 7.0])
    T.backward(T.sum(T.mul(x, y)))
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])
    np.testing.assert_array_equal(y.grad, [1.0, 2.0])


def test_stop_gradient_zero_grad():
    x = leaf([1.0, -2.0, 3.0])
    out = T.add(T.sum(T.stop_gradient(x)), T.scale(T.sum(x), 0.0))
    T.backward(out)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_stop_gradient_forward_bit_identical():
    x = leaf(np.random.default_rng(1).normal(size=(4, 5)))
    assert np.array_equal(T.stop_gradient(x).data, x.data)


def test_two_uses_accumulate():
    x = leaf([2.0, 3.0])
    T.backward(T.add(T.sum(T.mul(x, x)), T.sum(T.scale(x, 3.0))))
    np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)


def test_grads_accumulate_across_calls():
    x = leaf([1.0, 1.0])
    T.backward(T.sum(x))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_non_scalar_loss_raises():
    with pytest.raises(ContractError):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    y = T.tanh(T.mul(x, x))
    loss = T.sum(T.add(y, T.exp(x)))
    tape = T.tape_of(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]
    assert tape[-1] is loss


@pytest.mark.parametrize("name", sorted(op_graphs(0)))
@pytest.mark.parametrize("seed", range(3))
def test_every_op_matches_finite_differences(name, seed):
    build, params = op_graphs(seed)[name]
    assert T.grad_check(build, params, seed=seed) <= GRAD_TOL


def test_gru_with_initial_state_grad():
    g = np.random.default_rng(3)
    x, h0 = leaf(g.normal(size=(2, 4, 3))), leaf(g.normal(size=(2, 2)) * 0.5)
    wx, wh = leaf(g.uniform(-0.5, 0.5, (3, 6))), leaf(g.uniform(-0.5, 0.5, (2, 6)))
    bx, bh = leaf(np.zeros(6)), leaf(g.uniform(-0.5, 0.5, 6))
    w = g.normal(size=(2, 4, 2))
    err = T.grad_check(lambda: T.sum(T.mul(T.gru(x, wx, wh, bx, bh, h0), w)), [x, wx, wh, bx, bh, h0])
    assert err <= GRAD_TOL


def test_fault_injection_is_detected():
    build, params = op_graphs(0)["tanh"]
    with T.inject_grad_fault("tanh"):
        assert T.grad_check(build, params) > 0.1
    assert T.grad_check(build, params) <= GRAD_TOL


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 4), elements=st.floats(0.25, 3)))
def test_random_elementwise_graph_grad(a, b):
    # b stays away from 0 so no gradient coordinate is ~0 (relative error is ill-posed there).
    x, y = leaf(a), leaf(b)
    err = T.grad_check(lambda: T.sum(T.mul(T.sigmoid(T.add(x, y)), T.tanh(y))), [x, y])
    assert err <= GRAD_TOL


# -- SGD -------------------------------------------------------------------------------


def test_sgd_lr_zero_is_noop():
    p = leaf([1.0, -2.0])
    opt = T.SGD({"p": p}, lr=0.0)
    p.grad = np.array([10.0, 3.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_sgd_one_step():
    p = leaf([1.0])
    opt = T.SGD({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    T.sgd_step({"p": p}, opt)
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    assert opt.velocity["p"][0] == 1.0


def test_sgd_momentum_recursion():
    p = leaf([0.0])
    opt = T.SGD({"p": p}, lr=1.0, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert opt.velocity["p"][0] == pytest.approx(1.9, abs=1e-15)
    assert p.data[0] == pytest.approx(-2.9, abs=1e-15)


def test_sgd_weight_decay_enters_velocity():
    p = leaf([2.0])
    opt = T.SGD({"p": p}, lr=0.5, momentum=0.0, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 1.2)


def test_sgd_missing_grad_raises():
    opt = T.SGD({"p": leaf([1.0])})
    with pytest.raises(ContractError):
        opt.step()
