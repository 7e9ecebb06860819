from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emomoe.core import (
    Adam,
    ContractViolation,
    NumericFault,
    RngStream,
    Tensor,
    backward,
    no_grad,
)
from emomoe.core import tensor as T

from .conftest import check_gradients


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
    loss = (x * x).sum()
    backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_constant_loss_gives_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    loss = (x * 0.0).sum()
    backward(loss)
    np.testing.assert_allclose(x.grad, [0.0, 0.0])


def test_grad_accumulates_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        backward(x * x)


def test_nan_in_forward_names_the_op():
    x = Tensor([-1.0], requires_grad=True)
    loss = T.log(x).sum()
    with pytest.raises(NumericFault, match="log"):
        backward(loss)


def test_intermediates_carry_no_persistent_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    mid = x * 3.0
    backward(mid.sum())
    assert mid.grad is None
    assert x.grad is not None


def test_mlp_matches_finite_differences(rng):
    w1 = Tensor(rng.normal((5, 7), 0.5), requires_grad=True, name="w1")
    b1 = Tensor(rng.normal((7,), 0.5), requires_grad=True, name="b1")
    w2 = Tensor(rng.normal((7, 4), 0.5), requires_grad=True, name="w2")
    b2 = Tensor(rng.normal((4,), 0.5), requires_grad=True, name="b2")
    w3 = Tensor(rng.normal((4, 1), 0.5), requires_grad=True, name="w3")
    x = rng.normal((3, 5))

    def loss():
        h1 = T.relu(Tensor(x) @ w1 + b1)
        h2 = T.tanh(h1 @ w2 + b2)
        return ((h2 @ w3) ** 2).mean()

    check_gradients(loss, [w1, b1, w2, b2, w3])


def test_softmax_rows_are_probabilities(rng):
    x = Tensor(rng.normal((6, 9), 3.0))
    y = T.softmax(x).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(6), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_softmax_rows_sum_to_one_property(seed):
    x = RngStream(seed).normal((4, 8), 5.0)
    y = T.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_layer_types_match_finite_differences(rng):
    # softmax
    w = Tensor(rng.normal((4, 4), 0.5), requires_grad=True, name="w_sm")
    x = rng.normal((3, 4))
    check_gradients(lambda: (T.softmax(Tensor(x) @ w) ** 2).sum(), [w])
    # layernorm
    g = Tensor(np.ones(6), requires_grad=True, name="gamma")
    b = Tensor(np.zeros(6), requires_grad=True, name="beta")
    wx = Tensor(rng.normal((6, 6), 0.5), requires_grad=True, name="w_ln")
    xs = rng.normal((4, 6))
    check_gradients(
        lambda: (T.layer_norm(Tensor(xs) @ wx, g, b) ** 2).mean(), [g, b, wx]
    )
    # cross entropy
    wl = Tensor(rng.normal((5, 3), 0.5), requires_grad=True, name="w_ce")
    xl = rng.normal((4, 5))
    targets = np.array([0, 2, 1, 2])
    check_gradients(
        lambda: T.cross_entropy_rows(Tensor(xl) @ wl, targets).mean(), [wl]
    )
    # embedding lookup
    table = Tensor(rng.normal((7, 4), 0.5), requires_grad=True, name="emb")
    ids = np.array([[0, 3, 3], [2, 1, 6]])
    check_gradients(lambda: (T.rows(table, ids) ** 2).sum(), [table])


def test_batched_matmul_and_swap_match_fd(rng):
    q = Tensor(rng.normal((2, 3, 4), 0.5), requires_grad=True, name="q")
    k = Tensor(rng.normal((2, 3, 4), 0.5), requires_grad=True, name="k")
    check_gradients(lambda: ((q @ k.swap_last2()) ** 2).sum(), [q, k])


def test_conv1d_and_repeat_match_fd(rng):
    w = Tensor(rng.normal((4, 3, 5), 0.4), requires_grad=True, name="conv_w")
    b = Tensor(rng.normal((5,), 0.4), requires_grad=True, name="conv_b")
    x = Tensor(rng.normal((2, 8, 3), 0.5), requires_grad=True, name="conv_x")

    def loss():
        y = T.conv1d(x, w, b, stride=2, pad_left=1, pad_right=1)
        return (T.repeat_time(y, 2) ** 2).mean()

    check_gradients(loss, [w, b, x])


def test_concat_getitem_scatter_match_fd(rng):
    a = Tensor(rng.normal((3, 4), 0.5), requires_grad=True, name="a")
    c = Tensor(rng.normal((2, 4), 0.5), requires_grad=True, name="c")

    def loss():
        joined = T.concat([a, c], axis=0)
        picked = T.take_batch(joined, np.array([0, 4, 2]))
        spread = T.scatter_batch(picked, np.array([1, 0, 3]), batch=5)
        return (spread[1:4] ** 2).sum()

    check_gradients(loss, [a, c])


def test_detach_blocks_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = (x.detach() * x).sum()
    backward(y)
    np.testing.assert_allclose(x.grad, [3.0])


def test_no_grad_prunes_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_mean_over_mask():
    v = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    m = np.array([True, False, True, False])
    assert T.mean_over_mask(v, m).item() == pytest.approx(2.0)
    with pytest.raises(ContractViolation):
        T.mean_over_mask(v, np.zeros(4, dtype=bool))


class TestAdam:
    def test_zero_grad_leaves_params_unchanged(self):
        p = Tensor([1.0, -2.0], requires_grad=True, name="p")
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0, -2.0])
        assert opt.step_count == 1

    def test_constant_grad_descends(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([1.0])
            opt.step()
        assert p.data[0] < -0.1

    def test_first_step_magnitude_is_lr(self):
        # bias correction makes the very first update exactly lr * sign(g)
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        p = Tensor([0.0, 1.0], requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros(3)
        with pytest.raises(ContractViolation):
            opt.step()


class TestRngStream:
    def test_same_seed_bit_identical(self):
        a = RngStream(99)
        b = RngStream(99)
        np.testing.assert_array_equal(a.normal((16,)), b.normal((16,)))
        np.testing.assert_array_equal(a.permutation(10), b.permutation(10))
        assert a.counter == b.counter == 2

    def test_children_are_independent_and_stable(self):
        a = RngStream(5).child("tokenizer")
        b = RngStream(5).child("tokenizer")
        c = RngStream(5).child("stream")
        assert a.seed == b.seed != c.seed
