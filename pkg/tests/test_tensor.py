"""Autodiff tape: forward values against oracles, gradients against finite differences."""

import numpy as np
import pytest

from dyndepth import tensor as T
from dyndepth.errors import ContractError, NonFiniteError, ShapeError
from dyndepth.tensor import LAYER_NORM_EPS, Tensor

from conftest import finite_difference, rel_err


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_projector():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    v = Tensor([[5.0], [7.0]])
    np.testing.assert_array_equal(T.matmul(p, v).data, [[5.0], [0.0]])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=0)


def test_softmax_stability_limit():
    out = T.softmax(Tensor([1000.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_high_precision_oracle():
    x = np.array([1.0, 2.0, 3.0])
    # independent evaluation in extended precision
    hp = np.exp(x.astype(np.longdouble))
    hp = (hp / hp.sum()).astype(np.float64)
    np.testing.assert_allclose(T.softmax(Tensor(x), axis=0).data, hp, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(3).normal(size=(4, 5))
    got = T.log_softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.exp(got), T.softmax(Tensor(x), axis=1).data, atol=1e-14)
    np.testing.assert_allclose(np.exp(got).sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_closed_form():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    expect = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + LAYER_NORM_EPS)
    np.testing.assert_allclose(out.data, expect, atol=1e-15)


def test_masked_mean_pool_single_row():
    out = T.masked_mean_pool(Tensor([[2.0, 4.0], [0.0, 0.0]]), 1)
    np.testing.assert_array_equal(out.data, [2.0, 4.0])


def test_masked_mean_pool_two_rows():
    out = T.masked_mean_pool(Tensor([[1.0, 1.0], [3.0, 3.0]]), 2)
    np.testing.assert_array_equal(out.data, [2.0, 2.0])


def test_masked_mean_pool_slice_oracle():
    x = np.random.default_rng(1).normal(size=(5, 3))
    out = T.masked_mean_pool(Tensor(x), 3)
    np.testing.assert_allclose(out.data, x[:3].mean(axis=0), atol=1e-15)


def test_constructor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


# ---------------------------------------------------------------------------
# gradients


def test_sum_gradient_all_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_polynomial_gradient():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0, abs=0)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4, 2)))

    def loss():
        return float(np.sum(a.data @ b.data) + np.sum((a.data @ b.data) ** 2))

    def tape_loss():
        prod = T.matmul(a, b)
        return T.add(T.tsum(prod), T.tsum(T.mul(prod, prod)))

    tape_loss().backward()
    for t in (a, b):
        fd = finite_difference(loss, t.data)
        worst = max(
            rel_err(f, g) for f, g in zip(fd.reshape(-1), t.grad.reshape(-1))
        )
        assert worst < 1e-6


@pytest.mark.parametrize(
    "make",
    [
        lambda x: T.tsum(T.relu(x)),
        lambda x: T.tsum(T.exp(T.scale(x, 0.3))),
        lambda x: T.tsum(T.softmax(x, axis=1)) + T.tsum(T.mul(T.softmax(x, axis=1), x)),
        lambda x: T.tsum(T.log_softmax(x, axis=1)),
        lambda x: T.tsum(T.mul(T.transpose(x), T.transpose(x))),
        lambda x: T.tsum(T.narrow(x, 1, 1, 3)),
        lambda x: T.element(x, 5) * T.element(x, 2),
        lambda x: T.tsum(T.reshape(x, (12,))),
    ],
)
def test_op_gradients_vs_finite_differences(make):
    x = leaf(np.random.default_rng(11).normal(size=(3, 4)) + 0.05)
    make(x).backward()
    fd = finite_difference(lambda: make(leaf(x.data.copy())).item(), x.data)
    worst = max(rel_err(f, g) for f, g in zip(fd.reshape(-1), x.grad.reshape(-1)))
    assert worst < 1e-6


def test_layer_norm_gradient_vs_finite_differences():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 4)))
    g = leaf(rng.normal(size=4))
    b = leaf(rng.normal(size=4))
    w = Tensor(rng.normal(size=(3, 4)))  # weighting makes the loss non-symmetric

    def tape_loss(xx, gg, bb):
        return T.tsum(T.mul(T.layer_norm(xx, gg, bb), w))

    tape_loss(x, g, b).backward()
    for t in (x, g, b):
        fd = finite_difference(lambda: tape_loss(x, g, b).item(), t.data)
        worst = max(rel_err(f, a) for f, a in zip(fd.reshape(-1), t.grad.reshape(-1)))
        assert worst < 1e-6


def test_concat_and_add_rowvec_gradients():
    rng = np.random.default_rng(9)
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.normal(size=(2, 2)))
    v = leaf(rng.normal(size=5))
    w = Tensor(rng.normal(size=(2, 5)))

    def tape_loss():
        return T.tsum(T.mul(T.add_rowvec(T.concat([a, b], axis=1), v), w))

    tape_loss().backward()
    for t in (a, b, v):
        fd = finite_difference(lambda: tape_loss().item(), t.data)
        worst = max(rel_err(f, g) for f, g in zip(fd.reshape(-1), t.grad.reshape(-1)))
        assert worst < 1e-6


def test_backward_twice_doubles_leaf_gradients():
    x = leaf(np.array([1.0, 2.0, 3.0]))
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_shared_subexpression_accumulates():
    x = leaf(2.0)
    y = x * x  # used twice below
    (y + y).backward()
    assert x.grad == pytest.approx(8.0, abs=0)


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        T.relu(x).backward()


def test_detach_blocks_gradient():
    x = leaf(3.0)
    d = x.detach()
    assert not d.requires_grad and d.is_leaf()
