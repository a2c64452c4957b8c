import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import loop_conv, loop_matmul

from hfmf import tensor as T
from hfmf.errors import ContractError, DimensionError
from hfmf.gradcheck import check_gradients
from hfmf.optim import Adam, OptimizerState, optimizer_step
from hfmf.tensor import Tensor

SEEDS = range(10)


# -- matmul ------------------------------------------------------------------
def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - loop_matmul(a, b))) < 1e-12


def test_matmul_zeros():
    a = np.random.default_rng(1).normal(size=(2, 2))
    np.testing.assert_array_equal(T.matmul(Tensor(np.zeros((2, 2))), Tensor(a)).data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# -- softmax -----------------------------------------------------------------
def test_softmax_symmetric_and_forced():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    c = rng.normal() * 10
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, T.softmax_rows(Tensor(x)).data, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all(np.isfinite(out))


# -- conv2d ------------------------------------------------------------------
def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 5))
    k = np.ones((1, 1, 1, 1))
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), stride=1, padding=0).data, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 1, 3, 3))
    assert np.max(np.abs(T.conv2d(Tensor(x), Tensor(k)).data - loop_conv(x, k))) < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_strided_padded_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    ref = loop_conv(x, k, stride, pad)
    assert out.shape == ref.shape == (3, (7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_depthwise_conv_is_per_channel():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), padding=1, groups=3).data
    for c in range(3):
        ref = loop_conv(x[c:c + 1], k[c:c + 1], 1, 1)
        assert np.max(np.abs(out[c] - ref[0])) < 1e-12


def test_conv_zero_input():
    k = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
    np.testing.assert_array_equal(T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(k), padding=1).data, 0.0)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)


# -- backward ----------------------------------------------------------------
def test_sum_grad_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_unreachable_tensor_grad_stays_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_gradient_accumulates_over_shared_subgraph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * np.array([1.0, 2.0]))


def _rand(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


PRIMITIVES = {
    "matmul": lambda r: (lambda a, b: (T.matmul(a, b) ** 2).sum(), [_rand(r, (3, 4)), _rand(r, (4, 2))]),
    "batched_matmul": lambda r: (lambda a, b: (T.matmul(a, b) ** 2).sum(), [_rand(r, (2, 3, 4)), _rand(r, (4, 2))]),
    "conv2d": lambda r: (lambda x, k, b: (T.conv2d(x, k, b, stride=2, padding=1) ** 2).sum(),
                         [_rand(r, (2, 2, 5, 5)), _rand(r, (3, 2, 3, 3)), _rand(r, (3,))]),
    "depthwise_conv2d": lambda r: (lambda x, k: (T.conv2d(x, k, padding=1, groups=2) ** 2).sum(),
                                   [_rand(r, (2, 5, 5)), _rand(r, (2, 1, 3, 3))]),
    "softmax_rows": lambda r: (lambda a, w: (T.softmax_rows(a) * w).sum(), [_rand(r, (3, 5)), Tensor(r.normal(size=(3, 5)))]),
    "relu": lambda r: (lambda a: (T.relu(a) ** 2).sum(), [_rand(r, (4, 5))]),
    "sigmoid": lambda r: (lambda a: (T.sigmoid(a) ** 2).sum(), [_rand(r, (4, 5))]),
    "tanh": lambda r: (lambda a: (T.tanh(a) ** 2).sum(), [_rand(r, (4, 5))]),
    "mean_pool": lambda r: (lambda a: (T.mean_pool(a, axis=(1, 2)) ** 2).sum(), [_rand(r, (3, 4, 4))]),
    "concat": lambda r: (lambda a, b: (T.concat([a, b], axis=1) ** 2 * 1.5).sum(), [_rand(r, (2, 3)), _rand(r, (2, 4))]),
    "linear": lambda r: (lambda x, w, b: (T.linear(x, w, b) ** 2).sum(), [_rand(r, (5, 3)), _rand(r, (3, 4)), _rand(r, (4,))]),
    "cross_entropy": lambda r: (lambda z, lab=r.integers(0, 2, size=6): T.cross_entropy(z, lab), [_rand(r, (6, 2))]),
    "div_sqrt_exp_log": lambda r: (lambda a, b: (T.log(T.exp(a) + 1.0) / T.sqrt(b * b + 1.0)).sum(),
                                   [_rand(r, (3, 3)), _rand(r, (3, 1))]),
    "index_transpose": lambda r: (lambda a: (a.transpose(1, 0)[1:3] ** 2).sum(), [_rand(r, (3, 4))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fn, tensors = PRIMITIVES[name](rng)
        err = check_gradients(lambda: fn(*tensors), [t for t in tensors if t.requires_grad])
        assert err < 1e-4, (name, seed, err)


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(0)
    a, b = _rand(rng, (2, 3, 4, 4)), _rand(rng, (3, 3, 3, 3))
    before = (a.data.copy(), b.data.copy())
    out = T.conv2d(a, b, padding=1)
    loss = (T.softmax_rows(out.reshape(2, -1)) * 3.0).sum()
    loss.backward()
    np.testing.assert_array_equal(a.data, before[0])
    np.testing.assert_array_equal(b.data, before[1])


def test_all_values_finite_after_passes():
    rng = np.random.default_rng(0)
    z = _rand(rng, (4, 2))
    z.data[0] = [800.0, -800.0]
    loss = T.cross_entropy(z, [1, 0, 1, 0])
    loss.backward()
    assert np.isfinite(loss.data).all() and np.isfinite(z.grad).all()


# -- optimizer ---------------------------------------------------------------
def test_adam_zero_grad_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p])
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_minimises_quadratic():
    w = Tensor([0.0], requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(2000):
        ((w - 3.0) ** 2).sum().backward()
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-3


def test_adam_step_count_and_grad_reset():
    w = Tensor([1.0], requires_grad=True)
    opt = Adam([w])
    (w * 2.0).sum().backward()
    opt.step()
    assert opt.state.step_count == 1
    np.testing.assert_array_equal(w.grad, [0.0])
    opt.step()
    assert opt.state.step_count == 2


def test_optimizer_missing_grad():
    w = Tensor([1.0], requires_grad=True)
    w.grad = None
    with pytest.raises(ContractError):
        optimizer_step([w], OptimizerState(m=[np.zeros(1)], v=[np.zeros(1)]))
