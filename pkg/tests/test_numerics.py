import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anysat import numerics as nx
from anysat.numerics import (
    MissingGradientError,
    OptimizerState,
    Parameter,
    ReduceOnPlateau,
    ShapeMismatchError,
    Tensor,
    WarmupCosine,
    adamw_step,
    grad_check,
    make_schedule,
)

seeds = st.integers(0, 2**31 - 1)


def _param(name, shape, seed):
    return Parameter(name, np.random.default_rng(seed).normal(size=shape))


UNARY = ["sin", "cos", "exp", "tanh", "sigmoid", "gelu", "neg"]


@pytest.mark.parametrize("op", UNARY)
def test_unary_gradients(op):
    x = _param("x", (3, 4), 1)
    rep = grad_check(lambda: nx.sum_(nx.eval_op(op, x) * np.arange(12.0).reshape(3, 4)), [x])
    assert rep.passed(1e-6), rep


def test_log_sqrt_on_positive_inputs():
    x = Parameter("x", np.random.default_rng(2).uniform(0.5, 2.0, size=(5,)))
    assert grad_check(lambda: nx.sum_(nx.log(x) + nx.sqrt(x) * 3.0), [x]).passed(1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from([(3,), (2, 3), (2, 1, 3)]), st.sampled_from([(3,), (1, 3), (2, 1, 1)]))
def test_broadcast_binary_gradients(seed, sa, sb):
    a = _param("a", sa, seed)
    b = Parameter("b", np.random.default_rng(seed + 1).uniform(0.5, 1.5, size=sb))

    def f():
        return nx.sum_((a * b + a - b) / b)

    assert grad_check(f, [a, b]).passed(1e-6)


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_gradient(seed, n, k, m):
    a, b = _param("a", (2, n, k), seed), _param("b", (k, m), seed + 7)
    w = np.random.default_rng(seed).normal(size=(2, n, m))
    assert grad_check(lambda: nx.sum_(nx.matmul(a, b) * w), [a, b]).passed(1e-6)


def test_reductions_and_normalisers():
    x = _param("x", (3, 5), 3)
    w = np.random.default_rng(4).normal(size=(3, 5))
    for f in (
        lambda: nx.sum_(nx.softmax(x, axis=-1) * w),
        lambda: nx.sum_(nx.log_softmax(x, axis=0) * w),
        lambda: nx.sum_(nx.layer_norm(x, axis=-1) * w),
        lambda: nx.sum_(nx.normalize(x, axis=-1) * w),
        lambda: nx.mean(x * x, axis=1).sum(),
        lambda: nx.sum_(nx.cosine_similarity(x, x * w)),
    ):
        assert grad_check(f, [x]).passed(1e-5)


def test_indexing_concat_stack_transpose():
    x = _param("x", (4, 3), 5)
    idx = np.array([2, 0, 2])

    def f():
        y = nx.concat([x[idx], x[1:3]], axis=0)
        z = nx.stack([y, y * 2.0], axis=1).transpose(2, 0, 1).reshape(3, -1)
        return nx.sum_(z * z)

    assert grad_check(f, [x]).passed(1e-6)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 6))
def test_softmax_rows_sum_to_one(seed, n):
    x = Tensor(np.random.default_rng(seed).normal(scale=30.0, size=(3, n)))
    s = nx.softmax(x, axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_shape_mismatch_is_reported():
    with pytest.raises(ShapeMismatchError):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeMismatchError):
        nx.backward(Tensor(np.zeros(3), requires_grad=True))


def test_no_grad_records_nothing():
    x = _param("x", (2,), 0)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradients_accumulate_across_backward_calls():
    x = _param("x", (3,), 0)
    nx.backward(nx.sum_(x * 2.0), [x])
    nx.backward(nx.sum_(x * 3.0), [x], grad_scale=0.5)
    np.testing.assert_allclose(x.grad, 3.5)


def test_grad_check_detects_a_wrong_gradient():
    x = _param("x", (3,), 0)

    def bad():
        return nx.custom_op(np.sum(x.data**2), [x], lambda g: (g * x.data,), "bad")  # true grad is 2x

    assert not grad_check(bad, [x]).passed(1e-4)


def test_grad_check_rejects_bad_step():
    x = _param("x", (1,), 0)
    with pytest.raises(ValueError):
        grad_check(lambda: nx.sum_(x), [x], h=1.0)


# ---------------------------------------------------------------- optimiser


def _adamw_oracle(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * wd * theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


@settings(max_examples=20, deadline=None)
@given(seeds, st.floats(1e-4, 1e-1), st.floats(0.0, 0.1))
def test_adamw_matches_reference(seed, lr, wd):
    rng = np.random.default_rng(seed)
    theta0 = rng.normal(size=(4,))
    grads = [rng.normal(size=(4,)) for _ in range(5)]
    p = Parameter("w", theta0.copy())
    state = OptimizerState(lr=lr, weight_decay=wd)
    for g in grads:
        p.grad = g
        adamw_step([p], state)
    np.testing.assert_allclose(p.data, _adamw_oracle(theta0, grads, lr, wd), rtol=1e-12, atol=1e-14)


def test_adamw_requires_gradients():
    p = Parameter("w", np.zeros(2))
    with pytest.raises(MissingGradientError):
        adamw_step([p], OptimizerState())


def test_warmup_cosine_shape():
    s = WarmupCosine(1e-3, 100, warmup_steps=10, min_lr=1e-6)
    assert s.lr_at(0) == pytest.approx(1e-6)
    assert s.lr_at(10) == pytest.approx(1e-3)
    assert s.lr_at(100) == pytest.approx(1e-6)
    lrs = [s.lr_at(k) for k in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_plateau_reduces_after_patience():
    s = ReduceOnPlateau(1.0, patience=2, factor=0.5)
    assert s.lr_at(0, 1.0) == 1.0
    assert s.lr_at(1, 1.0) == 1.0
    assert s.lr_at(2, 1.0) == 0.5
    assert s.lr_at(3, 0.1) == 0.5
    with pytest.raises(ValueError):
        s.lr_at(4)
    restored = ReduceOnPlateau(1.0, patience=2, factor=0.5)
    restored.load_state_dict(s.state_dict())
    assert restored.state_dict() == s.state_dict()


def test_unknown_schedule():
    with pytest.raises(ValueError):
        make_schedule("linear", 1e-3)
    assert math.isclose(make_schedule("constant", 2e-3).lr_at(99), 2e-3)
