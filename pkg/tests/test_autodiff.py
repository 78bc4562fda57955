"""Tensor/tape engine: backward rules, Adam, schedule, gradient oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modnet import autodiff as ad
from modnet.autodiff import (Adam, AdamState, LrSchedule, Tape, Tensor,
                             adam_step, backward, grad_check, lr_at)
from modnet.errors import ContractViolation, NumericFailure


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    backward(tape, y)
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_softmax_sum_gradient_is_zero():
    x = Tensor(np.array([0.3, -1.2, 2.0, 0.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.softmax(x))
    backward(tape, y)
    assert np.abs(x.grad).max() < 1e-14


def _finite_difference(fn, params, h=1e-5):
    """Independent central-difference oracle used to pin expected gradients."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_mlp_matches_central_differences():
    # 2-layer MLP with exactly 10 parameters
    rng = np.random.default_rng(3)
    w1 = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b1 = Tensor(rng.normal(size=2), requires_grad=True)
    w2 = Tensor(rng.normal(size=(2, 1)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    params = [w1, b1, w2]
    assert sum(p.size for p in params) == 10

    def fn():
        return ad.sum_(ad.linear(ad.tanh(ad.linear(x, w1, b1)), w2))

    expected = _finite_difference(fn, params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    for p, e in zip(params, expected):
        rel = np.abs(p.grad - e) / np.maximum(1.0, np.abs(e))
        assert rel.max() < 1e-4


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractViolation):
        backward(tape, y)


def test_backward_nan_names_the_op():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.log(x)  # log(-1) = nan in the forward value
        loss = ad.sum_(y)
    with pytest.raises(NumericFailure):
        backward(tape, loss)


def test_backward_gradient_nan_mentions_node():
    # finite forward value, infinite derivative at zero
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.power(x, 0.5))
    with pytest.raises(NumericFailure, match="power"):
        backward(tape, loss)


def test_non_participating_tensor_gets_no_gradient():
    x = Tensor(2.0, requires_grad=True)
    bystander = Tensor(5.0, requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    backward(tape, y)
    assert bystander.grad is None  # treated as zero by the optimizer


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=1e-3)
    assert state.step == 1
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    # hand evaluation: m_hat = v_hat = 1 after the first unit-gradient step,
    # so the displacement is lr / (1 + eps)
    p = Tensor(1.0, requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.array(1.0)}, state, lr=1e-3)
    assert p.item() == pytest.approx(0.999, abs=1e-6)


def test_adam_two_identical_steps_do_not_grow():
    p = Tensor(1.0, requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.array(1.0)}, state, lr=1e-3)
    first = 1.0 - p.item()
    before = p.item()
    adam_step({"p": p}, {"p": np.array(1.0)}, state, lr=1e-3)
    second = before - p.item()
    assert abs(second) <= abs(first) + 1e-9


def test_adam_shape_mismatch_is_contract_violation():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        adam_step({"p": p}, {"p": np.ones(4)}, AdamState(), lr=1e-3)


def test_adam_skips_frozen_parameters():
    p = Tensor(np.ones(2), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=False)
    opt = Adam({"p": p, "q": q})
    p.grad = np.ones(2)
    q.grad = np.ones(2)
    opt.step(1e-2)
    assert not np.array_equal(p.data, np.ones(2))
    np.testing.assert_array_equal(q.data, np.ones(2))
    assert "q" not in opt.state.m


# -- learning-rate schedule ----------------------------------------------------

def test_lr_schedule_paper_points():
    sched = LrSchedule(warmup_steps=2000, peak_lr=1e-3)
    assert lr_at(sched, 2000) == pytest.approx(1e-3)
    assert lr_at(sched, 1000) == pytest.approx(5e-4)
    assert lr_at(sched, 8000) == pytest.approx(5e-4)


def test_lr_schedule_step_zero_rejected():
    with pytest.raises(ContractViolation):
        lr_at(LrSchedule(), 0)


@given(st.integers(min_value=1, max_value=100000))
@settings(max_examples=60, deadline=None)
def test_lr_positive_and_shaped(step):
    sched = LrSchedule(warmup_steps=2000, peak_lr=1e-3)
    lr = lr_at(sched, step)
    assert lr > 0
    if step < 2000:
        assert lr <= lr_at(sched, step + 1) + 1e-18
    if step >= 2000:
        assert lr_at(sched, step + 1) <= lr + 1e-18


# -- gradient checker ----------------------------------------------------------

def test_grad_check_linear_is_exact():
    w = Tensor(np.array([[1.5, -2.0], [0.5, 3.0]]), requires_grad=True)
    x = Tensor(np.array([[1.0, 2.0]]))

    def fn():
        return ad.sum_(ad.linear(x, w))

    assert grad_check(fn, [w]) <= 1e-10


def test_grad_check_detects_corrupted_backward():
    def broken_tanh(a):
        out = np.tanh(a.data)

        def bw(g):
            return (g * (1.0 - out),)  # wrong rule on purpose

        return ad._emit("broken_tanh", (a,), out, bw)

    w = Tensor(np.array([0.7, -0.3, 1.2]), requires_grad=True)

    def fn():
        return ad.sum_(broken_tanh(w))

    assert grad_check(fn, [w]) > 1e-2


def test_grad_check_h_bounds():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractViolation):
        grad_check(lambda: ad.sum_(w * 1.0), [w], h=1e-2)


# -- invariants ----------------------------------------------------------------

@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=8))
@settings(max_examples=80, deadline=None)
def test_softmax_rows_sum_to_one(values):
    out = ad.softmax(Tensor(np.array([values])))
    assert abs(out.data.sum() - 1.0) <= 1e-12


@given(st.integers(min_value=4, max_value=24), st.integers(min_value=0, max_value=2 ** 31))
@settings(max_examples=40, deadline=None)
def test_layer_norm_row_statistics(d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(3.0, 2.5, size=(5, d))
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)))
    healthy = x.var(axis=-1) > 1e-2  # near-constant rows cannot normalize sharply
    mu = out.data.mean(axis=-1)
    var = out.data.var(axis=-1)
    assert np.abs(mu[healthy]).max() <= 1e-10
    assert np.abs(var[healthy] - 1.0).max() <= 1e-8


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(123)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 6)))
        with Tape() as tape:
            loss = ad.sum_(ad.tanh(ad.linear(x, w)))
        backward(tape, loss)
        return loss.item(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)
