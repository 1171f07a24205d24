"""Gradient and primitive-level checks for the autodiff core."""

import math

import numpy as np
import pytest

from diar.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    add,
    clip,
    concat,
    exp,
    gaussian_nll,
    gelu,
    grad_check,
    kl_diag_gaussians,
    layer_norm,
    log,
    make_rng,
    matmul,
    mse,
    mul,
    neg,
    sigmoid,
    softmax,
    square,
    sub,
    tanh,
)
from diar.nn import Adam, StepDecaySchedule


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_gelu_fixed_point_at_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_matches_erf_definition():
    x = np.linspace(-3, 3, 13)
    expected = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, expected, rtol=1e-12)


def test_kl_identical_distributions_is_zero():
    mu = Tensor(np.zeros((3, 4)))
    ls = Tensor(np.zeros((3, 4)))
    np.testing.assert_allclose(kl_diag_gaussians(mu, ls, mu, ls).data, 0.0, atol=1e-15)


def test_kl_unit_mean_shift_closed_form():
    # 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2) with mu=1, sigma=1 -> 0.5
    v = kl_diag_gaussians(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[0.0]]))
    assert v.data[0] == pytest.approx(0.5, abs=1e-12)


def test_kl_nonnegative_random():
    rng = make_rng(3)
    for _ in range(50):
        q_mu, p_mu = rng.normal(size=(2, 1, 6))
        q_ls, p_ls = rng.normal(scale=0.5, size=(2, 1, 6))
        v = kl_diag_gaussians(Tensor(q_mu), Tensor(q_ls), Tensor(p_mu), Tensor(p_ls))
        assert v.data[0] >= -1e-12


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as err:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_tape_leaf_reuse_sums_contributions():
    p = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        loss = add(square(p), mul(p, 3.0)).sum()  # p^2 + 3p
    g = tape.grad(loss, {"p": p})["p"]
    assert g[0] == pytest.approx(2 * 2.0 + 3.0)


def test_tape_reuse_matches_finite_differences():
    rng = make_rng(11)
    p = _param(rng, 4)
    x = Tensor(rng.normal(size=4))

    def f():
        a = mul(p, x)
        b = tanh(p)
        return add(square(a).sum(), mul(a, b).sum())

    assert grad_check(f, {"p": p}) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_primitives_gradcheck_random_shapes(seed):
    """Every primitive against central differences on random operands."""
    rng = make_rng(seed, 77)
    rows = int(rng.integers(1, 5))
    cols = int(rng.integers(1, 6))
    a = _param(rng, rows, cols)
    b = _param(rng, rows, cols)
    w = _param(rng, cols, 3)
    bias = _param(rng, cols)
    gain = Tensor(1.0 + 0.1 * rng.normal(size=cols), requires_grad=True)
    target = Tensor(rng.normal(size=(rows, 3)))
    params = {"a": a, "b": b, "w": w, "bias": bias, "gain": gain}

    def f():
        h = add(a, bias)
        h = layer_norm(h, gain, bias)
        h = add(h, mul(sigmoid(b), tanh(a)))
        h = add(h, mul(softmax(b), 0.5))
        h = add(gelu(h), exp(mul(a, -0.3)))
        h = add(h, log(add(square(b), 1.0)))
        out = matmul(h, w)
        penalty = concat([a, b], axis=1).mean()
        return add(mse(out, target), penalty)

    assert grad_check(f, params) < 1e-4


def test_gradcheck_clip_and_slicing():
    rng = make_rng(5)
    p = _param(rng, 3, 6)

    def f():
        c = clip(p, -0.5, 0.5)
        left = c[:, :3]
        right = c[:, 3:]
        return add(square(left).sum(), mul(right, 2.0).sum())

    assert grad_check(f, {"p": p}) < 1e-5


def test_gradcheck_gaussian_nll():
    rng = make_rng(6)
    mean = _param(rng, 2, 3)
    log_std = _param(rng, 2, 3)
    x = Tensor(rng.normal(size=(2, 3)))

    def f():
        return gaussian_nll(mean, log_std, x).mean()

    assert grad_check(f, {"mean": mean, "log_std": log_std}) < 1e-5


def test_gaussian_nll_value():
    # standard normal at x=0: 0.5*log(2*pi) per element
    v = gaussian_nll(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]))
    assert v.data[0] == pytest.approx(math.log(2 * math.pi), rel=1e-12)


def test_gradcheck_kl():
    rng = make_rng(7)
    params = {
        "q_mu": _param(rng, 2, 4),
        "q_ls": _param(rng, 2, 4),
        "p_mu": _param(rng, 2, 4),
        "p_ls": _param(rng, 2, 4),
    }

    def f():
        return kl_diag_gaussians(
            params["q_mu"], params["q_ls"], params["p_mu"], params["p_ls"]
        ).mean()

    assert grad_check(f, params) < 1e-5


def test_grad_check_simple_square():
    p = Tensor(np.array([3.0]), requires_grad=True)

    def f():
        return square(p).sum()

    with Tape() as tape:
        loss = f()
    g = tape.grad(loss, {"p": p})["p"]
    assert g[0] == pytest.approx(6.0, abs=1e-9)
    assert grad_check(f, {"p": p}) < 1e-6


def test_grad_check_constant_function_zero_both_sides():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)

    def f():
        return Tensor(0.0).sum()

    assert grad_check(f, {"p": p}) == 0.0


def test_grad_check_rejects_bad_eps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: square(p).sum(), {"p": p}, eps=0.5)


def test_grad_check_reports_nonfinite_objective():
    p = Tensor(np.array([0.0]), requires_grad=True)

    def f():
        return log(p).sum()  # log crosses 0 when nudged negative

    with pytest.raises(FloatingPointError) as err:
        grad_check(f, {"p": p})
    assert "p[0]" in str(err.value)


def test_softmax_rows_sum_to_one_and_grad():
    rng = make_rng(8)
    p = _param(rng, 3, 5)
    y = softmax(p)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=1e-12)
    weights = Tensor(rng.normal(size=(3, 5)))

    def f():
        return mul(softmax(p), weights).sum()

    assert grad_check(f, {"p": p}) < 1e-5


# -- optimizer / schedule ----------------------------------------------------


def test_adam_zero_grad_is_identity():
    rng = make_rng(9)
    p = _param(rng, 4, 3)
    before = p.data.copy()
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(5):
        opt.step({"p": np.zeros_like(p.data)})
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_hand_computed():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.array([1.0])})
    # mhat = 1, vhat = 1 -> update = lr * 1/(1 + eps)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_identical_params_identical_updates():
    a = Tensor(np.array([0.7, -0.2]), requires_grad=True)
    b = Tensor(np.array([0.7, -0.2]), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.05)
    g = np.array([0.3, -1.1])
    for _ in range(7):
        opt.step({"a": g.copy(), "b": g.copy()})
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_nan_grad_aborts_with_name():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"theta": p}, lr=0.1)
    with pytest.raises(FloatingPointError) as err:
        opt.step({"theta": np.array([np.nan])})
    assert "theta" in str(err.value)


def test_step_decay_schedule_table_defaults():
    sched = StepDecaySchedule(base_lr=5e-4, step_size=50, factor=0.3)
    assert sched.lr_at(0) == 5e-4
    assert sched.lr_at(49) == 5e-4
    assert sched.lr_at(50) == pytest.approx(0.3 * 5e-4)
    lrs = [sched.lr_at(e) for e in range(200)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
