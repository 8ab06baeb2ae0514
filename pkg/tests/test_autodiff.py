import math

import numpy as np
import pytest
from scipy.special import expit

from discover import autodiff as ad
from discover.autodiff import ContractError, NumericDomainError, ShapeError

from conftest import central_diff


# -- matmul ----------------------------------------------------------------------------

def test_matmul_identity():
    a = ad.tensor(np.eye(2))
    b = ad.tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_hand_computed():
    out = ad.matmul(ad.tensor([[1, 2], [3, 4]]), ad.tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_grad_is_ones_times_b_transpose(rng):
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    a = ad.parameter(A)
    ad.backward((a @ ad.tensor(B)).sum())
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ B.T, rtol=1e-5)
    num = central_diff(lambda m: float((m @ B).sum()), A)
    np.testing.assert_allclose(a.grad, num, rtol=1e-3)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value) and str(exc.value).count("(2, 3)") == 2


def test_matmul_records_node_only_when_tracked():
    tape = ad.get_tape()
    ad.tensor(np.ones((2, 2))) @ ad.tensor(np.ones((2, 2)))
    assert len(tape) == 0
    ad.parameter(np.ones((2, 2))) @ ad.tensor(np.ones((2, 2)))
    assert len(tape) == 1


# -- elementwise ---------------------------------------------------------------------

def test_softplus_zero_is_ln2():
    assert ad.softplus(ad.tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-6)


def test_sigmoid_zero_is_half():
    assert ad.sigmoid(ad.tensor(0.0)).item() == 0.5


def test_softplus_derivative_is_sigmoid():
    x = ad.parameter(np.array([1.5]))
    ad.backward(ad.softplus(x).sum())
    num = (math.log1p(math.exp(1.5 + 1e-4)) - math.log1p(math.exp(1.5 - 1e-4))) / 2e-4
    assert x.grad[0] == pytest.approx(expit(1.5), abs=1e-6)
    assert x.grad[0] == pytest.approx(num, abs=1e-4)


def test_log_of_nonpositive_raises():
    with pytest.raises(NumericDomainError):
        ad.log(ad.tensor([1.0, 0.0]))
    with pytest.raises(NumericDomainError):
        ad.sqrt(ad.tensor([-1.0]))


def test_log_clamps_tiny_positive_inputs():
    out = ad.log(ad.tensor([1e-12]))
    assert out.item() == pytest.approx(math.log(1e-7), rel=1e-5)


UNARY = {
    "exp": (np.exp, lambda r: r.standard_normal(5)),
    "log": (np.log, lambda r: r.uniform(0.5, 3, 5)),
    "neg": (np.negative, lambda r: r.standard_normal(5)),
    "softplus": (lambda v: np.logaddexp(0, v), lambda r: r.standard_normal(5)),
    "sigmoid": (expit, lambda r: r.standard_normal(5)),
    "relu": (lambda v: np.maximum(v, 0), lambda r: r.choice([-1, 1], 5) * r.uniform(0.1, 2, 5)),
    "tanh": (np.tanh, lambda r: r.standard_normal(5)),
    "square": (np.square, lambda r: r.standard_normal(5)),
    "sqrt": (np.sqrt, lambda r: r.uniform(0.5, 3, 5)),
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_vjp_matches_finite_differences_on_100_inputs(op):
    fn, sample = UNARY[op]
    r = np.random.default_rng(hash(op) % 2**32)
    weights = r.standard_normal(5)
    worst = 0.0
    for _ in range(100):
        x0 = sample(r)
        x = ad.parameter(x0)
        ad.backward((ad.elementwise(op, x) * ad.tensor(weights)).sum())
        num = central_diff(lambda v: float((fn(v) * weights).sum()), x0)
        worst = max(worst, float(np.max(np.abs(x.grad - num) / (np.abs(num) + 1e-3))))
    assert worst < 1e-3


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_vjp_matches_finite_differences_on_100_inputs(op):
    fns = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        a0 = r.standard_normal((3, 4))
        b0 = r.uniform(0.5, 2, (4,)) * r.choice([-1, 1], 4)  # bias-style broadcast
        wts = r.standard_normal((3, 4))
        a, b = ad.parameter(a0), ad.parameter(b0)
        ad.backward((ad.elementwise(op, a, b) * ad.tensor(wts)).sum())
        na = central_diff(lambda v: float((fns[op](v, b0) * wts).sum()), a0)
        nb = central_diff(lambda v: float((fns[op](a0, v) * wts).sum()), b0)
        worst = max(worst, float(np.max(np.abs(a.grad - na) / (np.abs(na) + 1e-3))),
                    float(np.max(np.abs(b.grad - nb) / (np.abs(nb) + 1e-3))))
    assert worst < 1e-3


def test_broadcast_rejects_incompatible_shapes():
    with pytest.raises(ShapeError):
        ad.tensor(np.ones((2, 3))) + ad.tensor(np.ones((2, 2)))


def test_broadcast_column_vector():
    a = ad.parameter(np.ones((3, 2)))
    b = ad.parameter(np.array([[1.0], [2.0], [3.0]]))
    ad.backward((a * b).sum())
    np.testing.assert_allclose(b.grad, [[2.0], [2.0], [2.0]])
    np.testing.assert_allclose(a.grad, [[1, 1], [2, 2], [3, 3]])


def test_unknown_elementwise_op():
    with pytest.raises(ContractError):
        ad.elementwise("cosh", ad.tensor(1.0))


# -- reductions ----------------------------------------------------------------------

def test_sum_vector():
    assert ad.reduce("sum", ad.tensor([1, 2, 3])).item() == 6


def test_mean_axis0():
    np.testing.assert_array_equal(ad.reduce("mean", ad.tensor([[1, 2], [3, 4]]), 0).data, [2, 3])


def test_mean_grad_is_one_over_n():
    x = ad.parameter(np.arange(7.0))
    ad.backward(x.mean())
    np.testing.assert_allclose(x.grad, np.full(7, 1 / 7), rtol=1e-6)


def test_reduce_axis_out_of_range():
    with pytest.raises(ShapeError):
        ad.reduce("sum", ad.tensor([[1.0]]), 2)


def test_reduction_grads_broadcast(rng):
    x0 = rng.standard_normal((3, 4))
    w = rng.standard_normal(4)
    x = ad.parameter(x0)
    ad.backward((x.sum(axis=0) * ad.tensor(w)).sum() + (x.mean(axis=1) * ad.tensor(w[:3])).sum())
    expect = np.tile(w, (3, 1)) + np.tile(w[:3, None] / 4, (1, 4))
    np.testing.assert_allclose(x.grad, expect, rtol=1e-5)


# -- backward ------------------------------------------------------------------------

def test_backward_square():
    x = ad.parameter(3.0)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_linear_in_weights(rng):
    x0 = rng.standard_normal((4, 1))
    W = ad.parameter(rng.standard_normal((3, 4)))
    ad.backward((W @ ad.tensor(x0)).sum())
    np.testing.assert_allclose(W.grad, np.ones((3, 1)) @ x0.T, rtol=1e-6)


def test_backward_nonscalar_raises():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_backward_consumes_tape():
    x = ad.parameter(2.0)
    ad.backward(x * x)
    assert len(ad.get_tape()) == 0


def test_gradients_accumulate_across_reuse():
    x = ad.parameter(2.0)
    ad.backward(x * x + x * 3.0)
    assert x.grad == pytest.approx(7.0)


def test_gradient_linearity(rng):
    x0 = rng.standard_normal(5)
    f1 = lambda x: ad.tanh(x).sum()
    f2 = lambda x: (ad.square(x) * 0.3).sum()
    x = ad.parameter(x0)
    ad.backward(f1(x) + f2(x))
    joint = x.grad.copy()
    x.grad = None
    ad.backward(f1(x))
    ad.backward(f2(x))
    np.testing.assert_allclose(joint, x.grad, rtol=1e-6)


def _mlp17(rng):
    # 1 -> 3 -> 2 -> 1 with tanh: (1*3+3) + (3*2+2) + (2*1+1) = 17 parameters
    shapes = [(1, 3), (3,), (3, 2), (2,), (2, 1), (1,)]
    return [ad.parameter(rng.standard_normal(s)) for s in shapes]


def test_three_layer_mlp_17_parameters_matches_finite_differences(rng):
    params = _mlp17(rng)
    assert sum(p.size for p in params) == 17
    x = ad.tensor(rng.standard_normal((5, 1)))

    def f():
        h = ad.tanh(x @ params[0] + params[1])
        h = ad.tanh(h @ params[2] + params[3])
        return ad.square(h @ params[4] + params[5]).mean()

    assert ad.grad_check(f, params) < 1e-3


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(3)
        p = ad.parameter(r.standard_normal((4, 3)))
        out = ad.softplus(ad.tensor(r.standard_normal((2, 4))) @ p).mean()
        ad.backward(out)
        return out.data.tobytes(), p.grad.tobytes()

    assert run() == run()


def test_float32_storage():
    assert ad.tensor([1, 2]).data.dtype == np.float32


# -- grad_check ----------------------------------------------------------------------

def test_grad_check_norm_squared(rng):
    p = ad.parameter(rng.standard_normal(6))
    assert ad.grad_check(lambda: ad.square(p).sum(), [p]) < 1e-6


def test_grad_check_constant_function():
    p = ad.parameter(np.ones(3))
    assert ad.grad_check(lambda: ad.tensor(5.0), [p]) == 0.0


def test_grad_check_nan_propagates():
    p = ad.parameter(np.ones(2))
    assert math.isnan(ad.grad_check(lambda: (p * float("nan")).sum(), [p]))


def test_grad_check_restores_float32():
    p = ad.parameter(np.ones(2))
    ad.grad_check(lambda: ad.square(p).sum(), [p])
    assert p.data.dtype == np.float32 and p.grad is None


def test_log_softmax_and_concat_gradients(rng):
    a = ad.parameter(rng.standard_normal((4, 3)))
    b = ad.parameter(rng.standard_normal((4, 2)))
    w = ad.tensor(rng.standard_normal((4, 5)))
    assert ad.grad_check(lambda: (ad.log_softmax(ad.concat([a, b], axis=1)) * w).sum(), [a, b]) < 1e-3


def test_getitem_and_transpose_gradients(rng):
    a = ad.parameter(rng.standard_normal((5, 3)))
    idx = np.array([0, 2, 2, 4])
    assert ad.grad_check(lambda: ad.square(a[idx].T).sum(), [a]) < 1e-3


def test_no_grad_records_nothing():
    p = ad.parameter(np.ones(2))
    with ad.no_grad():
        out = (p * 2.0).sum()
    assert not out.on_tape and len(ad.get_tape()) == 0
