import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from actta.errors import ContractError, DimensionError, DomainError, NumericError
from actta.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    div,
    elementwise,
    exp,
    finite_diff_grad,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    sin,
    tsum,
)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) < 1e-12

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert "(2, 3)" in str(e.value)
        assert str(e.value).count("(2, 3)") == 2

    def test_backward_rules(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        backward(tsum(mul(matmul(a, b), Tensor(g))))
        assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
        assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


class TestElementwise:
    def test_add(self):
        assert np.array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_mul_by_zero_scalar(self):
        assert np.array_equal(mul(Tensor([2.0, 3.0]), 0.0).data, [0, 0])

    def test_exp_log_inverse(self):
        x = np.array([0.5, 1.5])
        assert np.max(np.abs(log(exp(Tensor(x))).data - x)) < 1e-12

    def test_dispatch_by_kind(self):
        a, b = Tensor([1.0, 4.0]), Tensor([2.0, 8.0])
        assert np.array_equal(elementwise("sub", a, b).data, [-1, -4])
        assert np.array_equal(elementwise("div", a, b).data, [0.5, 0.5])
        assert np.array_equal(elementwise("neg", a).data, [-1, -4])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_log_domain_error_carries_index(self):
        with pytest.raises(DomainError) as e:
            log(Tensor([1.0, 2.0, -1.0, 0.0]))
        assert e.value.index == 2

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            div(Tensor([1.0]), Tensor([0.0]))

    def test_exp_overflow_is_numeric_error(self):
        with pytest.raises(NumericError):
            exp(Tensor([1.0, 1000.0]))

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
    def test_binary_gradients_vs_fd(self, kind):
        rng = np.random.default_rng(1)
        a0 = rng.uniform(-3, 3, size=5)
        b0 = rng.uniform(0.5, 3, size=5) * rng.choice([-1, 1], size=5)
        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        backward(tsum(elementwise(kind, a, b)))
        fa = finite_diff_grad(lambda t: tsum(elementwise(kind, t, Tensor(b0))), Tensor(a0))
        fb = finite_diff_grad(lambda t: tsum(elementwise(kind, Tensor(a0), t)), Tensor(b0))
        assert rel_err(a.grad, fa.data) < 1e-5
        assert rel_err(b.grad, fb.data) < 1e-5

    @pytest.mark.parametrize("fn", [exp, sin, lambda t: log(mul(t, t))])
    def test_unary_gradients_vs_fd(self, fn):
        x0 = np.random.default_rng(2).uniform(-3, 3, size=6)
        x = Tensor(x0, requires_grad=True)
        backward(tsum(fn(x)))
        assert rel_err(x.grad, finite_diff_grad(lambda t: tsum(fn(t)), Tensor(x0)).data) < 1e-5

    def test_scalar_broadcast_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        backward(tsum(mul(x, s)))
        assert np.array_equal(x.grad, [2, 2, 2])
        assert s.grad == 6.0


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(tsum(x))
        assert np.array_equal(x.grad, [1, 1, 1])

    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(tsum(mul(x, x)))
        assert np.array_equal(x.grad, [2, 4, 6])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(mul(x, 2.0))

    def test_shape_one_loss_accepted(self):
        x = Tensor([3.0], requires_grad=True)
        backward(mul(x, x))
        assert np.array_equal(x.grad, [6.0])

    def test_two_layer_mlp_vs_fd(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 3)))
        w1_0, w2_0 = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))

        def loss(w1, w2):
            h = sin(matmul(x, w1))
            return tsum(mul(matmul(h, w2), matmul(h, w2)))

        w1 = Tensor(w1_0, requires_grad=True)
        w2 = Tensor(w2_0, requires_grad=True)
        backward(loss(w1, w2))
        fd1 = finite_diff_grad(lambda t: loss(t, Tensor(w2_0)), Tensor(w1_0))
        fd2 = finite_diff_grad(lambda t: loss(Tensor(w1_0), t), Tensor(w2_0))
        assert rel_err(w1.grad, fd1.data) < 1e-5
        assert rel_err(w2.grad, fd2.data) < 1e-5

    def test_reuse_accumulates_exactly(self):
        x0 = np.array([0.3, -1.2, 2.0])
        x = Tensor(x0, requires_grad=True)
        backward(tsum(sin(x)))
        g1 = x.grad.copy()
        x = Tensor(x0, requires_grad=True)
        backward(tsum(exp(x)))
        g2 = x.grad.copy()
        x = Tensor(x0, requires_grad=True)
        backward(add(tsum(sin(x)), tsum(exp(x))))
        assert np.array_equal(x.grad, g1 + g2)

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(x))
        backward(tsum(x))
        assert np.array_equal(x.grad, [2, 2])

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        grads = []
        for _ in range(2):
            a = Tensor(a0, requires_grad=True)
            backward(tsum(exp(log_softmax(matmul(a, Tensor(b0))))))
            grads.append(a.grad.tobytes())
        assert grads[0] == grads[1]

    def test_tape_topological_single_visit(self):
        x = Tensor([1.0], requires_grad=True)
        y = mul(x, x)
        z = add(y, y)
        tape = Tape.from_output(tsum(z))
        ids = [id(n) for n in tape.nodes]
        assert len(ids) == len(set(ids))
        assert ids.index(id(x)) < ids.index(id(y)) < ids.index(id(z))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff_grad(lambda t: tsum(mul(t, t)), Tensor([3.0]), h=1e-5)
        assert abs(g.data[0] - 6.0) < 1e-8

    def test_sin(self):
        g = finite_diff_grad(lambda t: tsum(sin(t)), Tensor([0.0]), h=1e-5)
        assert abs(g.data[0] - 1.0) < 1e-8

    def test_entropy_softmax_matches_autodiff(self):
        def entropy(z):
            lsm = log_softmax(z)
            return -tsum(mul(exp(lsm), lsm))

        z = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        backward(entropy(z))
        fd = finite_diff_grad(entropy, Tensor([[1.0, 2.0, 3.0]]))
        assert np.max(np.abs(z.grad - fd.data)) < 1e-6

    def test_non_finite_probe_reports_coordinate(self):
        def f(t):
            with np.errstate(invalid="ignore"):
                return float(np.sqrt(t.data).sum())

        with pytest.raises(NumericError) as e:
            finite_diff_grad(f, Tensor([1.0, 0.0]))
        assert e.value.index == 1

    def test_bad_step(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: tsum(t), Tensor([1.0]), h=0.0)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_property_autodiff_matches_fd(x0):
    def f(t):
        return tsum(mul(sin(t), exp(mul(t, 0.3))))

    x = Tensor(x0, requires_grad=True)
    backward(f(x))
    assert rel_err(x.grad, finite_diff_grad(f, Tensor(x0)).data) < 1e-5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_property_results_finite(x0):
    out = add(mul(sin(Tensor(x0)), 2.0), exp(Tensor(x0)))
    assert np.isfinite(out.data).all()
    assert math.isfinite(tsum(out).item())
