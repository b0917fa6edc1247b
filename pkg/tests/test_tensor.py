"""Tensor core: op arithmetic against independent oracles, autodiff against
central finite differences, tape misuse errors, determinism."""

import math

import numpy as np
import pytest

from davt import tensor as T
from davt.errors import GradientError, ShapeError
from davt.tensor import Tape, Tensor


def matmul_oracle(a, b):
    """Naive triple-loop product; deliberately independent of numpy matmul."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def backward_of(build, *leaves):
    with Tape() as tape:
        tape.backward(build(*leaves))
    return [leaf.grad for leaf in leaves]


class TestMatmul:
    def test_identity(self):
        m = T.tensor([[2.0, -1.0], [0.5, 3.0]])
        eye = T.tensor(np.eye(2))
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_row_times_column(self):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_stochastic_product_matches_oracle(self):
        a = np.array([[0.6, 0.4], [0.2, 0.8]])
        b = np.array([[0.5, 0.5], [0.1, 0.9]])
        expected = matmul_oracle(a, b)
        np.testing.assert_allclose(expected, [[0.34, 0.66], [0.18, 0.82]],
                                   atol=1e-15)
        got = T.matmul(T.tensor(a), T.tensor(b)).data
        np.testing.assert_allclose(got, expected, atol=1e-15)

    def test_random_sizes_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            m, k, n = rng.integers(1, 33, size=3)
            a = rng.uniform(-1, 1, (m, k))
            b = rng.uniform(-1, 1, (k, n))
            got = T.matmul(T.tensor(a), T.tensor(b)).data
            assert np.abs(got - matmul_oracle(a, b)).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))

    def test_non_2d_rejected(self):
        with pytest.raises(ShapeError):
            T.matmul(T.tensor(np.zeros(3)), T.tensor(np.zeros((3, 2))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_shift_invariance_large_values(self):
        out = T.softmax(T.tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        out = T.softmax(T.tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_rows_stochastic_under_extreme_magnitudes(self):
        rng = np.random.default_rng(3)
        for scale in (1e-12, 1.0, 1e3, 1e6, 1e12):
            x = rng.normal(0.0, scale, size=(6, 9))
            p = T.softmax(T.tensor(x), axis=-1).data
            assert (p >= 0).all()
            assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(T.tensor(np.zeros((2, 2))), axis=2)


class TestLayerNorm:
    def test_constant_vector_zeroes_out(self):
        gain = T.tensor(np.ones(4))
        bias = T.tensor(np.zeros(4))
        out = T.layer_norm(T.tensor(np.full(4, 3.7)), gain, bias, eps=1e-6)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)

    def test_two_point_exact(self):
        out = T.layer_norm(T.tensor([1.0, 3.0]), T.tensor(np.ones(2)),
                           T.tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-15)

    def test_zero_gain_yields_bias(self):
        rng = np.random.default_rng(0)
        x = T.tensor(rng.normal(size=(3, 5)))
        out = T.layer_norm(x, T.tensor(np.zeros(5)),
                           T.tensor(np.full(5, 2.5)), eps=1e-6)
        np.testing.assert_allclose(out.data, np.full((3, 5), 2.5), atol=1e-15)

    def test_gain_bias_shape_checked(self):
        with pytest.raises(ShapeError):
            T.layer_norm(T.tensor(np.zeros((2, 4))), T.tensor(np.ones(3)),
                         T.tensor(np.zeros(4)))


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = 40.0
        assert abs(T.gelu(T.tensor([x])).data[0] - x) < 1e-12

    def test_value_at_one_vs_independent_erf(self):
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(T.gelu(T.tensor([1.0])).data[0] - expected) < 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = backward_of(lambda t: t.sum(), x)
        assert g.tolist() == [1.0, 1.0, 1.0]

    def test_square_at_three(self):
        x = T.tensor([3.0], requires_grad=True)
        (g,) = backward_of(lambda t: (T.mul(t, t)).sum(), x)
        assert g.tolist() == [6.0]

    def test_double_backward_is_error(self):
        x = T.tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
            tape.backward(loss)
            with pytest.raises(GradientError, match="already ran"):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
            with pytest.raises(GradientError, match="scalar"):
                tape.backward(y)

    def test_detached_loss_rejected(self):
        leaf = T.tensor(0.5, requires_grad=True)
        with Tape() as tape:
            with pytest.raises(GradientError, match="detached"):
                tape.backward(leaf)  # never recorded on any tape

    def test_loss_from_other_tape_rejected(self):
        x = T.tensor([1.0], requires_grad=True)
        with Tape():
            loss = x.sum()
        with Tape() as tape:
            with pytest.raises(GradientError, match="detached"):
                tape.backward(loss)

    def test_grad_only_on_requires_grad(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        c = T.tensor([5.0, 6.0])
        with Tape() as tape:
            tape.backward(T.mul(x, c).sum())
        assert x.grad is not None
        assert c.grad is None

    def test_branching_paths_accumulate(self):
        x = T.tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = T.add(T.mul(x, 3.0), T.mul(x, x))  # 3x + x^2, d/dx = 3 + 2x
            tape.backward(y.sum())
        assert x.grad.tolist() == [7.0]

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(GradientError, match="nest"):
                with Tape():
                    pass


class TestGradCheck:
    def test_square(self):
        x = T.tensor([3.0], requires_grad=True)
        err = T.grad_check(lambda t: T.mul(t, t).sum(), x, eps=1e-5)
        assert err < 1e-8

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(5)
        logits = T.tensor(rng.normal(size=7), requires_grad=True)
        err = T.grad_check(
            lambda t: T.cross_entropy_with_logits(t, 4), logits, eps=1e-5)
        assert err < 1e-6

    def test_eps_validation(self):
        x = T.tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.grad_check(lambda t: t.sum(), x, eps=0.5)
        with pytest.raises(ValueError):
            T.grad_check(lambda t: t.sum(), x, eps=0.0)


def _fd_cases(rng):
    # Constants are drawn once so every probe re-evaluates the same function.
    def leaf():
        return T.tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)

    def const(*shape):
        return T.tensor(rng.uniform(-1, 1, shape))

    c23, c3, c34, c42 = const(2, 3), const(3), const(3, 4), const(4, 2)
    yield "add", leaf(), lambda x: T.add(x, c23).sum()
    yield "add_bias", leaf(), lambda x: T.add(x, c3).sum()
    yield "add_scalar", leaf(), lambda x: T.add(x, 1.5).mean()
    yield "sub", leaf(), lambda x: T.sub(x, c23).sum()
    yield "mul", leaf(), lambda x: T.mul(x, c23).sum()
    yield "mul_scalar", leaf(), lambda x: T.mul(x, -2.5).sum()
    yield "matmul_left", leaf(), lambda x: T.matmul(x, c34).sum()
    yield "matmul_right", leaf(), lambda x: T.matmul(c42, x).sum()
    c32 = const(3, 2)
    yield "transpose", leaf(), lambda x: T.mul(T.transpose(x), c32).sum()
    c6 = const(6)
    yield "reshape", leaf(), lambda x: T.mul(T.reshape(x, (6,)), c6).sum()
    c43 = const(4, 3)
    yield "concat", leaf(), lambda x: T.mul(
        T.concat([x, T.mul(x, 2.0)], axis=0), c43).sum()
    c33 = const(3, 3)
    yield "index_select_rows_dup", leaf(), lambda x: T.mul(
        T.index_select(x, np.array([0, 0, 1]), axis=0), c33).sum()
    c22 = const(2, 2)
    yield "index_select_cols", leaf(), lambda x: T.mul(
        T.index_select(x, np.array([2, 1]), axis=1), c22).sum()
    yield "mean", leaf(), lambda x: x.mean()
    w32, b2 = const(3, 2), const(2)
    yield "linear", leaf(), lambda x: T.linear(x, w32, b2).sum()
    w23 = const(2, 3)
    yield "softmax", leaf(), lambda x: T.mul(T.softmax(x, axis=-1), w23).sum()
    ln_g = T.tensor(rng.uniform(0.5, 1.5, 3))
    ln_b, ln_w = const(3), const(2, 3)
    yield "layer_norm_x", leaf(), lambda x: T.mul(
        T.layer_norm(x, ln_g, ln_b, eps=1e-5), ln_w).sum()
    gelu_w = const(2, 3)
    yield "gelu", leaf(), lambda x: T.mul(T.gelu(x), gelu_w).sum()
    yield "cross_entropy", T.tensor(rng.normal(size=5), requires_grad=True), \
        lambda x: T.cross_entropy_with_logits(x, 2)


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(42)
    for name, leaf, build in _fd_cases(rng):
        err = T.grad_check(build, leaf, eps=1e-5)
        assert err < 1e-4, f"{name}: finite-difference mismatch {err}"


def test_layer_norm_gain_bias_gradients():
    rng = np.random.default_rng(8)
    x = T.tensor(rng.uniform(-1, 1, (3, 4)))
    weight = T.tensor(rng.uniform(-1, 1, (3, 4)))
    gain = T.tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
    bias = T.tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    assert T.grad_check(
        lambda g: T.mul(T.layer_norm(x, g, bias, eps=1e-5), weight).sum(),
        gain) < 1e-4
    assert T.grad_check(
        lambda b: T.mul(T.layer_norm(x, gain, b, eps=1e-5), weight).sum(),
        bias) < 1e-4


def test_bit_determinism_of_forward_and_backward():
    def run():
        rng = np.random.default_rng(99)
        x = T.tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
        w = T.tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
        with Tape() as tape:
            y = T.gelu(T.matmul(x, w))
            p = T.softmax(y, axis=-1)
            loss = T.mul(p, p).sum()
            tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


class TestShapeValidation:
    def test_add_mismatch(self):
        with pytest.raises(ShapeError, match="incompatible"):
            T.add(T.tensor(np.zeros((2, 2))), T.tensor(np.zeros((3, 2))))

    def test_mul_mismatch(self):
        with pytest.raises(ShapeError):
            T.mul(T.tensor(np.zeros(2)), T.tensor(np.zeros(3)))

    def test_reshape_element_count(self):
        with pytest.raises(ShapeError):
            T.reshape(T.tensor(np.zeros(5)), (2, 3))

    def test_index_out_of_range(self):
        with pytest.raises(ShapeError):
            T.index_select(T.tensor(np.zeros((2, 2))), np.array([2]), axis=0)

    def test_concat_rank_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([T.tensor(np.zeros((2, 2))), T.tensor(np.zeros(2))])

    def test_item_needs_single_element(self):
        with pytest.raises(ShapeError):
            T.tensor([1.0, 2.0]).item()

    def test_cross_entropy_label_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            T.cross_entropy_with_logits(T.tensor([0.0, 0.0]), 2)


class TestFiniteChecks:
    def test_non_finite_input_reported(self):
        assert T.finite_checks_enabled()
        with pytest.raises(FloatingPointError):
            T.tensor([np.nan])

    def test_non_finite_op_output_reported(self):
        big = T.tensor([1e308])
        with np.errstate(over="ignore"):
            with pytest.raises(FloatingPointError, match="add"):
                T.add(big, big)

    def test_checks_can_be_disabled(self):
        T.set_finite_checks(False)
        try:
            with np.errstate(over="ignore"):
                out = T.add(T.tensor([1e308]), T.tensor([1e308]))
            assert np.isinf(out.data[0])
        finally:
            T.set_finite_checks(True)
