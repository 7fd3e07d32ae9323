"""Tensor engine: op contracts, tape semantics, gradient oracle."""

import math

import numpy as np
import pytest

from cre import engine as eg
from cre.engine import Tape, Tensor, backward, finite_diff_check
from cre.errors import ContractError, ShapeError, TapeReuseError


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        out = eg.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_allclose(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = eg.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
            eg.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))

    def test_gradient_matches_finite_differences_float32(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)).astype(np.float32), requires_grad=True)
        err = finite_diff_check(lambda: eg.sum(eg.matmul(a, b)), [a, b], h=1e-3)
        assert err < 1e-3


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_is_log_k(self):
        loss = eg.softmax_cross_entropy(Tensor(np.zeros((4, 8))), np.zeros(4, dtype=int))
        assert abs(loss.item() - math.log(8)) < 1e-6

    def test_saturated_correct_logit_is_zero(self):
        logits = np.zeros((1, 5), dtype=np.float32)
        logits[0, 2] = 1e6
        loss = eg.softmax_cross_entropy(Tensor(logits), np.array([2]))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_hand_computed_value(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        targets = np.array([1, 2])
        expected = np.mean([
            math.log(sum(math.exp(v) for v in row)) - row[t]
            for row, t in zip(logits.tolist(), targets)
        ])
        loss = eg.softmax_cross_entropy(t64(logits, requires_grad=False), targets)
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            eg.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestLayerNorm:
    def test_constant_vector_gives_bias(self):
        x = Tensor(np.full((2, 5), 3.7))
        gain = t64(np.ones(5), requires_grad=False)
        bias = t64(np.arange(5, dtype=float), requires_grad=False)
        out = eg.layer_norm(Tensor(x.data.astype(np.float64)), gain, bias)
        np.testing.assert_allclose(out.data, np.broadcast_to(np.arange(5.0), (2, 5)), atol=1e-3)

    def test_standardized_input_passes_through(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 64))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        out = eg.layer_norm(t64(x, requires_grad=False),
                            t64(np.ones(64), requires_grad=False),
                            t64(np.zeros(64), requires_grad=False))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(size=(3, 6)))
        gain = t64(1.0 + 0.1 * rng.normal(size=6))
        bias = t64(rng.normal(size=6))
        w = t64(rng.normal(size=(3, 6)), requires_grad=False)
        err = finite_diff_check(
            lambda: eg.sum(eg.multiply(eg.layer_norm(x, gain, bias), w)),
            [x, gain, bias], h=1e-5)
        assert err < 1e-3

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            eg.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(5)), Tensor(np.zeros(5)))


class TestL2Normalize:
    def test_three_four_five(self):
        out = eg.l2_normalize(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], rtol=1e-6)

    def test_unit_vector_unchanged(self):
        v = np.array([[0.0, 1.0, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(eg.l2_normalize(Tensor(v)).data, v, atol=1e-7)

    def test_rows_have_unit_norm(self):
        rng = np.random.default_rng(3)
        out = eg.l2_normalize(Tensor(rng.normal(size=(4, 8)).astype(np.float32)))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(4), atol=1e-5)

    def test_zero_row_rejected(self):
        from cre.errors import DegenerateFeatureError
        with pytest.raises(DegenerateFeatureError):
            eg.l2_normalize(Tensor(np.zeros((2, 3))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t64(np.random.default_rng(4).normal(size=(3, 5)))
        with Tape() as tape:
            loss = eg.sum(x)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.ones((3, 5)))

    def test_sum_of_squares_gradient_is_2x(self):
        x = t64(np.random.default_rng(5).normal(size=(4,)))
        with Tape() as tape:
            loss = eg.sum(eg.multiply(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)

    def test_composite_chain_against_finite_differences(self):
        rng = np.random.default_rng(6)
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(4, 6)))
        gain = t64(np.ones(6))
        bias = t64(np.zeros(6))
        targets = rng.integers(0, 6, size=3)

        def f():
            h = eg.gelu(eg.matmul(a, b))
            return eg.softmax_cross_entropy(eg.layer_norm(h, gain, bias), targets)

        assert finite_diff_check(f, [a, b, gain, bias], h=1e-5) < 1e-5

    def test_non_scalar_loss_rejected(self):
        x = t64(np.zeros((2, 2)))
        with Tape() as tape:
            y = eg.multiply(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_tape_reuse_rejected(self):
        x = t64(np.ones(3))
        with Tape() as tape:
            loss = eg.sum(x)
        backward(loss, tape)
        with pytest.raises(TapeReuseError):
            backward(loss, tape)

    def test_grad_accumulates_across_tapes(self):
        x = t64(np.ones(2))
        for _ in range(2):
            with Tape() as tape:
                loss = eg.sum(x)
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2.0 * np.ones(2))

    def test_requires_grad_tensors_reachable_from_loss_have_grads(self):
        x = t64(np.random.default_rng(7).normal(size=(3, 3)))
        with Tape() as tape:
            mid = eg.gelu(x)
            loss = eg.mean(mid)
        backward(loss, tape)
        assert x.grad is not None and mid.grad is not None


class TestFiniteDiffCheck:
    def test_sum_of_squares_error_is_tiny(self):
        x = t64([1.0, 2.0, 3.0])
        err = finite_diff_check(lambda: eg.sum(eg.multiply(x, x)), [x], h=1e-3)
        assert err < 1e-6

    def test_constant_function_error_zero(self):
        x = t64(np.ones(4))
        c = t64(np.ones(()), requires_grad=False)
        assert finite_diff_check(lambda: eg.sum(eg.multiply(c, c)), [x]) == 0.0

    def test_nondeterministic_function_rejected(self):
        x = t64(np.ones(2))
        rng = np.random.default_rng(8)

        def f():
            return eg.sum(eg.scale(x, float(rng.random())))

        with pytest.raises(ContractError):
            finite_diff_check(f, [x])


@pytest.mark.parametrize("seed", range(20))
def test_every_op_gradient_property(seed):
    """Random small inputs for each differentiable op, 64-bit, rel err < 1e-5."""
    rng = np.random.default_rng(seed)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(3, 4)))
    w = t64(rng.normal(size=(4, 5)))
    gain = t64(1.0 + 0.1 * rng.normal(size=4))
    bias = t64(rng.normal(size=4))
    weight = t64(rng.normal(size=(3, 4)), requires_grad=False)
    table = t64(rng.normal(size=(6, 4)))
    ids = rng.integers(0, 6, size=(2, 5))
    targets = rng.integers(0, 5, size=3)
    q = t64(rng.normal(size=(2, 4, 3)))
    k = t64(rng.normal(size=(2, 4, 3)))
    v = t64(rng.normal(size=(2, 4, 3)))

    cases = [
        (lambda: eg.sum(eg.add(a, b)), [a, b]),
        (lambda: eg.sum(eg.multiply(a, b)), [a, b]),
        (lambda: eg.sum(eg.gelu(a)), [a]),
        (lambda: eg.mean(eg.multiply(a, a)), [a]),
        (lambda: eg.sum(eg.multiply(eg.softmax(a), weight)), [a]),
        (lambda: eg.sum(eg.multiply(eg.layer_norm(a, gain, bias), weight)), [a, gain, bias]),
        (lambda: eg.sum(eg.multiply(eg.transpose(a), eg.transpose(b))), [a, b]),
        (lambda: eg.sum(eg.multiply(eg.reshape(a, (4, 3)), eg.reshape(b, (4, 3)))), [a, b]),
        (lambda: eg.sum(eg.multiply(eg.concatenate([a, b], axis=0),
                                    eg.concatenate([b, a], axis=0))), [a, b]),
        (lambda: eg.softmax_cross_entropy(eg.matmul(a, w), targets), [a, w]),
        (lambda: eg.sum(eg.multiply(eg.embedding(table, ids), eg.embedding(table, ids))), [table]),
        (lambda: eg.sum(eg.scaled_dot_product_attention(q, k, v)), [q, k, v]),
    ]
    for f, params in cases:
        assert finite_diff_check(f, params, h=1e-5) < 1e-5


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    s = eg.softmax(Tensor(rng.normal(size=(7, 9)).astype(np.float32)))
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(7), atol=1e-6)


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(16, 16)).astype(np.float32)
    w = rng.normal(size=(16, 16)).astype(np.float32)

    def run():
        return eg.gelu(eg.matmul(Tensor(x), Tensor(w))).data.tobytes()

    assert run() == run()


def test_mixed_dtype_rejected():
    with pytest.raises(ShapeError):
        eg.add(Tensor(np.zeros(3, np.float32)), Tensor(np.zeros(3, np.float64)))


def test_broadcast_add_unbroadcasts_gradient():
    x = t64(np.random.default_rng(13).normal(size=(4, 3)))
    bias = t64(np.random.default_rng(14).normal(size=(3,)))
    with Tape() as tape:
        loss = eg.sum(eg.add(x, bias))
    backward(loss, tape)
    np.testing.assert_allclose(bias.grad, np.full(3, 4.0))
