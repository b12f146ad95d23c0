import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vic import ops
from vic.gradcheck import grad_check
from vic.tensor import ShapeError, Tensor, no_grad, zero_grads

import oracles

# x * Phi(x) at 50 significant digits (mpmath), frozen
GELU_REFERENCE = {
    1.0: 0.8413447460685429,
    -1.0: -0.15865525393145705,
    0.5: 0.34573123063700656,
    2.0: 1.9544997361036416,
    -3.0: -0.0040496940948902835,
}


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12))


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 2))
        assert np.array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_scalar_product(self):
        assert ops.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        assert rel(ops.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loops(a, b)) < 1e-6

    def test_batched_broadcast(self, rng):
        a, b = rng.standard_normal((2, 3, 5, 4)), rng.standard_normal((4, 3))
        out = ops.matmul(Tensor(a), Tensor(b)).data
        assert out.shape == (2, 3, 5, 3)
        assert rel(out[1, 2], oracles.matmul_loops(a[1, 2], b)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimensions"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        assert np.array_equal(out.data, x)

    def test_delta_3x3(self, rng):
        x = rng.standard_normal((2, 1, 6, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), 1, 1)
        assert np.array_equal(out.data, x)

    def test_direct_summation_oracle(self, rng):
        x, k, b = rng.standard_normal((2, 1, 8, 8)), rng.standard_normal((4, 1, 3, 3)), rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), 1, 0).data
        assert rel(got, oracles.conv2d_loops(x, k, b, 1, 0)) < 1e-5

    @pytest.mark.parametrize("hw", [(3, 3), (5, 4), (8, 8)])
    @pytest.mark.parametrize("ksize", [1, 3])
    @pytest.mark.parametrize("padding", [0, 1])
    def test_oracle_grid(self, rng, hw, ksize, padding):
        x = rng.standard_normal((2, 2) + hw)
        k, b = rng.standard_normal((3, 2, ksize, ksize)), rng.standard_normal(3)
        got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), 1, padding).data
        assert rel(got, oracles.conv2d_loops(x, k, b, 1, padding)) < 1e-5

    def test_stride_two(self, rng):
        x, k = rng.standard_normal((1, 2, 7, 7)), rng.standard_normal((2, 2, 3, 3))
        got = ops.conv2d(Tensor(x), Tensor(k), None, 2, 1).data
        assert rel(got, oracles.conv2d_loops(x, k, None, 2, 1)) < 1e-5

    def test_non_integral_extent(self):
        with pytest.raises(ValueError, match="not integral"):
            ops.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), None, 2, 0)


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax(Tensor(np.full(7, 3.0)), axis=0).data
        assert np.allclose(out, 1 / 7, rtol=0, atol=1e-15)

    def test_analytic(self):
        out = ops.softmax(Tensor([0.0, math.log(3.0)], dtype=np.float64), axis=0).data
        assert np.allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        a = ops.softmax(Tensor(x), axis=1).data
        b = ops.softmax(Tensor(x + 17.5), axis=1).data
        assert np.allclose(a, b, rtol=0, atol=1e-12)

    def test_loop_oracle(self, rng):
        x = rng.standard_normal((3, 5))
        got = ops.softmax(Tensor(x), axis=-1).data
        want = np.array([oracles.softmax_loops(r) for r in x])
        assert rel(got, want) < 1e-5

    def test_large_inputs_stay_finite(self):
        out = ops.softmax(Tensor([1000.0, 0.0, -1000.0], dtype=np.float64), axis=0).data
        assert np.all(np.isfinite(out)) and out[0] == 1.0

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(Tensor(np.ones((2, 3))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-30, 30)))
    def test_rows_sum_to_one(self, x):
        out = ops.softmax(Tensor(x), axis=-1).data
        assert np.all(np.abs(out.sum(axis=-1) - 1) < 1e-6)
        assert np.all(out > 0)


class TestLayerNorm:
    def test_constant_input(self):
        out = ops.layer_norm(Tensor(np.full((1, 5), 2.5)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.array_equal(out.data, np.zeros((1, 5)))

    def test_two_values(self):
        out = ops.layer_norm(Tensor([[1.0, -1.0]], dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-5)

    def test_formula_oracle(self, rng):
        x, g, b = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)
        got = ops.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
        assert rel(got, oracles.layer_norm_formula(x, g, b)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)),
                      elements=st.floats(-100, 100)))
    def test_standardized(self, x):
        # eps = 1e-5 shrinks the output variance to var / (var + eps), so the unit-variance
        # property is asserted for slices whose variance is at least 0.1
        x = x[x.var(axis=-1) >= 0.1]
        if not len(x):
            return
        d = x.shape[-1]
        out = ops.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
        assert np.all(np.abs(out.var(axis=-1) - 1) < 1e-4)


class TestGelu:
    def test_zero(self):
        assert ops.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = ops.gelu(Tensor([10.0, -10.0], dtype=np.float64)).data
        assert abs(out[0] - 10.0) < 1e-6 and abs(out[1]) < 1e-6

    @pytest.mark.parametrize("x", sorted(GELU_REFERENCE))
    def test_erf_reference(self, x):
        got = ops.gelu(Tensor([x], dtype=np.float64)).data[0]
        assert abs(got - GELU_REFERENCE[x]) < 1e-14

    def test_not_tanh_approximation(self):
        x = 1.0
        tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        got = ops.gelu(Tensor([x], dtype=np.float64)).data[0]
        assert abs(got - tanh_form) > 1e-5


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert np.array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_input(self, rng):
        b = rng.standard_normal(5)
        out = ops.linear(Tensor(np.zeros((3, 4))), Tensor(rng.standard_normal((4, 5))), Tensor(b))
        assert np.array_equal(out.data, np.tile(b, (3, 1)))

    def test_loop_oracle(self, rng):
        x, w, b = rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        want = oracles.matmul_loops(x, w) + np.array([[b[j] for j in range(3)] for _ in range(6)])
        assert rel(ops.linear(Tensor(x), Tensor(w), Tensor(b)).data, want) < 1e-6

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestShapeOps:
    def test_reshape_round_trip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        back = ops.reshape(ops.reshape(Tensor(x), (6, 4)), (2, 3, 4)).data
        assert back.tobytes() == x.tobytes()

    def test_concat_empty(self, rng):
        x = rng.standard_normal((2, 3))
        out = ops.concat([Tensor(x), Tensor(np.zeros((2, 0)))], axis=1)
        assert np.array_equal(out.data, x)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(range(4)))
    def test_permute_inverse(self, perm):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
        inv = np.argsort(perm)
        back = ops.permute(ops.permute(Tensor(x), perm), inv).data
        assert back.tobytes() == x.tobytes()

    def test_slice_and_flatten(self, rng):
        x = rng.standard_normal((2, 5, 3))
        assert np.array_equal(ops.slice(Tensor(x), 1, 1, 4).data, x[:, 1:4])
        assert ops.flatten_trailing(Tensor(x), 1).shape == (2, 15)

    def test_element_count_mismatch(self):
        with pytest.raises(ShapeError):
            ops.reshape(Tensor(np.ones(6)), (4, 2))


class TestElementwise:
    def test_add_zero(self, rng):
        x = rng.standard_normal((3, 4))
        assert np.array_equal(ops.add(Tensor(x), 0.0).data, x)

    def test_mean_of_constant(self):
        assert ops.mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5

    def test_broadcast_add_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
        want = np.array([[a[i, j] + b[j] for j in range(4)] for i in range(3)])
        assert np.array_equal(ops.add(Tensor(a), Tensor(b)).data, want)

    def test_broadcast_grad_sums(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        ops.sum(ops.add(a, b)).backward()
        assert np.array_equal(b.grad, np.full(4, 3.0))

    def test_incompatible(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))

    def test_operators(self, rng):
        x = rng.standard_normal(3)
        t = Tensor(x)
        assert np.array_equal((t * 2.0 - t + 1.0).data, x * 2.0 - x + 1.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(ops.cross_entropy_logits(Tensor(np.zeros((4, 7))), [0, 1, 2, 6]).item() - math.log(7)) < 1e-6

    def test_confident(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = logits[1, 1] = 1000.0
        assert ops.cross_entropy_logits(Tensor(logits), [3, 1]).item() < 1e-12

    def test_log_softmax_oracle(self, rng):
        logits, labels = rng.standard_normal((4, 10)), rng.integers(0, 10, 4)
        got = ops.cross_entropy_logits(Tensor(logits), labels).item()
        assert abs(got - oracles.cross_entropy_loops(logits, labels)) / abs(got) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            ops.cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        ops.sum(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_mean_grad(self):
        x = Tensor(np.zeros(8), requires_grad=True)
        ops.mean(x).backward()
        assert np.allclose(x.grad, 1 / 8)

    def test_accumulates_until_cleared(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ops.sum(x).backward()
        ops.sum(x).backward()
        assert np.array_equal(x.grad, np.full(3, 2.0))
        zero_grads([x])
        assert x.grad is None

    def test_shared_subexpression(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = ops.mul(x, x)
        ops.sum(ops.add(y, y)).backward()
        assert np.allclose(x.grad, 4 * x.data)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ops.scale(x, 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.sum(x)
        assert not y.requires_grad

    def test_float32_preserved(self, rng):
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)
        y = ops.gelu(ops.layer_norm(x, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))))
        ops.mean(y).backward()
        assert y.dtype == np.float32 and x.grad.dtype == np.float32

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 1, 6, 6)).astype(np.float32)
        k = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)

        def run():
            t = Tensor(x, requires_grad=True)
            ops.sum(ops.gelu(ops.conv2d(t, Tensor(k), None, 1, 1))).backward()
            return t.grad

        assert run().tobytes() == run().tobytes()


class TestGradCheck:
    def test_sum_of_squares(self, rng):
        assert grad_check(lambda x: ops.sum(ops.mul(x, x)), rng.standard_normal((3, 4))) < 1e-6

    def test_gelu_linear(self, rng):
        w = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.standard_normal(3))
        assert grad_check(lambda x: ops.sum(ops.gelu(ops.linear(x, w, b))), rng.standard_normal((2, 4))) < 1e-5

    def test_detects_wrong_gradient(self, rng):
        def bad_square(x):
            def backward(g):
                return (g * x.data,)  # missing factor 2
            return Tensor._result(x.data ** 2, (x,), backward, "bad")

        with pytest.raises(AssertionError):
            grad_check(lambda x: ops.sum(bad_square(x)), rng.standard_normal(4), rel_tol=1e-5)

    @pytest.mark.parametrize("trial", range(20))
    def test_composite_random_points(self, trial):
        rng = np.random.default_rng(trial)
        B, C, H, W = rng.integers(1, 3), rng.integers(1, 3), rng.integers(3, 7), rng.integers(3, 7)
        k = Tensor(rng.standard_normal((2, C, 3, 3)))
        w = Tensor(rng.standard_normal((W, 4)))
        g, bb = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        labels = rng.integers(0, 4, B)
        # random weighting keeps the pooled softmax from collapsing to a constant
        r = Tensor(rng.standard_normal((1, 2, H, 4)))

        def f(x):
            y = ops.conv2d(x, k, None, 1, 1)                          # B x 2 x H x W
            y = ops.gelu(ops.matmul(y, w))                             # B x 2 x H x 4
            y = ops.layer_norm(y, g, bb)
            y = ops.softmax(y, axis=-2)
            return ops.cross_entropy_logits(ops.mean(ops.mul(y, r), axis=(1, 2)), labels)

        assert grad_check(f, rng.standard_normal((B, C, H, W)), rel_tol=1e-4) < 1e-4


def _random_op_case(name, rng):
    """(function of one float64 input, input point) for a random shape."""
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    if name == "conv2d":
        C, O = (int(v) for v in rng.integers(1, 4, 2))
        H, W = (int(v) for v in rng.integers(3, 8, 2))
        ks, pad, stride = int(rng.choice([1, 3])), int(rng.integers(0, 2)), 1
        k, b = Tensor(rng.standard_normal((O, C, ks, ks))), Tensor(rng.standard_normal(O))
        return (lambda x: ops.conv2d(x, k, b, stride, pad)), rng.standard_normal((2, C, H, W))
    if name == "matmul":
        b = Tensor(rng.standard_normal((m, 3)))
        return (lambda x: ops.matmul(x, b)), rng.standard_normal((2, n, m))
    if name == "softmax":
        axis = int(rng.integers(0, 2))
        return (lambda x: ops.softmax(x, axis=axis)), rng.standard_normal((n, m))
    if name == "layer_norm":
        # with two features the normalised output is +-1 and the gradient is only eps-sized
        m = max(m, 3)
        g, b = Tensor(rng.standard_normal(m)), Tensor(rng.standard_normal(m))
        return (lambda x: ops.layer_norm(x, g, b)), rng.standard_normal((n, m))
    if name == "gelu":
        return ops.gelu, rng.standard_normal((n, m))
    raise KeyError(name)


@pytest.mark.parametrize("name", ["conv2d", "matmul", "softmax", "layer_norm", "gelu", "cross_entropy_logits"])
@pytest.mark.parametrize("trial", range(20))
def test_op_gradients_random(name, trial):
    rng = np.random.default_rng(1000 * trial + len(name))
    if name == "cross_entropy_logits":
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        labels = rng.integers(0, k, n)
        err = grad_check(lambda x: ops.cross_entropy_logits(x, labels), rng.standard_normal((n, k)), rel_tol=1e-5)
    else:
        fn, point = _random_op_case(name, rng)
        weight = Tensor(rng.standard_normal(fn(Tensor(point)).shape))
        err = grad_check(lambda x: ops.sum(ops.mul(fn(x), weight)), point, rel_tol=1e-5)
    assert err < 1e-5
