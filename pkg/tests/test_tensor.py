import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppnet import tensor as T
from ppnet.exceptions import ContractError, DimensionError, NumericFault
from ppnet.tensor import Tensor, backward, grad_check


def naive_conv2d(x, w, b, padding):
    """Direct window sums; the independent oracle for conv2d."""
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.random((2, 1, 4, 5))
        out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64([0.0]), 0)
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_on_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        w = np.ones((1, 1, 3, 3))
        expected = naive_conv2d(x, w, [0.0], 1)
        # every 3x3 window around a pixel of a 2x2 image covers all four values
        np.testing.assert_array_equal(expected, [[[[10.0, 10.0], [10.0, 10.0]]]])
        out = T.conv2d(t64(x), t64(w), t64([0.0]), 1)
        np.testing.assert_array_equal(out.data, expected)

    def test_zero_input_gives_bias(self, rng):
        w = rng.normal(size=(3, 2, 3, 3))
        b = np.array([0.5, -1.0, 2.0])
        out = T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(w), t64(b), 1)
        for c in range(3):
            assert np.all(out.data[:, c] == b[c])

    @pytest.mark.parametrize("padding,k", [(0, 1), (1, 3), (0, 3), (2, 5)])
    def test_matches_direct_sums(self, rng, padding, k):
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = T.conv2d(t64(x), t64(w), t64(b), padding)
        assert out.shape == (2, 4, 6 + 2 * padding - k + 1, 7 + 2 * padding - k + 1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, padding), rtol=1e-12, atol=1e-12)

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        out = T.conv2d(t64(x), t64(w), t64([0.0]), 1).data[0, 0]
        # cross-correlation of an impulse gives the kernel rotated by 180 degrees
        np.testing.assert_array_equal(out, w[0, 0, ::-1, ::-1])

    def test_linear_in_input_and_kernel(self, rng):
        x, y = rng.normal(size=(2, 2, 2, 5, 5))
        K, K2 = rng.normal(size=(2, 3, 2, 3, 3))
        zero = t64(np.zeros(3))
        a, c = 0.7, -1.3
        lhs = T.conv2d(t64(a * x + c * y), t64(K), zero, 0).data
        rhs = a * T.conv2d(t64(x), t64(K), zero, 0).data + c * T.conv2d(t64(y), t64(K), zero, 0).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)
        lhs = T.conv2d(t64(x), t64(a * K + c * K2), zero, 0).data
        rhs = a * T.conv2d(t64(x), t64(K), zero, 0).data + c * T.conv2d(t64(x), t64(K2), zero, 0).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channels"):
            T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64([0.0]), 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 1, 2, 2))), t64([0.0]), 0)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_non_finite_output_is_a_fault(self):
        w = np.full((1, 1, 1, 1), 1e308)
        with pytest.raises(NumericFault):
            T.conv2d(t64(np.full((1, 1, 2, 2), 1e308)), t64(w), t64([0.0]), 0)


class TestMaxPool:
    def test_max_of_four(self):
        out = T.maxpool2d(t64([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_constant(self):
        out = T.maxpool2d(t64(np.full((1, 2, 4, 6), 0.3)))
        assert out.shape == (1, 2, 2, 3)
        assert np.all(out.data == 0.3)

    def test_gradient_routes_to_argmax(self):
        x = t64([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
        g = backward(T.mean_all(T.maxpool2d(x)) if False else _sum(T.maxpool2d(x)), [x])[x]
        np.testing.assert_array_equal(g, [[[[0.0, 0.0], [0.0, 1.0]]]])

    def test_tie_goes_to_first_in_row_major_order(self):
        x = t64(np.ones((1, 1, 2, 2)), grad=True)
        g = backward(_sum(T.maxpool2d(x)), [x])[x]
        np.testing.assert_array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_backward_one_hot_per_window(self, rng):
        x = t64(rng.normal(size=(2, 3, 6, 4)), grad=True)
        up = rng.normal(size=(2, 3, 3, 2))
        out = T.maxpool2d(x)
        g = backward(_sum(T.mul(out, t64(up))), [x])[x]
        blocks = g.reshape(2, 3, 3, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 3, 2, 4)
        assert np.all(np.count_nonzero(blocks, axis=-1) == 1)
        np.testing.assert_allclose(blocks.sum(axis=-1), up)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(t64(np.zeros((1, 1, 3, 4))))


def _sum(x):
    return T.scale(T.mean_all(x), x.data.size)


class TestUpsample:
    def test_replication(self):
        out = T.upsample_nearest(t64([[[[5.0]]]]), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_factor_one_is_identity(self, rng):
        x = rng.random((1, 2, 3, 3))
        np.testing.assert_array_equal(T.upsample_nearest(t64(x), 1).data, x)

    def test_maxpool_inverts_upsample(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(T.maxpool2d(T.upsample_nearest(t64(x), 2), 2).data, x)


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(t64([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_tanh_at_zero(self):
        assert T.sigmoid(t64([0.0])).data[0] == 0.5
        assert T.tanh(t64([0.0])).data[0] == 0.0

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(t64([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_concat_channels(self):
        a, b = t64(np.zeros((2, 2, 3, 3))), t64(np.ones((2, 3, 3, 3)))
        assert T.concat_channels(a, b).shape == (2, 5, 3, 3)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels(t64(np.zeros((1, 1, 3, 3))), t64(np.zeros((1, 1, 3, 4))))

    def test_elementwise_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(t64(np.zeros(3)), t64(np.zeros(4)))

    def test_clamp01(self):
        np.testing.assert_array_equal(T.clamp01(t64([-0.5, 0.25, 1.5])).data, [0.0, 0.25, 1.0])

    def test_mean_all_is_scalar(self):
        assert T.mean_all(t64(np.arange(6.0).reshape(2, 3))).shape == ()

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e6, 1e6)))
    def test_relu_split_identities(self, x):
        pos, neg = T.relu(t64(x)).data, T.relu(t64(-x)).data
        np.testing.assert_array_equal(pos - neg, x)
        np.testing.assert_array_equal(pos * neg, np.zeros_like(x))


class TestBackward:
    def test_mean_all(self):
        x = t64(np.ones((2, 2)), grad=True)
        np.testing.assert_array_equal(backward(T.mean_all(x), [x])[x], np.full((2, 2), 0.25))

    def test_relu_gate(self):
        x = t64([-1.0, 2.0], grad=True)
        np.testing.assert_array_equal(backward(T.mean_all(T.relu(x)), [x])[x], [0.0, 0.5])

    def test_non_scalar_loss(self):
        x = t64(np.ones(3), grad=True)
        with pytest.raises(ContractError):
            backward(T.relu(x), [x])

    def test_unreachable_leaf_gets_zero(self):
        x, y = t64(np.ones(3), grad=True), t64(np.ones(2), grad=True)
        grads = backward(T.mean_all(x), [x, y])
        np.testing.assert_array_equal(grads[y], np.zeros(2))

    def test_shared_subexpression_accumulates(self):
        x = t64([3.0], grad=True)
        y = T.mul(x, x)  # x used twice
        np.testing.assert_allclose(backward(T.mean_all(T.add(y, x)), [x])[x], [7.0])

    def test_no_grad_builds_no_graph(self):
        x = t64([1.0], grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad and y.parents == ()

    def test_deep_chain_no_recursion_limit(self):
        x = t64([0.5], grad=True)
        y = x
        for _ in range(5000):
            y = T.scale(y, 1.0)
        np.testing.assert_allclose(backward(T.mean_all(y), [x])[x], [1.0])

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            bt = Tensor(np.zeros(4, np.float32), requires_grad=True)
            out = T.mean_all(T.sigmoid(T.conv2d(xt, wt, bt, 1)))
            g = backward(out, [xt, wt])
            return out.data, g[xt], g[wt]

        for a, b in zip(run(), run()):
            assert a.tobytes() == b.tobytes()


# --- finite-difference oracle ---------------------------------------------

def _weighted(rng, shape):
    # random weighting keeps the scalar objective sensitive to every element
    w = t64(rng.normal(size=shape))
    return lambda out: T.mean_all(T.mul(out, w))


def _op_cases(rng):
    x_shape = (2, 2, 4, 4)
    k = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    other = t64(rng.normal(size=x_shape))
    w_conv = _weighted(rng, (2, 3, 4, 4))
    w_x = _weighted(rng, x_shape)
    w_pool = _weighted(rng, (2, 2, 2, 2))
    w_up = _weighted(rng, (2, 2, 8, 8))
    w_cat = _weighted(rng, (2, 4, 4, 4))
    w_sl = _weighted(rng, (2, 1, 4, 4))
    x_in = rng.normal(size=x_shape)
    x_unit = rng.uniform(-0.5, 1.5, size=x_shape)
    return {
        "conv2d_input": (lambda x: w_conv(T.conv2d(x, k, b, 1)), x_in),
        "conv2d_kernel": (lambda kk: w_conv(T.conv2d(other, kk, b, 1)), k.data),
        "conv2d_bias": (lambda bb: w_conv(T.conv2d(other, k, bb, 1)), b.data),
        "maxpool2d": (lambda x: w_pool(T.maxpool2d(x)), x_in),
        "upsample_nearest": (lambda x: w_up(T.upsample_nearest(x, 2)), x_in),
        "relu": (lambda x: w_x(T.relu(x)), x_in),
        "sigmoid": (lambda x: w_x(T.sigmoid(x)), x_in),
        "tanh": (lambda x: w_x(T.tanh(x)), x_in),
        "add": (lambda x: w_x(T.add(x, other)), x_in),
        "sub": (lambda x: w_x(T.sub(other, x)), x_in),
        "mul": (lambda x: w_x(T.mul(x, other)), x_in),
        "mul_self": (lambda x: w_x(T.mul(x, x)), x_in),
        "scale": (lambda x: w_x(T.scale(x, -2.5)), x_in),
        "clamp01": (lambda x: w_x(T.clamp01(x)), x_unit),
        "concat_channels": (lambda x: w_cat(T.concat_channels(x, other)), x_in),
        "slice_channels": (lambda x: w_sl(T.slice_channels(x, 1, 2)), x_in),
        "mean_all": (lambda x: T.mean_all(x), x_in),
    }


OPS = list(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_every_op(op, seed):
    f, x = _op_cases(np.random.default_rng(seed))[op]
    assert grad_check(f, x, eps=1e-5) < 1e-4


def test_grad_check_exact_for_mean(rng):
    assert grad_check(T.mean_all, rng.normal(size=(3, 4))) < 1e-10


def test_grad_check_sigmoid(rng):
    assert grad_check(lambda x: T.mean_all(T.sigmoid(x)), rng.normal(size=(2, 5))) < 1e-6


def test_grad_check_conv(rng):
    k, b = t64(rng.normal(size=(2, 3, 3, 3))), t64(np.zeros(2))
    assert grad_check(lambda x: T.mean_all(T.conv2d(x, k, b, 1)), rng.normal(size=(1, 3, 5, 5))) < 1e-6


def test_grad_check_detects_wrong_gradient(rng):
    def broken(x):
        out = T.relu(x)
        out._backward = lambda g: (2 * g,)
        return T.mean_all(out)

    assert grad_check(broken, rng.uniform(0.5, 1.0, size=4)) > 0.1
