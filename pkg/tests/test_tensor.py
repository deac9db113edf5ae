import numpy as np
import pytest

from bcct import tensor as T
from oracles import bilinear_direct, conv2d_direct, finite_diff, rel_err

GRAD_TOL = 1e-6
FD_STEP = 1e-5


def randt(rng, *shape, scale=1.0, requires_grad=True):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad,
                    dtype=np.float64)


def scalarize(g, t):
    out = T.Tensor(np.asarray(t.data.sum()))

    def bwd(go, need):
        return (np.broadcast_to(go, t.shape),) if need[0] else (None,)

    g.record("sum", (t,), out, bwd)
    return out


def check_grads(build, tensors, tol=GRAD_TOL):
    g = T.Graph()
    out = scalarize(g, build(g))
    for t in tensors:
        t.grad = None
    T.backward(g, out)
    for t in tensors:
        num = finite_diff(lambda: float(build(None).data.sum()), t.data, FD_STEP)
        assert rel_err(t.grad, num) < tol


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.random((2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = T.conv2d(None, x, T.Tensor(w), T.Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x.data)


def test_conv2d_constant_input_ones_kernel():
    c = 0.7
    x = T.Tensor(np.full((1, 1, 6, 6), c))
    w = T.Tensor(np.ones((1, 1, 3, 3)))
    b = T.Tensor(np.zeros(1))
    out = T.conv2d(None, x, w, b, stride=1, pad=1)
    # direct summation oracle for the full map, interior must be 9c
    ref = conv2d_direct(x.data, w.data, b.data, 1, 1)
    assert np.allclose(out.data, ref, atol=1e-12)
    assert np.allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c, atol=1e-12)


def test_conv2d_matches_direct_summation():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((2, 3, 7, 6)))
    w = T.Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = T.Tensor(rng.standard_normal(4))
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        out = T.conv2d(None, x, w, b, stride, pad)
        ref = conv2d_direct(x.data, w.data, b.data, stride, pad)
        assert np.allclose(out.data, ref, atol=1e-10)


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    x = randt(rng, 2, 3, 6, 6)
    w = randt(rng, 4, 3, 3, 3, scale=0.5)
    b = randt(rng, 4, scale=0.1)
    check_grads(lambda g: T.conv2d(g, x, w, b, 1, 1), [x, w, b])


def test_conv2d_channel_mismatch_names_both_shapes():
    x = T.Tensor(np.zeros((1, 3, 4, 4)))
    w = T.Tensor(np.zeros((2, 5, 3, 3)))
    with pytest.raises(T.ShapeError) as exc:
        T.conv2d(None, x, w, T.Tensor(np.zeros(2)))
    assert "(1, 3, 4, 4)" in str(exc.value) and "(2, 5, 3, 3)" in str(exc.value)


def test_conv2d_kernel_larger_than_padded_input():
    x = T.Tensor(np.zeros((1, 1, 2, 2)))
    w = T.Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(T.ShapeError):
        T.conv2d(None, x, w, T.Tensor(np.zeros(1)), stride=1, pad=1)


# ---------------------------------------------------------------------------
# maxpool2d


def test_maxpool_basic():
    x = T.Tensor(np.asarray([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.maxpool2d(None, x, 2, 2)
    assert out.data.reshape(-1).tolist() == [4.0]


def test_maxpool_constant_input():
    x = T.Tensor(np.full((1, 2, 4, 4), 3.25))
    out = T.maxpool2d(None, x, 2, 2)
    assert np.all(out.data == 3.25)


def test_maxpool_gradients():
    rng = np.random.default_rng(3)
    x = randt(rng, 1, 1, 4, 4)
    check_grads(lambda g: T.maxpool2d(g, x, 2, 2), [x])


def test_maxpool_tie_routes_to_first_in_scan_order():
    x = T.Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    g = T.Graph()
    out = scalarize(g, T.maxpool2d(g, x, 2, 2))
    T.backward(g, out)
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)


def test_maxpool_overlapping_stride_gradients():
    rng = np.random.default_rng(4)
    x = randt(rng, 1, 2, 5, 5)
    check_grads(lambda g: T.maxpool2d(g, x, 3, 2), [x])


def test_maxpool_window_too_large_rejected():
    x = T.Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(T.ShapeError):
        T.maxpool2d(None, x, 3, 1)


# ---------------------------------------------------------------------------
# gap


def test_gap_values():
    x = T.Tensor(np.asarray([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.gap(None, x).data.reshape(-1).tolist() == [2.5]
    c = T.Tensor(np.full((2, 3, 4, 4), 0.125))
    assert np.all(T.gap(None, c).data == 0.125)


def test_gap_argmax_matches_sum_argmax():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.standard_normal((3, 6, 4, 4)))
    means = T.gap(None, x).data
    sums = x.data.sum(axis=(2, 3))
    assert np.array_equal(means.argmax(axis=1), sums.argmax(axis=1))


def test_gap_gradients():
    rng = np.random.default_rng(6)
    x = randt(rng, 2, 4, 3, 3)
    check_grads(lambda g: T.gap(g, x), [x])


# ---------------------------------------------------------------------------
# dense


def test_dense_identity_and_hand_case():
    x = T.Tensor(np.asarray([[1.0, 2.0]]))
    ident = T.dense(None, x, T.Tensor(np.eye(2)), T.Tensor(np.zeros(2)))
    assert np.array_equal(ident.data, x.data)
    out = T.dense(None, x, T.Tensor(np.asarray([[1.0], [1.0]])), T.Tensor(np.asarray([0.5])))
    assert out.data.reshape(-1).tolist() == [3.5]


def test_dense_gradients():
    rng = np.random.default_rng(7)
    x = randt(rng, 3, 4)
    w = randt(rng, 4, 2)
    b = randt(rng, 2)
    check_grads(lambda g: T.dense(g, x, w, b), [x, w, b])


def test_dense_dimension_mismatch():
    with pytest.raises(T.ShapeError):
        T.dense(None, T.Tensor(np.zeros((1, 3))), T.Tensor(np.zeros((4, 2))),
                T.Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# activations


def test_activation_values():
    assert T.softmax(None, T.Tensor(np.asarray([0.0, 0.0]))).data.tolist() == [0.5, 0.5]
    assert T.sigmoid(None, T.Tensor(np.asarray(0.0))).data == 0.5
    big = T.softmax(None, T.Tensor(np.asarray([1000.0, 1000.0])))
    assert np.all(np.isfinite(big.data))
    assert big.data.tolist() == [0.5, 0.5]


def test_softmax_rows_normalized():
    rng = np.random.default_rng(8)
    x = T.Tensor(rng.standard_normal((10, 7)) * 5)
    s = T.softmax(None, x).data
    assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-6)
    assert np.all((s > 0) & (s < 1))


def test_activation_gradients():
    rng = np.random.default_rng(9)
    for op in (T.relu, T.sigmoid, T.softmax):
        x = randt(rng, 3, 5)
        check_grads(lambda g: op(g, x), [x])


# ---------------------------------------------------------------------------
# bilinear upsample


def test_upsample_constant_and_single_pixel():
    c = T.Tensor(np.full((1, 2, 3, 4), 1.75))
    out = T.bilinear_upsample(None, c, 9, 11)
    assert out.shape == (1, 2, 9, 11)
    assert np.allclose(out.data, 1.75, atol=1e-12)
    v = T.Tensor(np.full((1, 1, 1, 1), -2.5))
    out = T.bilinear_upsample(None, v, 5, 6)
    assert np.all(out.data == -2.5)


def test_upsample_matches_direct_sampling_oracle():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 5))
    out = T.bilinear_upsample(None, T.Tensor(x[None, None]), 8, 9)
    ref = bilinear_direct(x, 8, 9)
    assert np.allclose(out.data[0, 0], ref, atol=1e-10)


def test_upsample_then_gap_preserves_mean_at_integer_factor():
    rng = np.random.default_rng(11)
    # constant-rows fixture plus random inputs; integer factors are
    # weight-uniform per source pixel, so the spatial mean is preserved
    rows = np.repeat(rng.standard_normal((4, 1)), 6, axis=1)
    for arr in (rows, rng.standard_normal((4, 6))):
        x = T.Tensor(arr[None, None])
        up = T.bilinear_upsample(None, x, 8, 12)
        assert abs(T.gap(None, up).data[0, 0] - T.gap(None, x).data[0, 0]) < 1e-10


def test_upsample_gradients():
    rng = np.random.default_rng(12)
    x = randt(rng, 1, 2, 3, 4)
    check_grads(lambda g: T.bilinear_upsample(g, x, 7, 9), [x])


def test_upsample_rejects_bad_targets():
    x = T.Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(T.ShapeError):
        T.bilinear_upsample(None, x, 0, 8)
    with pytest.raises(T.ShapeError):
        T.bilinear_upsample(None, x, 2, 8)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_gives_ones():
    # relu of a strictly positive input is the identity, so the composite
    # root is exactly sum(x) and its gradient is all ones
    x = T.Tensor(np.random.default_rng(13).random((3, 4)) + 0.1, requires_grad=True)
    g = T.Graph()
    root = scalarize(g, T.relu(g, x))
    T.backward(g, root)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_backward_linear_grad_equals_weight():
    rng = np.random.default_rng(14)
    x = T.Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 1)))
    b = T.Tensor(np.zeros(1))
    g = T.Graph()
    out = T.dense(g, x, w, b)
    T.backward(g, out)
    assert np.allclose(x.grad, w.data.T, atol=1e-15)


def test_backward_accumulates_without_reset():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    for expect in (1.0, 2.0):
        g = T.Graph()
        root = scalarize(g, T.relu(g, x))
        T.backward(g, root)
        assert np.all(x.grad == expect)


def test_backward_rejects_bad_roots():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    g = T.Graph()
    out = T.relu(g, x)
    with pytest.raises(T.ShapeError):
        T.backward(g, out)  # not a scalar
    stranger = T.Tensor(np.asarray(1.0))
    with pytest.raises(T.GraphError):
        T.backward(g, stranger)  # not on the graph


def test_forward_purity_and_backward_determinism():
    rng = np.random.default_rng(15)
    x = T.Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = T.Tensor(rng.standard_normal(4), requires_grad=True)

    out1 = T.conv2d(None, x, w, b, 1, 1)
    out2 = T.conv2d(None, x, w, b, 1, 1)
    assert np.array_equal(out1.data, out2.data)

    grads = []
    for _ in range(2):
        x.grad = w.grad = b.grad = None
        g = T.Graph()
        root = scalarize(g, T.sigmoid(g, T.conv2d(g, x, w, b, 1, 1)))
        T.backward(g, root)
        grads.append((x.grad.copy(), w.grad.copy(), b.grad.copy()))
    for a, bb in zip(*grads):
        assert np.array_equal(a, bb)


def test_forward_backward_outputs_finite():
    rng = np.random.default_rng(16)
    x = T.Tensor(rng.standard_normal((2, 3, 8, 8)) * 50, requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = T.Tensor(rng.standard_normal(4), requires_grad=True)
    g = T.Graph()
    h = T.sigmoid(g, T.conv2d(g, x, w, b, 1, 1))
    h = T.softmax(g, T.gap(g, T.maxpool2d(g, h, 2, 2)))
    root = scalarize(g, h)
    assert np.all(np.isfinite(h.data))
    T.backward(g, root)
    for t in (x, w, b):
        assert np.all(np.isfinite(t.grad))


def test_all_ops_gradient_sweep():
    # randomized sweep over every differentiable op in double precision
    rng = np.random.default_rng(17)
    for _ in range(5):
        x = randt(rng, 2, 2, 5, 5)
        w = randt(rng, 3, 2, 3, 3, scale=0.5)
        b = randt(rng, 3, scale=0.2)
        check_grads(lambda g: T.conv2d(g, x, w, b, 2, 1), [x, w, b])
        y = randt(rng, 1, 3, 4, 4)
        check_grads(lambda g: T.maxpool2d(g, y, 2, 2), [y])
        z = randt(rng, 2, 3, 2, 2)
        check_grads(lambda g: T.bilinear_upsample(g, z, 5, 7), [z])
