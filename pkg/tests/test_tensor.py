import numpy as np
import pytest

from greyinput import tensor as T
from greyinput.errors import ContractError, DimensionError, ParameterError
from greyinput.tensor import Tensor

from fdcheck import numeric_grad, rel_error


def _leaf(a):
    return Tensor(a, requires_grad=True)


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a_np, b_np = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a, b = _leaf(a_np), _leaf(b_np)
    T.matmul(a, b).sum().backward()
    num = numeric_grad(lambda: (a_np @ b_np).sum(), a_np)
    assert rel_error(a.grad, num) < 1e-6
    np.testing.assert_allclose(b.grad, a_np.T @ np.ones((3, 3)))


# -- conv2d ----------------------------------------------------------------


def test_conv_1x1_identity():
    x = np.random.default_rng(1).random((2, 1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_box_sum():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out.data[0, 0, i, j] == 4.0


@pytest.mark.parametrize("h,w,k,s,p", [(7, 5, 3, 2, 1), (6, 6, 5, 1, 2), (4, 9, 3, 3, 0), (3, 3, 1, 1, 0)])
def test_conv_output_extent(h, w, k, s, p):
    out = T.conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, k, k))), stride=s, pad=p)
    assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), pad=1)


def _naive_conv(x, w, b, stride, pad):
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 1, 0), (2, 2, 0)])
def test_conv_matches_naive_loop(k, s, p):
    rng = np.random.default_rng(k * 10 + s)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, pad=p)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, b, s, p), atol=1e-12)


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 1, 0)])
def test_conv_gradients_match_fd(k, s, p):
    rng = np.random.default_rng(3)
    x_np, w_np, b_np = rng.normal(size=(2, 2, 5, 6)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    x, w, b = _leaf(x_np), _leaf(w_np), _leaf(b_np)
    T.conv2d(x, w, b, stride=s, pad=p).sum().backward()

    def f():
        return _naive_conv(x_np, w_np, b_np, s, p).sum()

    assert rel_error(x.grad, numeric_grad(f, x_np)) < 1e-4
    assert rel_error(w.grad, numeric_grad(f, w_np)) < 1e-4
    assert rel_error(b.grad, numeric_grad(f, b_np)) < 1e-4


def test_conv_chunking_is_transparent(monkeypatch):
    monkeypatch.setattr(T, "_DIRECT_PAIRS", 0)
    rng = np.random.default_rng(4)
    x_np, w_np = rng.normal(size=(5, 3, 6, 6)), rng.normal(size=(2, 3, 3, 3))
    x, w = _leaf(x_np), _leaf(w_np)
    T.conv2d(x, w, pad=1).sum().backward()
    monkeypatch.setattr(T, "_IM2COL_BYTES", 1)
    x2, w2 = _leaf(x_np), _leaf(w_np)
    out2 = T.conv2d(x2, w2, pad=1)
    out2.sum().backward()
    np.testing.assert_allclose(out2.data, _naive_conv(x_np, w_np, np.zeros(2), 1, 1), atol=1e-12)
    np.testing.assert_allclose(x2.grad, x.grad, atol=1e-12)
    np.testing.assert_allclose(w2.grad, w.grad, atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [("float64", 1e-12), ("float32", 1e-4)])
def test_direct_conv_agrees_with_im2col(monkeypatch, dtype, tol):
    rng = np.random.default_rng(5)
    x_np, w_np, b_np, g_np = (rng.normal(size=(3, 3, 9, 7)), rng.normal(size=(3, 3, 5, 5)), rng.normal(size=3),
                              rng.normal(size=(3, 3, 9, 7)))

    def run():
        with T.default_dtype(dtype):
            x, w, b = _leaf(x_np), _leaf(w_np), _leaf(b_np)
            out = T.conv2d(x, w, b, pad=2)
            (out * Tensor(g_np)).sum().backward()
            return out.data, x.grad, w.grad, b.grad

    direct = run()
    monkeypatch.setattr(T, "_DIRECT_PAIRS", 0)
    via_cols = run()
    monkeypatch.setattr(T, "_COL_CACHE_BYTES", 0)
    uncached = run()
    for a, b, c in zip(direct, via_cols, uncached):
        assert a.dtype == np.dtype(dtype)
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
        np.testing.assert_array_equal(b, c)


# -- batchnorm -------------------------------------------------------------


def _bn(x, gamma, beta, training=True, eps=1e-5):
    c = x.shape[1]
    stats = (np.zeros(c), np.ones(c))
    return T.batchnorm2d(x, gamma, beta, stats, training, eps=eps), stats


def test_batchnorm_train_normalises():
    x = Tensor(np.random.default_rng(5).normal(3.0, 2.0, size=(4, 3, 5, 5)))
    out, _ = _bn(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12)
    assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) < 1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 2, 3, 3), 7.0))
    out, _ = _bn(x, Tensor([2.0, 3.0]), Tensor([0.25, -1.5]))
    np.testing.assert_allclose(out.data[:, 0], 0.25, atol=1e-12)
    np.testing.assert_allclose(out.data[:, 1], -1.5, atol=1e-12)


def test_batchnorm_running_stats_update_and_eval():
    rng = np.random.default_rng(6)
    x = rng.normal(2.0, 3.0, size=(8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), (rm, rv), True, momentum=0.5)
    np.testing.assert_allclose(rm, 0.5 * x.mean(axis=(0, 2, 3)))
    n = x.size // 2
    np.testing.assert_allclose(rv, 0.5 + 0.5 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    before = (rm.copy(), rv.copy())
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), (rm, rv), False)
    np.testing.assert_array_equal(rm, before[0])
    expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, expected)


def test_batchnorm_eps_must_be_positive():
    with pytest.raises(ParameterError):
        _bn(Tensor(np.zeros((1, 1, 2, 2))), Tensor([1.0]), Tensor([0.0]), eps=0.0)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient_matches_fd(training):
    rng = np.random.default_rng(7)
    x_np = rng.normal(size=(3, 2, 3, 4))
    g_np, b_np = rng.normal(size=2) + 1.5, rng.normal(size=2)
    r_np = rng.normal(size=x_np.shape)
    rm, rv = rng.normal(size=2), rng.random(2) + 0.5

    def f():
        stats = (rm.copy(), rv.copy())
        out = T.batchnorm2d(Tensor(x_np), Tensor(g_np), Tensor(b_np), stats, training)
        return (out.data * r_np).sum()

    x, g, b = _leaf(x_np), _leaf(g_np), _leaf(b_np)
    out = T.batchnorm2d(x, g, b, (rm.copy(), rv.copy()), training)
    (out * Tensor(r_np)).sum().backward()
    for leaf, arr in [(x, x_np), (g, g_np), (b, b_np)]:
        assert rel_error(leaf.grad, numeric_grad(f, arr)) < 1e-4


# -- small ops ---------------------------------------------------------------


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_dropout_zero_rate_is_identity():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert np.array_equal(T.dropout(x, 0.0, True, rng).data, x.data)
    assert np.array_equal(T.dropout(x, 0.0, False).data, x.data)


def test_dropout_scaling_and_rate_check():
    x = Tensor(np.ones(100_000))
    out = T.dropout(x, 0.25, True, np.random.default_rng(1)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02
    assert np.array_equal(T.dropout(x, 0.25, False).data, x.data)
    with pytest.raises(ParameterError):
        T.dropout(x, 1.0, True, np.random.default_rng(1))


def test_adaptive_pool_mean():
    out = T.adaptive_avg_pool2d(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 4.0
    with pytest.raises(ParameterError):
        T.adaptive_avg_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 2)


def test_concat_channels_and_mismatch():
    a, b = Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.ones((2, 2, 3, 3)))
    out = T.concat_channels([a, b])
    assert out.shape == (2, 3, 3, 3)
    with pytest.raises(DimensionError):
        T.concat_channels([a, Tensor(np.zeros((2, 1, 3, 4)))])


def test_relu_subgradient_at_zero():
    x = _leaf([-1.0, 0.0, 2.0])
    T.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


@pytest.mark.parametrize(
    "op",
    [
        lambda t: T.sigmoid(t),
        lambda t: T.relu(t),
        lambda t: T.log(T.sigmoid(t)),
        lambda t: T.exp(t) * 0.5,
        lambda t: T.adaptive_avg_pool2d(t),
        lambda t: T.concat_channels([t, t * 2.0]),
        lambda t: T.flatten(t) @ Tensor(np.arange(24.0).reshape(12, 2) / 10),
        lambda t: t / (T.exp(t) + 1.0),
        lambda t: T.dropout(t, 0.3, True, np.random.default_rng(9)),
    ],
)
def test_elementwise_gradients(op):
    rng = np.random.default_rng(11)
    x_np = rng.normal(size=(2, 3, 2, 2))
    x_np[np.abs(x_np) < 1e-2] = 0.5  # keep relu away from its kink
    r = None

    def f():
        out = op(Tensor(x_np)).data
        return (out * weights(out.shape)).sum()

    def weights(shape):
        nonlocal r
        if r is None:
            r = np.random.default_rng(12).normal(size=shape)
        return r

    x = _leaf(x_np)
    out = op(x)
    (out * Tensor(weights(out.shape))).sum().backward()
    assert rel_error(x.grad, numeric_grad(f, x_np)) < 1e-4


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = _leaf(np.random.default_rng(0).random((2, 3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = _leaf([1.0, -2.0])
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_requires_scalar():
    x = _leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_and_zero_grad_resets():
    x = _leaf([1.0, -2.0])
    for _ in range(2):
        (x * x).sum().backward()
    assert x.grad.tolist() == [4.0, -8.0]
    x.zero_grad()
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_populates_intermediates_and_visits_once():
    x = _leaf([3.0])
    y = x * 2.0
    z = y * y + y  # y reused: must be visited once with summed gradient
    z.sum().backward()
    assert x.grad.tolist() == [2.0 * (2 * 6.0 + 1)]
    assert y.grad is not None and y.grad.tolist() == [13.0]
    graph = T.Graph(z.sum())
    ids = [id(n) for n in graph]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(graph)}
    for node in graph:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = _leaf([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_forward_determinism():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert a.tobytes() == b.tobytes()
