import math

import numpy as np
import pytest

from binet import functional as F
from binet.bitpack import naive_conv2d_loops
from binet.dte import EstimatorState, dte_derivative, dte_forward
from binet.optim import SGD, cosine_lr, sgd_step
from binet.tensor import Tensor, backward, custom_grad, no_grad

from gradcheck import check


def _t(a, grad=False, dtype=np.float32):
    return Tensor(np.asarray(a), requires_grad=grad, dtype=dtype)


# -- examples ----------------------------------------------------------------
def test_conv_scalar_product():
    out = F.conv2d(_t([[[[2.0]]]]), _t([[[[3.0]]]]))
    assert out.data.shape == (1, 1, 1, 1) and out.data.item() == 6.0


def test_conv_sum_of_ones():
    out = F.conv2d(_t(np.ones((1, 1, 2, 2))), _t(np.ones((1, 1, 2, 2))))
    assert out.data.item() == 4.0


def test_conv_random_case_matches_loops():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    got = F.conv2d(_t(x), _t(w)).data
    ref = naive_conv2d_loops(x.astype(np.float64), w.astype(np.float64))
    assert np.max(np.abs(got - ref)) <= 1e-5


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channels"):
        F.conv2d(_t(np.zeros((1, 2, 4, 4))), _t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="larger"):
        F.conv2d(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 3, 3))))


def test_hardtanh_examples():
    out = F.hardtanh(_t([0.3, 2.0, -5.0])).data
    np.testing.assert_allclose(out, [0.3, 1.0, -1.0], rtol=0, atol=1e-7)


def test_cross_entropy_uniform():
    loss = F.cross_entropy(_t([[0.0, 0.0]]), np.array([0]))
    assert abs(float(loss.data) - math.log(2)) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="out of range"):
        F.cross_entropy(_t([[0.0, 0.0]]), np.array([2]))


def test_batch_norm_identity_on_standardized_batch():
    # eps = 1e-5 rescales by 1/sqrt(1 + eps), so keep |x| near 1
    rng = np.random.default_rng(0)
    x = np.repeat(np.array([[1.0], [-1.0]]), 32, axis=0) * np.ones((1, 3))
    x = rng.permutation(x)
    out = F.batch_norm(_t(x), _t(np.ones(3)), _t(np.zeros(3)), np.zeros(3, np.float32), np.ones(3, np.float32), True)
    assert np.max(np.abs(out.data - x)) <= 1e-5


def test_batch_norm_updates_running_stats():
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    F.batch_norm(_t(x), _t(np.ones(2)), _t(np.zeros(2)), rm, rv, True)
    np.testing.assert_allclose(rm, [0.2, 0.4], rtol=1e-6)
    # unbiased variances 2 and 8
    np.testing.assert_allclose(rv, [0.9 + 0.2, 0.9 + 0.8], rtol=1e-6)


def test_custom_grad_identity_estimator():
    x = _t([0.7], grad=True)
    y = custom_grad(x, np.sign, lambda a: np.ones_like(a))
    assert y.data[0] == 1.0
    backward((y * _t([2.0])).sum())
    assert x.grad[0] == 2.0


def test_custom_grad_zero_estimator():
    x = _t([0.7, -0.2], grad=True)
    backward(custom_grad(x, np.sign, np.zeros_like).sum())
    assert np.all(x.grad == 0)


def test_custom_grad_tanh_surrogate_matches_fd():
    st = EstimatorState.from_t(2.5)
    xs = np.linspace(-1.5, 1.5, 31)
    x = Tensor(xs, requires_grad=True, dtype=np.float64)
    backward(custom_grad(x, lambda a: dte_forward(a, st), lambda a: dte_derivative(a, st)).sum())
    h = 1e-5
    fd = (dte_forward(xs + h, st) - dte_forward(xs - h, st)) / (2 * h)
    np.testing.assert_allclose(x.grad, fd, rtol=1e-4, atol=0)


def test_backward_sum_and_square():
    w = _t([1.0, 2.0], grad=True)
    backward(w.sum())
    assert np.array_equal(w.grad, [1.0, 1.0])
    w2 = _t([1.0, 2.0], grad=True)
    backward((w2 * w2).sum())
    assert np.array_equal(w2.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(_t([1.0, 2.0], grad=True) * _t([1.0, 1.0]))


def test_fan_out_accumulates():
    w = _t([3.0], grad=True)
    backward((w + w + w).sum())
    assert w.grad[0] == 3.0


def test_no_grad_builds_no_graph():
    w = _t([1.0], grad=True)
    with no_grad():
        y = w * w
    assert not y.requires_grad


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)
    w1 = rng.standard_normal((4, 5)) * 0.5
    w2 = rng.standard_normal((3, 4)) * 0.5

    def build(ts):
        h = F.hardtanh(F.linear(Tensor(x, dtype=np.float64), ts[0]))
        return F.cross_entropy(F.linear(h, ts[1]), y)

    assert check(build, [w1, w2]) <= 1e-3


@pytest.mark.parametrize("i,expected", [(0, 0.1), (400, 0.0), (200, 0.05)])
def test_cosine_lr(i, expected):
    assert abs(cosine_lr(i, 400, 0.1) - expected) < 1e-12


def test_sgd_step_rule_and_errors():
    p, g, v = np.array([1.0]), np.array([0.5]), np.array([0.2])
    sgd_step([p], [g], [v], lr=0.1, momentum=0.9, weight_decay=0.1)
    assert np.isclose(v[0], 0.9 * 0.2 + 0.5 + 0.1)
    assert np.isclose(p[0], 1.0 - 0.1 * v[0])
    with pytest.raises(ValueError):
        sgd_step([p], [g], [v], lr=-1.0)
    with pytest.raises(ValueError):
        cosine_lr(0, 10, -0.1)


def test_sgd_buffers_start_at_zero():
    w = _t([1.0, 2.0], grad=True)
    opt = SGD([w], momentum=0.9)
    assert np.all(opt.buffers[0] == 0)
    w.grad = np.array([1.0, 1.0], np.float32)
    opt.step(0.5)
    np.testing.assert_allclose(w.data, [0.5, 1.5])


# -- properties ----------------------------------------------------------------
def _conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 5))
    o = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 3))
    h = int(rng.integers(max(k - 2 * p, 1), 9))
    w = int(rng.integers(max(k - 2 * p, 1), 9))
    return (n, c, h, w), (o, c, k, k), s, p


def test_conv_matches_loops_on_50_random_cases():
    rng = np.random.default_rng(11)
    for _ in range(50):
        xs, ws, s, p = _conv_case(rng)
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        got = F.conv2d(_t(x), _t(w), s, p).data
        ref = naive_conv2d_loops(x.astype(np.float64), w.astype(np.float64), s, p)
        assert got.shape == ref.shape
        assert np.max(np.abs(got - ref)) <= 1e-5


def _random_op_case(rng, kind):
    """(build, arrays) for one differentiable op; loss = sum(out * r) with fixed r."""
    if kind == "conv":
        xs, ws, s, p = _conv_case(rng)
        arrays = [rng.standard_normal(xs), rng.standard_normal(ws)]
        shape = F.conv2d_array(arrays[0], arrays[1], s, p).shape
        r = rng.standard_normal(shape)
        return (lambda ts: (F.conv2d(ts[0], ts[1], s, p) * Tensor(r, dtype=np.float64)).sum()), arrays
    if kind == "linear":
        n, i, o = rng.integers(1, 6, 3)
        arrays = [rng.standard_normal((n, i)), rng.standard_normal((o, i))]
        r = rng.standard_normal((n, o))
        return (lambda ts: (F.linear(ts[0], ts[1]) * Tensor(r, dtype=np.float64)).sum()), arrays
    if kind == "hardtanh":
        x = rng.uniform(-2, 2, (int(rng.integers(2, 20)),))
        x = x[np.abs(np.abs(x) - 1) > 0.01]  # keep finite differences off the kinks
        r = rng.standard_normal(x.shape)
        return (lambda ts: (F.hardtanh(ts[0]) * Tensor(r, dtype=np.float64)).sum()), [x]
    if kind in ("bn_train", "bn_eval"):
        shape = (int(rng.integers(2, 6)), int(rng.integers(1, 4))) + ((3, 3) if rng.random() < 0.5 else ())
        c = shape[1]
        arrays = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
        r = rng.standard_normal(shape)
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
        training = kind == "bn_train"

        def build(ts):
            out = F.batch_norm(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), training)
            return (out * Tensor(r, dtype=np.float64)).sum()

        return build, arrays
    if kind == "maxpool":
        k = int(rng.integers(1, 4))
        shape = (1, int(rng.integers(1, 3)), int(rng.integers(k, 8)), int(rng.integers(k, 8)))
        # distinct values spaced well above the finite-difference step
        x = rng.permutation(np.prod(shape)).reshape(shape) * 0.1
        out_shape = F.max_pool2d_array(x, k).shape
        r = rng.standard_normal(out_shape)
        return (lambda ts: (F.max_pool2d(ts[0], k) * Tensor(r, dtype=np.float64)).sum()), [x]
    if kind == "gap":
        shape = tuple(int(v) for v in rng.integers(1, 5, 4))
        r = rng.standard_normal(shape[:2])
        return (lambda ts: (F.global_avg_pool(ts[0]) * Tensor(r, dtype=np.float64)).sum()), [rng.standard_normal(shape)]
    if kind == "ce":
        n, k = int(rng.integers(1, 8)), int(rng.integers(2, 6))
        y = rng.integers(0, k, n)
        return (lambda ts: F.cross_entropy(ts[0], y)), [rng.standard_normal((n, k)) * 2]
    if kind == "matmul":
        a, b, c = rng.integers(1, 6, 3)
        r = rng.standard_normal((a, c))
        arrays = [rng.standard_normal((a, b)), rng.standard_normal((b, c))]
        return (lambda ts: ((ts[0] @ ts[1]) * Tensor(r, dtype=np.float64)).sum()), arrays
    if kind == "elementwise":
        shape = tuple(int(v) for v in rng.integers(1, 5, 2))
        arrays = [rng.standard_normal(shape), rng.standard_normal(shape)]
        return (lambda ts: ((ts[0] * ts[1] - ts[0] + ts[1]).reshape(-1) * (ts[0] + ts[0]).reshape(-1)).mean()), arrays
    if kind == "custom":
        st = EstimatorState.from_t(float(rng.uniform(0.2, 5)))
        x = rng.standard_normal(int(rng.integers(1, 20)))
        r = rng.standard_normal(x.shape)

        def build(ts):
            y = custom_grad(ts[0], lambda a: dte_forward(a, st), lambda a: dte_derivative(a, st))
            return (y * Tensor(r, dtype=np.float64)).sum()

        return build, [x]
    raise AssertionError(kind)


OP_KINDS = ("conv", "linear", "hardtanh", "bn_train", "bn_eval", "maxpool", "gap", "ce", "matmul", "elementwise", "custom")


def test_gradient_check_100_random_cases():
    rng = np.random.default_rng(2024)
    worst = {}
    for case in range(100):
        kind = OP_KINDS[case % len(OP_KINDS)]
        build, arrays = _random_op_case(rng, kind)
        err = check(build, arrays, h=1e-3)
        worst[kind] = max(worst.get(kind, 0.0), err)
    assert max(worst.values()) <= 1e-3, worst


def test_backward_is_deterministic():
    def grads():
        rng = np.random.default_rng(5)
        x = _t(rng.standard_normal((4, 3, 6, 6)))
        w = _t(rng.standard_normal((5, 3, 3, 3)), grad=True)
        g, b = _t(np.ones(5), grad=True), _t(np.zeros(5), grad=True)
        h = F.batch_norm(F.conv2d(x, w, 1, 1), g, b, np.zeros(5, np.float32), np.ones(5, np.float32), True)
        h = F.global_avg_pool(F.max_pool2d(F.hardtanh(h), 2))
        backward(F.cross_entropy(h, np.array([0, 1, 2, 3])))
        return w.grad.copy(), g.grad.copy()

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_forward_outputs_stay_finite():
    rng = np.random.default_rng(9)
    x = _t(rng.standard_normal((2, 3, 5, 5)) * 1e3)
    w = _t(rng.standard_normal((2, 3, 3, 3)))
    out = F.conv2d(x, w, 1, 1)
    out = F.batch_norm(out, _t(np.ones(2)), _t(np.zeros(2)), np.zeros(2, np.float32), np.ones(2, np.float32), True)
    loss = F.cross_entropy(F.global_avg_pool(out) * _t(np.full((2, 2), 1e3)), np.array([0, 1]))
    assert np.all(np.isfinite(out.data)) and np.isfinite(float(loss.data))
