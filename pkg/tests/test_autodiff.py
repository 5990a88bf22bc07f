import numpy as np
import pytest

from srlab import tensor as T
from srlab.tensor import Tensor, backward, finite_diff_gradient, grad_rel_error


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    grads = backward(T.tsum(x))
    assert np.array_equal(grads[x].data, np.ones((3, 4)))


def test_backward_square_analytic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    grads = backward(T.tsum(x * x))
    assert np.array_equal(grads[x].data, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_backward_requires_tracked_loss():
    x = Tensor(np.ones(3))
    with pytest.raises(ValueError, match="requires_grad"):
        backward(T.tsum(x))


def test_untouched_leaves_get_zero_gradients():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = backward(T.tsum(x), leaves=[x, unused])
    assert np.array_equal(grads[unused].data, np.zeros((2, 2)))
    assert np.array_equal(grads[x].data, np.ones(3))


def test_reused_node_accumulates_once():
    # diamond: loss = sum(a + a) with a = 2x; each node visited once, so
    # the closure must see the full accumulated adjoint
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = x * 2.0
    grads = backward(T.tsum(a + a))
    assert np.array_equal(grads[x].data, [4.0, 4.0])


def test_full_cnn_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    x = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    w2 = Tensor(rng.standard_normal((3, 2 * 4 * 4)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    labels = np.array([0, 2])

    def net(xt, w1t=None, b1t=None, w2t=None, b2t=None):
        h = T.conv2d(xt, w1t or w1, b1t or b1, stride=1, padding=1)
        h = T.relu(h)
        h = T.maxpool2d(h, 2)
        h = T.flatten(h)
        return T.cross_entropy(T.linear(h, w2t or w2, b2t or b2), labels)

    loss = net(x)
    grads = backward(loss, leaves=[x, w1, b1, w2, b2])
    for leaf, f in [
        (x, lambda t: net(t)),
        (w1, lambda t: net(x, w1t=t)),
        (b1, lambda t: net(x, b1t=t)),
        (w2, lambda t: net(x, w2t=t)),
        (b2, lambda t: net(x, b2t=t)),
    ]:
        err = grad_rel_error(grads[leaf].data, finite_diff_gradient(f, leaf))
        assert err < 1e-4, f"leaf {leaf!r}: rel error {err}"


def test_finite_diff_basics():
    assert np.allclose(finite_diff_gradient(lambda t: T.tsum(t), Tensor(np.ones(4))), np.ones(4), atol=1e-9)
    g = finite_diff_gradient(lambda t: T.tsum(t * t), Tensor(np.array([3.0])))
    assert abs(g[0] - 6.0) < 1e-6
    with pytest.raises(ValueError, match="positive"):
        finite_diff_gradient(lambda t: T.tsum(t), Tensor(np.ones(2)), h=0.0)


def test_finite_diff_agrees_with_backward_on_chain():
    rng = np.random.default_rng(17)
    x = Tensor(rng.random((1, 1, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    lw = Tensor(rng.standard_normal((2, 2 * 16)))

    def f(t):
        h = T.relu(T.conv2d(t, w, stride=1, padding=0))
        return T.tsum(T.linear(T.flatten(h), lw))

    g = backward(f(x))[x].data
    num = finite_diff_gradient(f, x)
    assert np.max(np.abs(g - num)) < 1e-5


def test_no_graph_built_without_requires_grad():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out = T.relu(T.conv2d(x, Tensor(np.ones((1, 1, 3, 3)))))
    assert out._parents == () and out._backward is None and not out.requires_grad
