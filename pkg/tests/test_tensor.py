import numpy as np
import pytest

from dfnlab import tensor as T
from dfnlab.tensor import Tensor, no_grad


def test_matmul_grad_hand_computed():
    # d/da sum(a @ b) = 1 @ b^T; rows of b sum to 5 and 9
    a = Tensor(np.eye(2), requires_grad=True)
    b = Tensor(np.array([[2.0, 3.0], [4.0, 5.0]]), requires_grad=True)
    T.matmul(a, b).sum().backward()
    assert np.array_equal(a.grad, [[5.0, 9.0], [5.0, 9.0]])
    assert np.array_equal(b.grad, [[1.0, 1.0], [1.0, 1.0]])
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_conv1x1_hand_matmul():
    x = Tensor(np.array([3.0, 5.0]).reshape(2, 1, 1))
    w = Tensor(np.array([2.0, -1.0]).reshape(1, 2, 1, 1))
    assert T.conv1x1(x, w).data.ravel().tolist() == [1.0]
    eye = Tensor(np.eye(2).reshape(2, 2, 1, 1))
    assert np.array_equal(T.conv1x1(x, eye).data, x.data)
    with pytest.raises(ValueError):
        T.conv1x1(x, Tensor(np.ones((1, 3, 1, 1))))


def test_elementwise_examples():
    assert T.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    z = Tensor(np.zeros(1), requires_grad=True)
    T.sigmoid(z).sum().backward()
    assert z.grad[0] == 0.25
    r = Tensor(np.zeros(1), requires_grad=True)
    T.relu(r).sum().backward()
    assert r.grad[0] == 0.0


def test_fan_out_and_trivial_backward():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    (x.sum() + x.sum()).backward()
    assert np.array_equal(x.grad, 2 * np.ones((2, 3)))
    y = Tensor(np.ones(4), requires_grad=True)
    (y * 0.0).sum().backward()
    assert np.array_equal(y.grad, np.zeros(4))


def test_backward_misuse():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_conv2d_single_window():
    # a 3x3 ones input with a 3x3 kernel of 1/9 and zero padding: centre pixel is the mean
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = T.conv2d(x, w)
    assert out.shape == (1, 1, 3, 3)
    assert np.isclose(out.data[0, 0, 1, 1], 1.0)
    assert np.isclose(out.data[0, 0, 0, 0], 4.0 / 9.0)


def test_conv2d_edge_padding_keeps_constants():
    x = Tensor(np.full((1, 2, 4, 4), 3.0))
    w = Tensor(np.full((1, 2, 3, 3), 1.0))
    out = T.conv2d(x, w, pad_mode="edge")
    assert np.allclose(out.data, 54.0)


def test_bilinear_examples():
    out = T.bilinear_resize(Tensor(np.array([[0.0, 1.0], [0.0, 1.0]])), 2, 3)
    assert np.array_equal(out.data[:, 1], [0.5, 0.5])
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    big = T.bilinear_resize(Tensor(x), 4, 4).data
    assert [big[0, 0], big[0, -1], big[-1, 0], big[-1, -1]] == [1.0, 2.0, 3.0, 4.0]
    assert np.allclose(T.bilinear_resize(Tensor(np.full((3, 3), 7.0)), 5, 2).data, 7.0)


def test_bce_known_values():
    # logit 0 -> ln 2 regardless of the label
    assert np.isclose(float(T.bce_loss(Tensor(np.zeros(4)), np.array([0, 1, 0, 1.0])).data), np.log(2))
    # logit 1 with label 0 -> softplus(1)
    v = float(T.bce_loss(Tensor(np.array([1.0])), np.array([0.0])).data)
    assert round(v, 6) == 1.313262


def test_bce_stable_for_large_logits():
    v = T.bce_loss(Tensor(np.array([800.0, -800.0])), np.array([1.0, 0.0]))
    assert np.isfinite(v.data) and v.data < 1e-300


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert np.allclose(x.grad, [5.0, -1.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_amax_routes_gradient_to_argmax():
    x = Tensor(np.array([[1.0, 5.0, 2.0]]), requires_grad=True)
    T.amax(x, axis=1).sum().backward()
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_divide_by_tensor_is_rejected():
    with pytest.raises(TypeError):
        Tensor(np.ones(2)) / Tensor(np.ones(2))


def test_gradcheck_catches_a_wrong_backward():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad():
        return T._make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad-square").sum()

    with pytest.raises(AssertionError):
        T.gradcheck(bad, [x])


def test_gradcheck_subsampled_entries():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 6)))
    err = T.gradcheck(lambda: (T.relu(T.matmul(x, w)) * 1.7).sum(), [w], max_entries=7)
    assert err < 1e-6


@pytest.mark.parametrize("mode", ["zeros", "edge"])
def test_conv2d_gradcheck(mode):
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 2, 5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    r = rng.standard_normal((2, 3, 5, 4))
    assert T.gradcheck(lambda: (T.conv2d(x, w, None, mode) * Tensor(r)).sum(), [x, w]) < 1e-6
