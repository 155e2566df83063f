import numpy as np
import pytest

from dfqvit import tensor as T
from dfqvit.tensor import ShapeError, Tape, TapeError, Tensor
from helpers import check_grads, tape_grads

rng = np.random.default_rng(0)


def r(*shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("fn, shapes", [
    (lambda a, b: T.sum(a * b), [(3, 4), (3, 4)]),
    (lambda a, b: T.sum((a + b) * a), [(3, 4), (4,)]),
    (lambda a, b: T.sum(a - b * b), [(2, 3), (1, 3)]),
    (lambda a, b: T.sum(a / (T.exp(b) + 1.0)), [(2, 3), (2, 3)]),
    (lambda a, b: T.sum(T.matmul(a, b) * T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    (lambda a, b: T.sum(T.matmul(a, b) * T.matmul(a, b)), [(2, 3, 4), (2, 4, 5)]),
])
def test_binary_ops_match_finite_differences(fn, shapes):
    check_grads(fn, *[r(*s) for s in shapes])


@pytest.mark.parametrize("fn", [
    lambda x: T.sum(T.exp(x) * x),
    lambda x: T.sum(T.log(T.exp(x) + 1.0)),
    lambda x: T.sum(T.sqrt(x * x + 1.0)),
    lambda x: T.sum(T.abs(x) * x),
    lambda x: T.sum(T.maximum(x, 0.1) * x),
    lambda x: T.sum(T.scale(x, 2.5) * x),
    lambda x: T.sum(T.mean(x, axis=1) * T.mean(x, axis=1)),
    lambda x: T.sum(T.sum(x, axis=0, keepdims=True) * x),
    lambda x: T.sum(T.reshape(x, (4, 3)) @ T.transpose(T.reshape(x, (4, 3)))),
    lambda x: T.sum(T.swapaxes(x, 0, 1) * T.swapaxes(x, 0, 1)),
    lambda x: T.sum(x[1:, ::2] * x[1:, ::2]) + T.sum(x[[0, 0, 2]]),
    lambda x: T.sum(T.concat([x, x * x], axis=1)),
    lambda x: T.sum(T.softmax(x, axis=-1) * T.softmax(x, axis=-1)),
    lambda x: T.sum(T.log_softmax(x, axis=0) * x),
    lambda x: T.sum(T.gelu(x) * x),
    lambda x: T.sum(T.cross_entropy(x, np.array([0, 2, 3]))),
])
def test_unary_ops_match_finite_differences(fn):
    check_grads(fn, r(3, 4) + 0.05)


def test_layer_norm_gradients():
    x, g, b = r(2, 3, 5), r(5), r(5)
    w = r(2, 3, 5)
    check_grads(lambda x, g, b: T.sum(T.layer_norm(x, g, b) * w), x, g, b)


def test_softmax_rows_sum_to_one_and_resist_overflow():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
    s = T.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    np.testing.assert_allclose(s[0], [0.5, 0.5, 0.0])


def test_layer_norm_output_statistics():
    x = Tensor(r(4, 16) * 3 + 7)
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-6)


def test_gelu_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14)


def test_cross_entropy_matches_manual():
    logits = r(4, 6)
    labels = np.array([0, 5, 2, 2])
    lse = np.log(np.exp(logits).sum(axis=1))
    np.testing.assert_allclose(T.cross_entropy(Tensor(logits), labels).data,
                               lse - logits[np.arange(4), labels])


def test_matmul_matches_numpy():
    a, b = r(3, 2, 4), r(4, 5)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


def test_shared_input_accumulates():
    (g,) = tape_grads(lambda x: T.sum(x * x + x), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -3.0])


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_backward_rejects_foreign_loss_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as other:
        z = T.sum(x * x)
    with Tape() as tape:
        y = T.sum(x * 3.0)
    with pytest.raises(TapeError):
        tape.backward(z)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    other.backward(z)
    np.testing.assert_allclose(x.grad, 3.0 + 2.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_gradients_deterministic():
    x = r(5, 4)
    g1 = tape_grads(lambda t: T.sum(T.gelu(T.softmax(t) @ T.transpose(t))), x)[0]
    g2 = tape_grads(lambda t: T.sum(T.gelu(T.softmax(t) @ T.transpose(t))), x)[0]
    assert np.array_equal(g1, g2)
