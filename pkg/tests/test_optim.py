import numpy as np
import pytest

from dfqvit.optim import AdamState, adam_step
from dfqvit.tensor import ShapeError


def test_first_step_moves_each_coordinate_by_lr():
    # bias correction makes the first update lr * sign(g)
    p = np.array([1.0, -2.0, 3.0])
    adam_step([p], [np.array([0.5, -4.0, 1e-3])], AdamState(), lr=0.1)
    np.testing.assert_allclose(p, [0.9, -1.9, 2.9], atol=1e-6)


def test_matches_reference_recurrence():
    rng = np.random.default_rng(1)
    p = rng.normal(size=5)
    ref = p.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState()
    for t in range(1, 21):
        g = rng.normal(size=5)
        adam_step([p], [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)
    assert state.step == 20


def test_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    state = AdamState.like([p])
    for _ in range(2000):
        adam_step([p], [2 * p], state, lr=0.05)
    np.testing.assert_allclose(p, 0.0, atol=1e-3)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState(), lr=0.1)
