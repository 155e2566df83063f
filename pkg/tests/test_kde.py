import numpy as np
import pytest

from dfqvit import kde
from dfqvit import tensor as T
from dfqvit.tensor import Tape, Tensor
from helpers import numeric_grad


def gaussian_entropy(var):
    return 0.5 * np.log(2 * np.pi * np.e * var)


def test_entropy_of_normal_samples_matches_oracle():
    x = np.random.default_rng(0).normal(size=500)
    h = kde.silverman_bandwidth(x)
    H = kde.differential_entropy(x, h)
    # the KDE of N(0,1) data is close to N(0, 1 + h^2)
    assert abs(H - gaussian_entropy(1 + h * h)) < 0.05


def test_density_integrates_to_one():
    x = np.random.default_rng(1).normal(size=300) * 2 + 1
    h = kde.silverman_bandwidth(x)
    grid = kde.entropy_grid(x, h)
    assert abs(np.trapezoid(kde.kde_density(grid, x, h), grid) - 1.0) < 1e-3


def test_single_center_entropy_is_kernel_entropy():
    # the grid stops 4 bandwidths out, which drops about 5e-4 nats of tail
    h = 0.3
    assert abs(kde.differential_entropy([0.7], h) - gaussian_entropy(h * h)) < 1e-3


def test_entropy_scaling_law():
    # scaling centers and bandwidth by s shifts entropy by log(s) times the grid mass
    x = np.random.default_rng(2).uniform(size=200)
    h = kde.silverman_bandwidth(x)
    grid = kde.entropy_grid(x, h)
    mass = np.trapezoid(kde.kde_density(grid, x, h), grid)
    H1 = kde.differential_entropy(x, h)
    H3 = kde.differential_entropy(3 * x, 3 * h)
    assert abs(H3 - H1 - np.log(3) * mass) < 1e-10
    assert abs(H3 - H1 - np.log(3)) < 1e-4


def test_bandwidth_floor_and_formula():
    assert kde.silverman_bandwidth(np.ones(10)) == kde.BANDWIDTH_FLOOR
    x = np.random.default_rng(3).normal(size=64)
    assert kde.silverman_bandwidth(x) == pytest.approx(1.06 * x.std(ddof=1) * 64 ** -0.2)


def test_errors():
    with pytest.raises(ValueError):
        kde.kde_density([0.0], [], 1.0)
    with pytest.raises(ValueError):
        kde.kde_density([0.0], [1.0], 0.0)


def test_fused_op_matches_dense_reference():
    x = np.random.default_rng(4).uniform(-1, 1, size=(3, 150))
    h = np.array([kde.silverman_bandwidth(row) for row in x])
    fused = kde.kde_entropy(Tensor(x), Tensor(h)).data
    dense = [kde.differential_entropy(row, hh) for row, hh in zip(x, h)]
    np.testing.assert_allclose(fused, dense, rtol=1e-10, atol=1e-12)


def test_fused_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(2, 40))
    h = np.array([0.15, 0.3])
    weights = np.array([1.0, -0.7])

    xt, ht = Tensor(x, requires_grad=True), Tensor(h, requires_grad=True)
    with Tape() as tape:
        total = T.sum(kde.kde_entropy(xt, ht) * Tensor(weights))
    tape.backward(total)

    fx = lambda v: float((kde.kde_entropy(Tensor(v), Tensor(h)).data * weights).sum())
    fh = lambda v: float((kde.kde_entropy(Tensor(x), Tensor(v)).data * weights).sum())
    np.testing.assert_allclose(xt.grad, numeric_grad(fx, x, 1e-6), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(ht.grad, numeric_grad(fh, h, 1e-6), rtol=1e-5, atol=1e-7)


def test_silverman_tensor_gradient():
    x = np.random.default_rng(6).normal(size=(2, 30))
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        total = T.sum(kde.silverman(xt))
    tape.backward(total)
    f = lambda v: float(sum(kde.silverman_bandwidth(row) for row in v))
    np.testing.assert_allclose(xt.grad, numeric_grad(f, x), rtol=1e-6, atol=1e-9)
