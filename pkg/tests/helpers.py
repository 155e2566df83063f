import numpy as np

from dfqvit.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def tape_grads(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` computed on a tape."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


def check_grads(fn, *arrays, rtol=1e-6, atol=1e-8, eps=1e-6):
    analytic = tape_grads(fn, *arrays)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(x) for x in arrays]
            args[k] = Tensor(v)
            return float(fn(*args).data)
        np.testing.assert_allclose(analytic[k], numeric_grad(f, a, eps), rtol=rtol, atol=atol)
