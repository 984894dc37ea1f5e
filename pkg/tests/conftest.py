import numpy as np
import pytest

from q2l import numcore as nc


@pytest.fixture
def f64():
    """Run the test body with 64-bit tensors and finiteness assertions."""
    with nc.default_dtype(np.float64), nc.debug_mode(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arrays, h=1e-4):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = fn(*arrays)
            a[i] = old - h
            down = fn(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grad(build, arrays, rtol=1e-5, atol=1e-8, h=1e-4):
    """Compare autodiff gradients of ``sum(weights * build(*tensors))`` with
    finite differences; random projection weights make every output matter."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_rng = np.random.default_rng(99)
    with nc.default_dtype(np.float64):
        tensors = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        weights = probe_rng.normal(size=out.shape)
        loss = nc.sum(out * weights)
        nc.backward(loss)

        def scalar(*arrs):
            with nc.no_grad():
                return float(np.sum(build(*[nc.Tensor(a) for a in arrs]).data * weights))

        expected = numeric_grad(scalar, [a.copy() for a in arrays], h=h)
    for t, e in zip(tensors, expected):
        np.testing.assert_allclose(t.grad, e, rtol=rtol, atol=atol)
