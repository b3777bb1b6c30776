"""Shared test utilities: central finite differences for gradient oracles."""

import numpy as np

from mtsr import tensor as T


def scalarize(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Project an op output to a scalar with fixed weights."""
    return T.sum_(T.mul(out, T.Tensor(weights, dtype=out.dtype)))


def numeric_grads(build, arrays, h=1e-5):
    """Central finite differences of build(*arrays) w.r.t. every array entry.

    build receives plain float64 arrays wrapped as non-tracking Tensors and
    must return a scalar Tensor.
    """
    def evaluate():
        tensors = [T.Tensor(a, dtype=np.float64) for a in arrays]
        return float(build(*tensors).data.reshape(()))

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_a.size):
            orig = flat_a[j]
            flat_a[j] = orig + h
            fp = evaluate()
            flat_a[j] = orig - h
            fm = evaluate()
            flat_a[j] = orig
            flat_g[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays, h=1e-5, rtol=1e-4):
    """Max normalized gradient error of reverse mode vs central differences.

    Returns the worst relative error over all inputs; asserts it <= rtol.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grads(build, arrays, h=h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        scale = max(np.abs(gn).max(), np.abs(ga).max(), 1e-8)
        worst = max(worst, np.abs(ga - gn).max() / scale)
    assert worst <= rtol, f"gradient mismatch: rel err {worst:.3e} > {rtol:.0e}"
    return worst
