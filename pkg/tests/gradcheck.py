"""Central-difference gradient oracle shared by the test modules."""

import numpy as np

from vizcap.tensor import Tensor


def numeric_grad(f, arrays, k, h=1e-6):
    """d f / d arrays[k] by central differences; ``f`` maps arrays to a float."""
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(arrays)
        x[i] = old - h
        fm = f(arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / den)


def check(op, arrays, rng, wrt=None):
    """Max relative error of ``op`` gradients against finite differences.

    ``op`` takes Tensors and returns a Tensor of any shape; it is contracted
    with a fixed random weight so every output element matters.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays]).data
    weight = rng.normal(size=probe.shape)

    def scalar(arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weight).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * Tensor(weight)).sum().backward()
    worst = 0.0
    for k in wrt:
        num = numeric_grad(scalar, arrays, k)
        worst = max(worst, rel_error(ts[k].grad, num))
    return worst
