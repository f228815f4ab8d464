"""Central finite-difference gradient oracle shared by the autodiff tests."""

import numpy as np


def fd_gradient(fn, arrays, wrt, eps=1e-6):
    """Numeric d fn(arrays)/d arrays[wrt] by central differences.

    `fn` maps a list of numpy arrays to a scalar float and must not mutate
    its inputs.
    """
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[wrt])
    flat = g.reshape(-1)
    target = base[wrt].reshape(-1)
    for j in range(target.size):
        orig = target[j]
        target[j] = orig + eps
        hi = fn(base)
        target[j] = orig - eps
        lo = fn(base)
        target[j] = orig
        flat[j] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return np.linalg.norm(a - b) / denom
