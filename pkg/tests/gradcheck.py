"""Central finite-difference oracle, independent of the tape."""
import numpy as np


def numeric_grad(f, arrays, h=1e-4):
    """d f(*arrays) / d arrays by central differences; f returns a float."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            up = f(*arrays)
            a[idx] = orig - h
            down = f(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    scale = np.maximum(np.abs(analytic).max(), np.abs(numeric).max())
    return float(np.abs(analytic - numeric).max() / max(scale, 1e-8))
