"""Central-difference gradient checking utilities.

Used by the test suite and the ``divemb gradcheck`` command to verify
every analytic gradient path against an independent numerical oracle.
"""

from __future__ import annotations

import numpy as np


def numerical_grad(f, arrays, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. each array.

    ``f`` takes the list of arrays and returns a float.  The arrays are
    perturbed in place and restored, so ``f`` must not retain references
    across calls.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Relative L2 error between two gradient collections."""
    if isinstance(analytic, np.ndarray):
        analytic, numeric = [analytic], [numeric]
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
