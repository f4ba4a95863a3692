"""Shared test oracles.

The finite-difference helpers here are deliberately independent of the
autodiff engine: they only ever call a black-box scalar function, so they can
referee the engine's gradients without sharing code with them.
"""

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each array.

    ``f`` must treat its inputs as read-only; entries are perturbed one at a
    time, so cost is 2 * total element count evaluations.
    """
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[idx].reshape(-1)[j] += h
            hi = f(bumped)
            bumped = [a.copy() for a in arrays]
            bumped[idx].reshape(-1)[j] -= h
            lo = f(bumped)
            flat[j] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def rel_error(approx, exact):
    """Relative error as a norm ratio: ||a - b|| / max(||a|| + ||b||, tiny).

    The norm-ratio form avoids manufacturing huge "errors" out of
    finite-difference noise on exactly-zero entries.
    """
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    num = np.linalg.norm((approx - exact).reshape(-1))
    den = np.linalg.norm(approx.reshape(-1)) + np.linalg.norm(exact.reshape(-1))
    return float(num / max(den, 1e-12))
