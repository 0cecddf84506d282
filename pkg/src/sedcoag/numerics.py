"""Small shared numerical helpers: reproducible reductions and ramps."""

import numpy as np

def _pairwise_tree(a, axis):
    """Halving reduction tree along ``axis``; odd tails carried unchanged.

    The operation order depends only on the array shape, never on thread
    count or chunking, so results are bit-reproducible.
    """
    while a.shape[axis] > 1:
        n = a.shape[axis]
        pairs = 2 * (n // 2)
        idx_even = [slice(None)] * a.ndim
        idx_odd = [slice(None)] * a.ndim
        idx_even[axis] = slice(0, pairs, 2)
        idx_odd[axis] = slice(1, pairs, 2)
        merged = a[tuple(idx_even)] + a[tuple(idx_odd)]
        if n % 2:
            tail = [slice(None)] * a.ndim
            tail[axis] = slice(n - 1, n)
            merged = np.concatenate([merged, a[tuple(tail)]], axis=axis)
        a = merged
    return a


def pairwise_sum(a):
    """Sum a 1-D array with a fixed pairwise reduction tree."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(_pairwise_tree(a, 0)[0])


def pairwise_sum_2d(a):
    """Pairwise sum of a 2-D array, reducing rows first, then the row sums."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    rows = _pairwise_tree(a, 1)[:, 0]
    return float(_pairwise_tree(rows, 0)[0])


def smoothstep(x):
    """Cubic smoothstep: 0 for x<=0, 1 for x>=1, 3x^2-2x^3 between (C1)."""
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def smoothstep_derivative(x):
    """Derivative of smoothstep with respect to x (0 outside [0,1])."""
    inside = (x > 0.0) & (x < 1.0)
    xc = np.clip(x, 0.0, 1.0)
    return np.where(inside, 6.0 * xc * (1.0 - xc), 0.0)


def row_weighted_sum(matrix, weights):
    """Deterministic matrix @ weights without BLAS (fixed reduction order)."""
    return np.add.reduce(matrix * weights[None, :], axis=1)


def centered_difference(fn, x, h, richardson=True):
    """Centered finite difference of a scalar->scalar (or vectorized) fn.

    With richardson=True combines steps h and h/2 for a fourth-order
    estimate; fn must accept the shifted abscissae.
    """
    d_h = (fn(x + h) - fn(x - h)) / (2.0 * h)
    if not richardson:
        return d_h
    d_h2 = (fn(x + 0.5 * h) - fn(x - 0.5 * h)) / h
    return (4.0 * d_h2 - d_h) / 3.0


def log_slope(xs, ys):
    """Least-squares slope of log(ys) vs log(xs) and its R^2."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    lx_c = lx - lx.mean()
    ly_c = ly - ly.mean()
    denom = float(np.dot(lx_c, lx_c))
    if denom == 0.0:
        return 0.0, 0.0
    slope = float(np.dot(lx_c, ly_c)) / denom
    resid = ly_c - slope * lx_c
    ss_tot = float(np.dot(ly_c, ly_c))
    r2 = 1.0 - float(np.dot(resid, resid)) / ss_tot if ss_tot > 0 else 1.0
    return slope, r2
