"""Batched adaptive Dormand-Prince 4(5) integrator for autonomous systems.

Each batch element carries its own time, step size and end time, and its
step-size controller sees only its own local error.  Results are therefore
identical whether elements are integrated one at a time or in any batch
partition, which is what makes sweep parallelisation reproducible.
"""

import numpy as np

from .errors import IntegrationError

# Dormand-Prince coefficients (DOPRI5, FSAL).
_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_ERR = np.array([
    71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_MAX_STEPS = 20000


def integrate_adaptive(rhs, y0, t_end, rtol=1e-8, atol=1e-12):
    """Integrate dy/dt = rhs(y) from t=0 to per-element t_end.

    Parameters
    ----------
    rhs : callable
        Maps a (n, dim) state array to its (n, dim) derivative.
    y0 : ndarray, shape (n, dim)
        Initial states.
    t_end : ndarray, shape (n,)
        Per-element integration horizon (>= 0; elements with 0 are returned
        unchanged).
    rtol, atol : float
        Local error tolerances.

    Returns
    -------
    ndarray, shape (n, dim): states at t_end.
    """
    y = np.array(y0, dtype=np.float64, copy=True)
    n, dim = y.shape
    t_end = np.asarray(t_end, dtype=np.float64)
    if t_end.shape != (n,):
        raise ValueError("t_end must have one entry per batch element")
    if np.any(t_end < 0.0):
        raise ValueError("t_end must be nonnegative")

    t = np.zeros(n)
    h = np.maximum(t_end * 1e-2, 1e-14)
    active = t_end > 0.0
    k1 = np.empty_like(y)
    if active.any():
        k1[active] = rhs(y[active])

    for _ in range(_MAX_STEPS):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        ya = y[idx]
        ha = np.minimum(h[idx], t_end[idx] - t[idx])
        hc = ha[:, None]

        k = [k1[idx]]
        for row in _A[:-1]:
            incr = sum(c * k[j] for j, c in enumerate(row))
            k.append(rhs(ya + hc * incr))
        incr5 = sum(c * k[j] for j, c in enumerate(_A[-1]))
        y5 = ya + hc * incr5
        k.append(rhs(y5))  # FSAL stage, also k1 of the next step

        err_vec = sum(_ERR[j] * k[j] for j in range(7))
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(y5))
        err = np.sqrt(np.mean((hc * err_vec / scale) ** 2, axis=1))

        accept = err <= 1.0
        acc_idx = idx[accept]
        if acc_idx.size:
            y[acc_idx] = y5[accept]
            t[acc_idx] = t[acc_idx] + ha[accept]
            k1[acc_idx] = k[-1][accept]

        with np.errstate(divide="ignore"):
            factor = _SAFETY * err ** -0.2
        factor = np.clip(np.where(err == 0.0, _MAX_FACTOR, factor),
                         _MIN_FACTOR, _MAX_FACTOR)
        h[idx] = ha * factor

        done = np.zeros(n, dtype=bool)
        done[acc_idx] = t[acc_idx] >= t_end[acc_idx] * (1.0 - 1e-15)
        active &= ~done

        tiny = active & (h < 1e-15 * np.maximum(t_end, 1.0))
        if tiny.any():
            i = int(np.nonzero(tiny)[0][0])
            raise IntegrationError(
                f"step size underflow at t={t[i]:.6g} of {t_end[i]:.6g}",
                last_state=(t[i], y[i].copy()),
            )
    else:
        i = int(np.nonzero(active)[0][0])
        raise IntegrationError(
            f"step budget exhausted at t={t[i]:.6g} of {t_end[i]:.6g}",
            last_state=(t[i], y[i].copy()),
        )
    return y
