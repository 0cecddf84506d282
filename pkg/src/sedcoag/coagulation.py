"""Conservative sectional coagulation operator on the geometric volume grid.

Pair products v_i + v_j are redistributed onto the two bracketing bin
pivots with weights that preserve particle number and mass exactly (the
two-moment fixed-pivot scheme); products past the largest pivot are
credited to the overflow ledger rather than lost.
"""

from dataclasses import dataclass

import numpy as np

from .errors import StepRejected
from .kernels import eval_kernel
from .numerics import row_weighted_sum

_POPULATED_REL = 1e-16  # cells below this share of the column peak are dust


@dataclass
class CoagTables:
    """Precomputed kernel values and pair-redistribution weights.

    ``lo``/``w_lo`` give the lower bracketing pivot and its number weight
    for every ordered bin pair; pairs whose sum exceeds the largest pivot
    carry their pair mass in ``overflow_mass_flat`` instead.
    """

    kernel_values: np.ndarray      # (nv, nv)
    lo: np.ndarray                 # (nv, nv) int, -1 where overflow
    w_lo: np.ndarray               # (nv, nv)
    idx_in: np.ndarray             # flat indices of in-range pairs
    lo_in: np.ndarray
    w_in: np.ndarray
    idx_ovf: np.ndarray            # flat indices of overflowing pairs
    mass_ovf: np.ndarray           # pair mass v_i + v_j for those
    nv: int


def build_tables(g, k):
    """Kernel matrix and fixed-pivot weights for a grid/kernel pair."""
    pivots = g.v_centers
    nv = g.nv
    vi, vj = np.meshgrid(pivots, pivots, indexing="ij")
    kernel_values = np.asarray(eval_kernel(k, vi, vj), dtype=float)
    s = vi + vj
    lo = np.searchsorted(pivots, s, side="right") - 1
    overflow = lo >= nv - 1
    exact_top = np.isclose(s, pivots[-1], rtol=1e-12, atol=0.0)
    overflow &= ~exact_top
    lo = np.clip(lo, 0, nv - 2)
    span = pivots[lo + 1] - pivots[lo]
    w_lo = np.where(overflow, 0.0, (pivots[lo + 1] - s) / span)
    w_lo = np.clip(w_lo, 0.0, 1.0)
    lo_flat = np.where(overflow, -1, lo).ravel()
    flat = np.arange(nv * nv)
    in_mask = ~overflow.ravel()
    return CoagTables(
        kernel_values=kernel_values,
        lo=np.where(overflow, -1, lo),
        w_lo=w_lo,
        idx_in=flat[in_mask],
        lo_in=lo_flat[in_mask],
        w_in=w_lo.ravel()[in_mask],
        idx_ovf=flat[~in_mask],
        mass_ovf=s.ravel()[~in_mask],
        nv=nv,
    )


def loss_vector(tables, n_col):
    """Collision loss rate a_i = sum_j K_ij n_j for one column (n = f dv)."""
    return row_weighted_sum(tables.kernel_values, n_col)


def batched_loss(tables, n_all):
    """Loss rates for all columns at once; deterministic reduction order."""
    return np.add.reduce(tables.kernel_values[None, :, :]
                         * n_all[:, None, :], axis=2)


def batched_rates(tables, n_new_all, n_old_all):
    """Gain numbers and overflow mass rates for all columns at once.

    Pair intensity K_ij n_new_i n_old_j with the 1/2 pairing factor;
    scatter to the bracketing pivots via one offset bincount over the
    stacked columns (sequential, order-fixed, thread-independent).
    """
    nx, nv = n_new_all.shape
    P = (tables.kernel_values[None, :, :]
         * n_new_all[:, :, None] * n_old_all[:, None, :])
    flat = P.reshape(nx, nv * nv)
    pin = 0.5 * flat[:, tables.idx_in]
    offsets = (np.arange(nx) * nv)[:, None]
    lo_idx = (offsets + tables.lo_in[None, :]).ravel()
    gain = np.bincount(lo_idx, weights=(pin * tables.w_in[None, :]).ravel(),
                       minlength=nx * nv)
    gain += np.bincount(lo_idx + 1,
                        weights=(pin * (1.0 - tables.w_in[None, :])).ravel(),
                        minlength=nx * nv)
    ovf = 0.5 * np.add.reduce(flat[:, tables.idx_ovf]
                              * tables.mass_ovf[None, :], axis=1)
    return gain.reshape(nx, nv), ovf


def loss_rate(f, tables, x_index, v_index):
    """Loss-integral quadrature sum_j K(v_i, v_j) f(x, v_j) dv_j."""
    n_col = f.values[x_index] * f.grid.dv
    return float(np.add.reduce(tables.kernel_values[v_index] * n_col))


def column_rates(tables, n_new, n_old):
    """Gain numbers, loss rates and overflow mass rate for one column.

    The pair intensity is K_ij * n_new_i * n_old_j over ordered pairs with
    the 1/2 pairing factor, which reduces to the symmetric operator when
    n_new is n_old and to the linearized one inside the mild iteration.

    Returns (gain_numbers_per_bin, loss_rate_per_bin_of_new, overflow_mass_rate).
    """
    P = tables.kernel_values * np.multiply.outer(n_new, n_old)
    flat = P.ravel()
    pin = 0.5 * flat[tables.idx_in]
    gain = np.bincount(tables.lo_in, weights=pin * tables.w_in,
                       minlength=tables.nv)
    gain_hi = np.bincount(tables.lo_in + 1, weights=pin * (1.0 - tables.w_in),
                          minlength=tables.nv)
    gain = gain + gain_hi
    ovf = 0.5 * float(np.add.reduce(flat[tables.idx_ovf] * tables.mass_ovf))
    a_new = loss_vector(tables, n_old)
    return gain, a_new, ovf


def stability_bound(f, tables, populated_rel=_POPULATED_REL):
    """Largest explicit-Euler step keeping populated cells nonnegative.

    Cells whose number content is below ``populated_rel`` of their column
    peak are float dust; they are excluded from the bound (and clamped to
    zero if a step drives them negative).
    """
    n_all = f.values * f.grid.dv[None, :]
    peaks = n_all.max(axis=1, keepdims=True)
    pop = n_all > populated_rel * peaks
    if not pop.any():
        return np.inf
    a_all = batched_loss(tables, n_all)
    worst = float(a_all[pop].max())
    return np.inf if worst == 0.0 else 0.5 / worst


def apply_coagulation(f, tables, dt, populated_rel=_POPULATED_REL,
                      precomputed_bound=None):
    """One explicit Euler coagulation step over every spatial column.

    Enforces the positivity bound dt <= 0.5 / max_populated(a[f]); mass
    leaving past the largest pivot increments the overflow ledger, and
    any dust cell clamped back to zero is tallied in ``clamp_mass``.
    ``precomputed_bound`` skips recomputing the bound when the caller just
    evaluated it for step-size selection.
    """
    if dt <= 0.0:
        raise StepRejected("dt must be positive", bound=np.inf)
    bound = (stability_bound(f, tables, populated_rel=populated_rel)
             if precomputed_bound is None else precomputed_bound)
    if dt > bound * (1.0 + 1e-12):
        raise StepRejected(
            f"dt = {dt:.6g} exceeds the coagulation stability bound "
            f"{bound:.6g}", bound=bound)
    g = f.grid
    n_all = f.values * g.dv[None, :]
    gain, ovf = batched_rates(tables, n_all, n_all)
    a_all = batched_loss(tables, n_all)
    n_new = n_all + dt * (gain - a_all * n_all)
    clamp_total = 0.0
    negative = n_new < 0.0
    if negative.any():
        clamp_total = -float(np.add.reduce(
            (n_new * g.v_centers[None, :])[negative])) * g.dx
        n_new = np.maximum(n_new, 0.0)
    out = f.copy()
    out.values = n_new / g.dv[None, :]
    out.time = f.time + dt
    out.overflow_mass = f.overflow_mass + dt * float(np.add.reduce(ovf)) * g.dx
    out.clamp_mass = f.clamp_mass + clamp_total
    return out
