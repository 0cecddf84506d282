"""Conserved-quantity tracking, envelope fits, gelation and contraction."""

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import pairwise_sum_2d


def total_mass(f):
    """Total mass sum_cells v_c f dv dx with deterministic pairwise sums."""
    g = f.grid
    return pairwise_sum_2d(f.values * (g.v_centers * g.dv)[None, :]) * g.dx


def total_number(f):
    g = f.grid
    return pairwise_sum_2d(f.values * g.dv[None, :]) * g.dx


@dataclass
class MomentSeries:
    """Per-time conserved quantities and ledgers of a run."""

    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    number: list = field(default_factory=list)
    overflow: list = field(default_factory=list)
    boundary: list = field(default_factory=list)
    clamp: list = field(default_factory=list)

    def append_state(self, f):
        self.times.append(f.time)
        self.mass.append(total_mass(f))
        self.number.append(total_number(f))
        self.overflow.append(f.overflow_mass)
        self.boundary.append(f.boundary_flux)
        self.clamp.append(f.clamp_mass)

    def ledger_defects(self):
        """Relative defect of mass + overflow + boundary = mass(0), per time."""
        m0 = self.mass[0]
        return [
            (self.mass[i] + self.overflow[i] + self.boundary[i] - m0) / m0
            for i in range(len(self.times))
        ]

    def rows(self):
        for i in range(len(self.times)):
            yield {
                "time": self.times[i], "mass": self.mass[i],
                "number": self.number[i], "overflow": self.overflow[i],
                "boundary_flux": self.boundary[i], "clamp_mass": self.clamp[i],
            }


def series_from_fields(fields):
    s = MomentSeries()
    for f in fields:
        s.append_state(f)
    return s


def decay_envelope_check(f, c, d):
    """Fit the smallest C with f <= C / (1 + |x|^m + v^p) cellwise.

    Returns the fitted amplitude, the list of cells exceeding the provided
    amplitude ``c`` (worst first, capped at 20), and the worst cell.
    """
    g = f.grid
    xg, vg = np.meshgrid(g.x_centers, g.v_centers, indexing="ij")
    denom = 1.0 + np.abs(xg) ** d.m + vg ** d.p
    products = f.values * denom
    fitted = float(products.max())
    worst_cell = np.unravel_index(int(products.argmax()), products.shape)
    over = products > c
    flagged = []
    if over.any():
        idx = np.argsort(products[over])[::-1][:20]
        cells = np.argwhere(over)[idx]
        flagged = [tuple(int(i) for i in cell) for cell in cells]
    return {
        "fitted_C": fitted,
        "flagged_cells": flagged,
        "worst_cell": tuple(int(i) for i in worst_cell),
        "within": fitted <= c,
    }


def gelation_detector(series, threshold, credit=("overflow", "boundary")):
    """First time the credited mass loss fraction exceeds ``threshold``.

    loss(t) = (mass(0) - mass(t) - credited ledgers(t)) / mass(0).  For
    truncated-kernel gelation proxies the overflow ledger is deliberately
    NOT credited, so mass driven past the cutoff counts as gel.  Returns
    the onset time or None.
    """
    times = series.times
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("time grid must be monotone")
    m0 = series.mass[0]
    for i, t in enumerate(times):
        credited = 0.0
        if "overflow" in credit:
            credited += series.overflow[i]
        if "boundary" in credit:
            credited += series.boundary[i]
        loss = (m0 - series.mass[i] - credited) / m0
        if loss > threshold:
            return t
    return None


def contraction_estimator(diffs):
    """Tail contraction ratio of successive iterate differences.

    ``diffs`` is a list of IterateDiff-like objects (or floats).  The last
    max(3, ceil(n/2)) entries form the fit window: the slope of
    log(sup_diff) against the iteration index gives the asymptotic ratio.
    A zero difference anywhere in the tail reports ratio 0 exactly.
    """
    values = [getattr(x, "sup_diff", x) for x in diffs]
    if len(values) < 3:
        return {"ratio": None, "fit_quality": 0.0,
                "insufficient_data": True, "n_used": len(values)}
    n_tail = max(3, math.ceil(len(values) / 2))
    tail = values[-n_tail:]
    if min(tail) == 0.0:
        return {"ratio": 0.0, "fit_quality": 1.0,
                "insufficient_data": False, "n_used": n_tail}
    idx = np.arange(len(tail), dtype=float)
    ly = np.log(tail)
    idx_c = idx - idx.mean()
    ly_c = ly - ly.mean()
    slope = float(np.dot(idx_c, ly_c) / np.dot(idx_c, idx_c))
    resid = ly_c - slope * idx_c
    ss_tot = float(np.dot(ly_c, ly_c))
    r2 = 1.0 - float(np.dot(resid, resid)) / ss_tot if ss_tot > 0 else 1.0
    return {"ratio": float(math.exp(slope)), "fit_quality": r2,
            "insufficient_data": False, "n_used": n_tail}
