"""Time evolution drivers.

Modes
-----
* ``mild_picard``          -- outer Picard iteration on the linearized
  equation, each iterate advanced slab by slab in Duhamel form with an
  exponential survival factor and a lagged (Jacobi) gain term.
* ``operator_split``       -- Strang splitting: half transport, one
  conservative coagulation stage (two Euler half-stages combined Heun
  style for second order), half transport.
* ``homogeneous``          -- coagulation only, single spatial cell.
* ``approximate_transport``-- the drift-approximated linear model solved
  by first-order upwinding in v and conservative shifts in x.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .characteristics import CharParams, xi_cutoff
from .coagulation import (apply_coagulation, batched_loss, batched_rates,
                          build_tables, stability_bound)
from .diagnostics import MomentSeries, series_from_fields
from .errors import (ConfigurationError, HorizonError, IterationError,
                     StepRejected)
from .grid import GridSpec, InitialData, StateField, make_initial
from .kernels import KernelSpec

logger = logging.getLogger(__name__)

_MODES = ("mild_picard", "operator_split", "homogeneous",
          "approximate_transport")
_UNVERIFIED_HORIZON = 0.05  # heuristic stand-in until verification has run


@dataclass
class RunConfig:
    """Solver settings; ``verified_horizon`` is set once the supersolution
    verification has produced a horizon, otherwise mild runs are capped at
    a heuristic default."""

    grid: GridSpec
    kernel: KernelSpec
    initial: InitialData
    T: float = 0.02
    dt: float = 1e-3
    mode: str = "mild_picard"
    picard_tol: float = 1e-10
    picard_max_iters: int = 25
    verified_horizon: Optional[float] = None
    char_L: float = 1.0
    char_R: float = 1.0
    n_outputs: int = 5

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigurationError(
                f"solver.mode must be one of {_MODES}, got {self.mode!r}")
        if self.T <= 0.0 or self.dt <= 0.0:
            raise ConfigurationError("T and dt must be positive")
        if self.picard_tol <= 0.0:
            raise ConfigurationError("picard_tol must be positive")

    @property
    def n_steps(self):
        return max(1, int(round(self.T / self.dt)))

    @property
    def step(self):
        return self.T / self.n_steps


@dataclass
class IterateDiff:
    """Sup-norm distance between successive Picard iterates."""

    n: int
    sup_diff: float
    ratio: Optional[float] = None


@dataclass
class Solution:
    """Trajectory plus run diagnostics."""

    config: RunConfig
    times: list
    fields: list
    iterate_diffs: list = field(default_factory=list)
    series: MomentSeries = None
    info: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.fields[-1]


# ---------------------------------------------------------------------------
# Transport.

def shift_columns(values, grid, alpha, dt):
    """Shift every volume column right by v_c^alpha dt (conservative).

    Linear donor redistribution: exact for integer-cell shifts, preserves
    per-bin column sums up to the returned outflow.  Returns
    (new_values, out_number_per_bin).
    """
    nx, nv = values.shape
    out = np.zeros_like(values)
    outflow = np.zeros(nv)
    shifts = grid.v_centers ** alpha * dt / grid.dx
    for j in range(nv):
        col = values[:, j]
        k = int(math.floor(shifts[j]))
        sigma = shifts[j] - k
        hi = k + 1
        if k < nx:
            out[k:, j] += (1.0 - sigma) * col[:nx - k]
            outflow[j] += (1.0 - sigma) * np.add.reduce(col[nx - k:])
        else:
            outflow[j] += (1.0 - sigma) * np.add.reduce(col)
        if hi < nx:
            out[hi:, j] += sigma * col[:nx - hi]
            outflow[j] += sigma * np.add.reduce(col[nx - hi:])
        else:
            outflow[j] += sigma * np.add.reduce(col)
    return out, outflow


def transport_step(f, dt):
    """Advance f by free transport over dt; outflow goes to the ledger."""
    if dt <= 0.0:
        raise ConfigurationError("transport dt must be positive")
    g = f.grid
    new_values, outflow = shift_columns(f.values, g, f_alpha(f), dt)
    out = f.copy()
    out.values = new_values
    out.time = f.time + dt
    out.boundary_flux = f.boundary_flux + float(
        np.add.reduce(outflow * g.v_centers * g.dv)) * g.dx
    return out


def f_alpha(f):
    """Transport exponent attached to a field (set at creation)."""
    return getattr(f, "_alpha", 2.0 / 3.0)


def _tag_alpha(f, alpha):
    f._alpha = alpha
    return f


# ---------------------------------------------------------------------------
# Mild Picard iteration.

def _loss_field(state, tables):
    """Collision frequency a[f](x, v) on the grid (one row per column)."""
    return batched_loss(tables, state.values * state.grid.dv[None, :])


def _gain_field(new_state, old_state, tables):
    """Linearized gain (new against old) per column.

    Returns (gain density per bin, overflow mass rate per column).
    """
    g = new_state.grid
    gnum, ovf = batched_rates(tables, new_state.values * g.dv[None, :],
                              old_state.values * g.dv[None, :])
    return gnum / g.dv[None, :], ovf


def picard_iterate(traj_prev, f_in, cfg, tables, inner_tol=None):
    """One outer Picard sweep: solve the linearized equation in mild form.

    ``traj_prev`` holds the previous iterate at the slab times.  Each slab
    advances with the survival factor exp(-int a) along the foot ray
    (trapezoidal in time) and the gain integral with the slab-end value
    lagged until its own sup change drops below the inner tolerance.
    """
    g = cfg.grid
    dt = cfg.step
    alpha = cfg.initial.alpha
    inner_tol = cfg.picard_tol / 10.0 if inner_tol is None else inner_tol
    traj = [f_in.copy()]
    _tag_alpha(traj[0], alpha)
    inner_sweeps = []
    for k in range(cfg.n_steps):
        prev0 = traj_prev[k]
        prev1 = traj_prev[k + 1]
        cur = traj[k]
        a0 = _loss_field(prev0, tables)
        a1 = _loss_field(prev1, tables)
        a0_foot, _ = shift_columns(a0, g, alpha, dt)
        tf, out_num = shift_columns(cur.values, g, alpha, dt)
        survival = np.exp(-0.5 * dt * (a0_foot + a1))

        gain0, ovf0 = _gain_field(cur, prev0, tables)
        gain0_foot, gain_out = shift_columns(gain0, g, alpha, dt)
        base = survival * (tf + 0.5 * dt * gain0_foot)

        guess = cur.copy()
        guess.values = base
        guess.time = cur.time + dt
        ovf1 = np.zeros(g.nx)
        sweeps = 0
        for sweeps in range(1, 51):
            gain1, ovf1 = _gain_field(guess, prev1, tables)
            new_values = base + 0.5 * dt * gain1
            change = float(np.max(np.abs(new_values - guess.values)))
            guess.values = new_values
            if change < inner_tol:
                break
        else:
            raise IterationError(
                f"inner gain iteration failed to converge in 50 sweeps at "
                f"slab {k} (last change {change:.3g})")
        inner_sweeps.append(sweeps)

        ovf_rate = 0.5 * (float(np.add.reduce(ovf0)) + float(np.add.reduce(ovf1)))
        out_mass = float(np.add.reduce(out_num * g.v_centers * g.dv)) * g.dx
        gain_out_mass = 0.5 * dt * float(
            np.add.reduce(gain_out * g.v_centers * g.dv)) * g.dx
        guess.overflow_mass = cur.overflow_mass + dt * ovf_rate * g.dx
        guess.boundary_flux = cur.boundary_flux + out_mass + gain_out_mass
        guess.clamp_mass = cur.clamp_mass
        _tag_alpha(guess, alpha)
        traj.append(guess)
    return traj, inner_sweeps


def _transport_trajectory(f_in, cfg):
    """Pure transport of the initial datum at the slab times."""
    traj = [_tag_alpha(f_in.copy(), cfg.initial.alpha)]
    for _ in range(cfg.n_steps):
        traj.append(transport_step(traj[-1], cfg.step))
    return traj


def _sup_distance(traj_a, traj_b):
    return max(float(np.max(np.abs(a.values - b.values)))
               for a, b in zip(traj_a, traj_b))


def run_mild_solver(cfg):
    """Iterate the linearized mild solves to a fixed point.

    Starts from the pure-transport trajectory, stops when the sup distance
    between successive iterates drops below picard_tol, and raises when
    three consecutive ratios fail to contract (the horizon is too large).
    """
    if cfg.mode != "mild_picard":
        raise ConfigurationError("run_mild_solver requires mode=mild_picard")
    horizon = (cfg.verified_horizon if cfg.verified_horizon is not None
               else _UNVERIFIED_HORIZON)
    if cfg.T > horizon * (1.0 + 1e-12):
        if cfg.verified_horizon is None:
            raise HorizonError(
                f"T = {cfg.T:.6g} exceeds the unverified default horizon "
                f"{_UNVERIFIED_HORIZON}; run the supersolution verification "
                f"to establish a horizon or shorten T")
        raise HorizonError(
            f"T = {cfg.T:.6g} exceeds the verified horizon {horizon:.6g}")
    if cfg.verified_horizon is None:
        logger.info("mild run without verified horizon: capping at the "
                    "heuristic default %.3g", _UNVERIFIED_HORIZON)
    tables = build_tables(cfg.grid, cfg.kernel)
    cfg.initial.validate_against_gamma(cfg.kernel.gamma)
    f_in = make_initial(cfg.initial, cfg.grid)
    traj = _transport_trajectory(f_in, cfg)
    diffs = []
    inner_stats = []
    non_contracting = 0
    for n in range(1, cfg.picard_max_iters + 1):
        traj_next, sweeps = picard_iterate(traj, f_in, cfg, tables)
        sup = _sup_distance(traj_next, traj)
        ratio = sup / diffs[-1].sup_diff if diffs and diffs[-1].sup_diff > 0 else None
        diffs.append(IterateDiff(n=n, sup_diff=sup, ratio=ratio))
        inner_stats.append(sweeps)
        traj = traj_next
        if ratio is not None and ratio >= 1.0:
            non_contracting += 1
            if non_contracting >= 3:
                raise IterationError(
                    "three consecutive non-contracting iterations; the "
                    "horizon T is too large for this data, reduce T")
        else:
            non_contracting = 0
        if sup < cfg.picard_tol:
            break
    defect = _fixed_point_defect(traj, f_in, cfg, tables)
    times = [cfg.step * k for k in range(cfg.n_steps + 1)]
    return Solution(config=cfg, times=times, fields=traj,
                    iterate_diffs=diffs, series=series_from_fields(traj),
                    info={"inner_sweeps": inner_stats,
                          "mild_residual": defect})


def _fixed_point_defect(traj, f_in, cfg, tables, n_nodes=100, seed=0):
    """Mild-equation residual of the converged trajectory.

    One more linearized sweep with the trajectory as its own input gives
    the discrete Duhamel right-hand side; the residual is the difference
    at randomly drawn (but seeded) nodes.
    """
    again, _ = picard_iterate(traj, f_in, cfg, tables)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nodes):
        k = int(rng.integers(1, len(traj)))
        ix = int(rng.integers(0, cfg.grid.nx))
        iv = int(rng.integers(0, cfg.grid.nv))
        worst = max(worst, abs(float(again[k].values[ix, iv]
                                     - traj[k].values[ix, iv])))
    return worst


# ---------------------------------------------------------------------------
# Strang-split reference solver.

def _coag_stage(f, tables, dt):
    """Second-order coagulation stage: Heun combination of Euler substeps,
    substepped to respect the positivity bound.  Ledgers stay exact."""
    remaining = dt
    cur = f
    while remaining > 1e-16 * dt:
        bound = stability_bound(cur, tables)
        h = min(remaining, 0.9 * bound)
        while True:
            stage1 = apply_coagulation(cur, tables, h,
                                       precomputed_bound=bound)
            try:
                stage2 = apply_coagulation(stage1, tables, h)
            except StepRejected:
                # the front advanced within the first stage; shorten
                h *= 0.5
                continue
            break
        out = cur.copy()
        out.values = 0.5 * (cur.values + stage2.values)
        out.time = cur.time + h
        out.overflow_mass = 0.5 * (cur.overflow_mass + stage2.overflow_mass)
        out.clamp_mass = 0.5 * (cur.clamp_mass + stage2.clamp_mass)
        cur = out
        remaining -= h
    return cur


def run_operator_split(cfg, f_init=None):
    """Strang splitting of transport and coagulation (independent check).

    ``f_init`` overrides the default initial field (it must still satisfy
    the decaying-envelope hypothesis for the results to be meaningful).
    """
    if cfg.mode != "operator_split":
        raise ConfigurationError("run_operator_split requires mode=operator_split")
    tables = build_tables(cfg.grid, cfg.kernel)
    cfg.initial.validate_against_gamma(cfg.kernel.gamma)
    f = _tag_alpha(f_init.copy() if f_init is not None
                   else make_initial(cfg.initial, cfg.grid), cfg.initial.alpha)
    fields = [f]
    dt = cfg.step
    for _ in range(cfg.n_steps):
        f = transport_step(f, 0.5 * dt)
        f = _coag_stage(f, tables, dt)
        f = transport_step(f, 0.5 * dt)
        fields.append(f)
    times = [dt * k for k in range(cfg.n_steps + 1)]
    return Solution(config=cfg, times=times, fields=fields,
                    series=series_from_fields(fields))


# ---------------------------------------------------------------------------
# Homogeneous baseline.

def run_homogeneous(cfg, stop_loss_fraction=None, credit_overflow=False):
    """Coagulation-only evolution on a single spatial cell.

    The step adapts to the positivity bound (never exceeding cfg.dt).
    With ``stop_loss_fraction`` the run ends early once the uncredited
    mass-loss fraction passes that level (used by truncation sweeps).
    """
    if cfg.mode != "homogeneous":
        raise ConfigurationError("run_homogeneous requires mode=homogeneous")
    if cfg.grid.nx != 1:
        raise ConfigurationError("homogeneous mode needs a single spatial cell")
    tables = build_tables(cfg.grid, cfg.kernel)
    f = initial_homogeneous_field(cfg)
    first = f
    series = MomentSeries()
    series.append_state(f)
    m0 = series.mass[0]
    t = 0.0
    while t < cfg.T * (1.0 - 1e-12):
        bound = stability_bound(f, tables)
        h = min(cfg.dt, 0.9 * bound, cfg.T - t)
        f = apply_coagulation(f, tables, h, precomputed_bound=bound)
        t = f.time
        series.append_state(f)
        if stop_loss_fraction is not None:
            credited = f.boundary_flux + (f.overflow_mass if credit_overflow else 0.0)
            if (m0 - series.mass[-1] - credited) / m0 > stop_loss_fraction:
                break
    return Solution(config=cfg, times=list(series.times), fields=[first, f],
                    series=series)


def initial_homogeneous_field(cfg, profile="exponential"):
    """Single-column initial datum; default density exp(-v)."""
    g = cfg.grid
    if profile == "exponential":
        values = np.exp(-g.v_centers)[None, :].copy()
    else:
        values = cfg.initial.profile(0.0, g.v_centers)[None, :].copy()
    return _tag_alpha(StateField(grid=g, values=values, time=0.0),
                      cfg.initial.alpha)


# ---------------------------------------------------------------------------
# Approximate-transport reference model.

def _drift_coefficient(cfg):
    g = cfg.grid
    p = CharParams(L=max(cfg.char_L, 1e-300), R=cfg.char_R,
                   alpha=cfg.initial.alpha, gamma=cfg.kernel.gamma,
                   m=cfg.initial.m)
    c_v = cfg.char_L * g.v_centers ** p.gamma * xi_cutoff(g.v_centers, p.R)
    denom = 1.0 + np.abs(g.x_centers) ** p.k_decay
    return c_v[None, :] / denom[:, None]


def upwind_volume_step(f, drift, dt):
    """First-order upwind step for the volume drift term (advective form)."""
    g = f.grid
    spacing = np.empty(g.nv)
    spacing[1:] = g.v_centers[1:] - g.v_centers[:-1]
    spacing[0] = g.v_centers[0]
    cfl = float(np.max(drift * dt / spacing[None, :]))
    if cfl > 1.0 + 1e-12:
        raise StepRejected(
            f"volume-drift CFL {cfl:.3g} exceeds 1", bound=dt / cfl)
    shifted = np.empty_like(f.values)
    shifted[:, 1:] = f.values[:, :-1]
    shifted[:, 0] = 0.0
    out = f.copy()
    out.values = f.values - dt * drift / spacing[None, :] * (f.values - shifted)
    out.time = f.time + dt
    return out


def run_approximate_transport(cfg, source=None):
    """Drift-approximated linear model: upwind in v, conservative shift in x.

    ``source`` is an optional manufactured-solution injection
    source(x_grid, v_grid, t) added per substep (for convergence studies).
    """
    if cfg.mode != "approximate_transport":
        raise ConfigurationError(
            "run_approximate_transport requires mode=approximate_transport")
    g = cfg.grid
    drift = _drift_coefficient(cfg)
    f = _tag_alpha(make_initial(cfg.initial, g), cfg.initial.alpha)
    fields = [f]
    dt = cfg.step
    spacing = np.empty(g.nv)
    spacing[1:] = g.v_centers[1:] - g.v_centers[:-1]
    spacing[0] = g.v_centers[0]
    drift_max = float(np.max(drift / spacing[None, :]))
    n_sub = max(1, int(math.ceil(dt * drift_max / 0.9)))
    xg, vg = np.meshgrid(g.x_centers, g.v_centers, indexing="ij")
    for k in range(cfg.n_steps):
        t0 = k * dt
        for s in range(n_sub):
            f = upwind_volume_step(f, drift, dt / n_sub)
            if source is not None:
                mid = t0 + (s + 0.5) * dt / n_sub
                f.values = f.values + dt / n_sub * source(xg, vg, mid)
        f = transport_step(f, dt)
        f.time = t0 + dt
        fields.append(f)
    times = [dt * k for k in range(cfg.n_steps + 1)]
    return Solution(config=cfg, times=times, fields=fields,
                    series=series_from_fields(fields))
