"""Discretization of (x, v) space and the density field data model.

The position grid is uniform; the volume grid is geometric, which suits
power-law envelopes and kernels.  Cell values are midpoint (cell-center)
approximations of cell averages.
"""

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .numerics import pairwise_sum


@dataclass(eq=False)
class GridSpec:
    """Uniform-in-x, geometric-in-v grid.

    The geometric ratio r = (v_max/v_min)^(1/nv) must exceed 1; volume bin
    centers are geometric midpoints of the bin edges (midpoints in log v).
    """

    x_min: float = -20.0
    x_max: float = 20.0
    nx: int = 128
    v_min: float = 1e-2
    v_max: float = 1e2
    nv: int = 128

    x_edges: np.ndarray = field(init=False, repr=False)
    x_centers: np.ndarray = field(init=False, repr=False)
    dx: float = field(init=False, repr=False)
    v_edges: np.ndarray = field(init=False, repr=False)
    v_centers: np.ndarray = field(init=False, repr=False)
    dv: np.ndarray = field(init=False, repr=False)
    ratio: float = field(init=False, repr=False)

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ConfigurationError("grid requires x_min < x_max")
        if self.v_min <= 0.0 or not self.v_min < self.v_max:
            raise ConfigurationError("grid requires 0 < v_min < v_max")
        # nx = 1 is admitted for the homogeneous (single-column) baseline
        if self.nx < 1 or self.nv < 2:
            raise ConfigurationError("grid requires nx >= 1 and nv >= 2")
        self.x_edges = np.linspace(self.x_min, self.x_max, self.nx + 1)
        self.x_centers = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])
        self.dx = (self.x_max - self.x_min) / self.nx
        self.ratio = (self.v_max / self.v_min) ** (1.0 / self.nv)
        self.v_edges = self.v_min * self.ratio ** np.arange(self.nv + 1)
        self.v_edges[-1] = self.v_max  # kill accumulated rounding at the top
        self.v_centers = np.sqrt(self.v_edges[:-1] * self.v_edges[1:])
        self.dv = np.diff(self.v_edges)
        if self.ratio <= 1.0:
            raise ConfigurationError("geometric ratio must exceed 1")

    def header_dict(self):
        return {
            "x_min": self.x_min, "x_max": self.x_max, "nx": self.nx,
            "v_min": self.v_min, "v_max": self.v_max, "nv": self.nv,
        }


@dataclass
class StateField:
    """Cell-averaged density snapshot f(x, v, t) on a grid.

    ``overflow_mass`` is the cumulative mass advected past v_max by
    coagulation; ``boundary_flux`` the cumulative mass carried out of the
    x-domain by transport; ``clamp_mass`` the (tiny) mass created by
    clamping float-dust cells back to zero.  None of them is ever silently
    lost: the ledger identity is mass + overflow + boundary = const.
    """

    grid: GridSpec
    values: np.ndarray
    time: float = 0.0
    overflow_mass: float = 0.0
    boundary_flux: float = 0.0
    clamp_mass: float = 0.0

    def copy(self):
        return replace(self, values=self.values.copy())

    def column_number(self, ix):
        """Particle count per unit length at column ix (sum f dv)."""
        return pairwise_sum(self.values[ix] * self.grid.dv)


@dataclass(frozen=True)
class InitialData:
    """Parameters of the decaying initial profile c0 / (1 + |x|^m + v^p).

    ``m`` must be even, ``p`` equals alpha*m, and the lower bound on m
    depends on the kernel homogeneity (validated separately because the
    kernel is configured independently).
    """

    c0: float = 1.0
    m: int = 8
    alpha: float = 2.0 / 3.0
    p: float = field(default=None)

    def __post_init__(self):
        if self.c0 <= 0.0:
            raise ConfigurationError("initial amplitude c0 must be positive")
        if not isinstance(self.m, int) or self.m % 2 != 0 or self.m <= 0:
            raise ConfigurationError(
                "initial.m must be an even positive integer (spatial decay exponent)")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("transport exponent alpha must lie in (0, 1)")
        p = self.alpha * self.m
        if self.p is None:
            object.__setattr__(self, "p", p)
        elif abs(self.p - p) > 1e-12 * max(1.0, p):
            raise ConfigurationError(
                f"initial.p must equal alpha*m = {p!r} (got {self.p!r})")

    def validate_against_gamma(self, gamma):
        """Check m > max{(2*gamma+1)/alpha, 2/alpha + 3} for the active kernel."""
        lower = max((2.0 * gamma + 1.0) / self.alpha, 2.0 / self.alpha + 3.0)
        if not self.m > lower:
            raise ConfigurationError(
                f"initial.m = {self.m} violates m > max((2*gamma+1)/alpha, "
                f"2/alpha + 3) = {lower:.6g} for kernel homogeneity "
                f"gamma = {gamma:.6g}")

    def profile(self, x, v):
        """The initial profile c0 / (1 + |x|^m + v^p)."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.c0 / (1.0 + np.abs(x) ** self.m + v ** self.p)

    def transported_profile(self, x, v, t):
        """Exact free-transport evolution c0 / (1 + |x - v^a t|^m + v^p)."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.c0 / (1.0 + np.abs(x - v ** self.alpha * t) ** self.m
                          + v ** self.p)


def make_initial(d, g):
    """Sample the initial profile onto a grid (midpoint rule per cell)."""
    xg, vg = np.meshgrid(g.x_centers, g.v_centers, indexing="ij")
    return StateField(grid=g, values=d.profile(xg, vg), time=0.0)


def make_transported_initial(d, g, t):
    """Exact transported initial profile at time t, sampled on the grid."""
    xg, vg = np.meshgrid(g.x_centers, g.v_centers, indexing="ij")
    return StateField(grid=g, values=d.transported_profile(xg, vg, t), time=t)


def interpolate(f, x, v):
    """Bilinear interpolation of cell values in (x, log v).

    Exact on per-cell-constant fields; queries outside the grid bounds
    return 0 (the density decays); values are clamped at 0 from below.
    Accepts scalars or equally shaped arrays.
    """
    g = f.grid
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    scalar = x.ndim == 0 and v.ndim == 0
    x, v = np.broadcast_arrays(np.atleast_1d(x), np.atleast_1d(v))

    inside = ((x >= g.x_min) & (x <= g.x_max)
              & (v >= g.v_min) & (v <= g.v_max))
    out = np.zeros(x.shape)
    if inside.any():
        xi = x[inside]
        vi = v[inside]
        # clamp to the center range: constant extension toward the edges
        tx = np.clip((xi - g.x_centers[0]) / g.dx, 0.0, g.nx - 1.0)
        ix = np.minimum(tx.astype(int), g.nx - 2)
        wx = tx - ix
        logr = np.log(g.ratio)
        tv = np.clip(np.log(vi / g.v_centers[0]) / logr, 0.0, g.nv - 1.0)
        iv = np.minimum(tv.astype(int), g.nv - 2)
        wv = tv - iv
        vals = ((1 - wx) * (1 - wv) * f.values[ix, iv]
                + wx * (1 - wv) * f.values[ix + 1, iv]
                + (1 - wx) * wv * f.values[ix, iv + 1]
                + wx * wv * f.values[ix + 1, iv + 1])
        out[inside] = np.maximum(vals, 0.0)
    return float(out[()]) if scalar else out


def moment(f, n, x_index, envelope_p=None):
    """n-th volume moment of column x_index: sum v_c^n f dv (pairwise).

    If ``envelope_p`` is given and n > p - 2 the quadrature is not backed
    by an integrable envelope; a warning is issued and the value still
    returned.
    """
    if envelope_p is not None and n > envelope_p - 2.0:
        warnings.warn(
            f"moment order n={n} exceeds envelope integrability p-2="
            f"{envelope_p - 2.0:.6g}", RuntimeWarning, stacklevel=2)
    g = f.grid
    return pairwise_sum(g.v_centers ** n * f.values[x_index] * g.dv)


# ---------------------------------------------------------------------------
# Snapshot files: one JSON header line followed by a CSV body.  Floats are
# written with repr, which round-trips bit-exactly.

def save_snapshot(f, path, config_hash=""):
    g = f.grid
    header = {
        "grid": g.header_dict(),
        "time": f.time,
        "overflow_mass": f.overflow_mass,
        "boundary_flux": f.boundary_flux,
        "config_hash": config_hash,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.append("x_index,v_index,x_center,v_center,value")
    for ix in range(g.nx):
        xc = repr(float(g.x_centers[ix]))
        row = f.values[ix]
        for iv in range(g.nv):
            lines.append(f"{ix},{iv},{xc},{float(g.v_centers[iv])!r},{float(row[iv])!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        cols = fh.readline().strip().split(",")
        if cols != ["x_index", "v_index", "x_center", "v_center", "value"]:
            raise ConfigurationError(f"unrecognized snapshot body in {path}")
        gd = header["grid"]
        g = GridSpec(x_min=gd["x_min"], x_max=gd["x_max"], nx=gd["nx"],
                     v_min=gd["v_min"], v_max=gd["v_max"], nv=gd["nv"])
        values = np.zeros((g.nx, g.nv))
        for line in fh:
            if not line.strip():
                continue
            ix_s, iv_s, _, _, val_s = line.split(",")
            values[int(ix_s), int(iv_s)] = float(val_s)
    return StateField(grid=g, values=values, time=header["time"],
                      overflow_mass=header["overflow_mass"],
                      boundary_flux=header.get("boundary_flux", 0.0)), header
