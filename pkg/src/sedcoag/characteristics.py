"""Backward characteristics of the drift-approximated transport model.

The flow solves, in backward elapsed time,

    dX/dt = -V^alpha,
    dV/dt = -L V^gamma xi_R(V) / (1 + |X|^(m-d)),

together with the variational system for (dX/dv, dV/dv).  ``xi_R`` is a C1
cutoff that switches the volume drift on above R, so small volumes travel
as pure transport.  The module also evaluates the drift potential ``psi``
and the conjugate volume flow ``phi`` used to cross-check the integrator,
verifies the quantitative flow estimates on sample sweeps, and searches
for a cutoff radius R that makes all estimates hold.
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .errors import ConfigurationError, DomainError, NumericalError, TuningError
from .numerics import smoothstep, smoothstep_derivative
from .odeint import integrate_adaptive

_PSI_TAIL = 1e3  # beyond here the potential integrand is algebraic to 1e-9


def derive_d(alpha):
    """Even auxiliary exponent: floor(2/alpha) + 1 if odd, + 2 if even."""
    fl = math.floor(2.0 / alpha)
    return fl + 1 if fl % 2 == 1 else fl + 2


@dataclass(frozen=True)
class CharParams:
    """Parameters of the characteristic flow.

    ``d`` is derived from alpha; ``m - d`` is even so the spatial factor
    is smooth.  ``L = 0`` disables the drift entirely (pure transport).
    """

    L: float = 1.0
    R: float = 1.0
    alpha: float = 2.0 / 3.0
    gamma: float = 4.0 / 3.0
    m: int = 8

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0 + self.alpha:
            raise ConfigurationError("gamma must lie in [0, 1 + alpha)")
        if self.L < 0.0:
            raise ConfigurationError("drift strength L must be >= 0")
        if self.R <= 0.0:
            raise ConfigurationError("cutoff radius R must be positive")
        if not isinstance(self.m, int) or self.m % 2 != 0:
            raise ConfigurationError("m must be an even integer")
        if not self.m > self.d + 1:
            raise ConfigurationError(
                f"m = {self.m} must exceed d + 1 = {self.d + 1} for alpha = "
                f"{self.alpha:.6g}")

    @property
    def d(self):
        return derive_d(self.alpha)

    @property
    def k_decay(self):
        """Spatial decay exponent m - d of the drift denominator."""
        return self.m - self.d


@dataclass
class CharPath:
    """Backward characteristic state after elapsed time t."""

    X: float
    V: float
    dvX: float
    dvV: float
    t: float


def xi_cutoff(v, R):
    """C1 drift switch: 0 below R, 1 above 2R, cubic smoothstep between."""
    return smoothstep((np.asarray(v, dtype=float) - R) / R)


def xi_cutoff_derivative(v, R):
    return smoothstep_derivative((np.asarray(v, dtype=float) - R) / R) / R


def _char_rhs(p):
    L, R, alpha, gamma, k = p.L, p.R, p.alpha, p.gamma, p.k_decay

    def rhs(y):
        X = y[:, 0]
        V = np.maximum(y[:, 1], 1e-300)  # trial stages may graze zero
        dvX = y[:, 2]
        dvV = y[:, 3]
        with np.errstate(invalid="ignore", over="ignore"):
            xa = np.abs(X)
            denom = 1.0 + xa ** k
            xi = xi_cutoff(V, R)
            vg = V ** gamma
            drift = L * vg * xi / denom
            dg_dv = -L * (gamma * V ** (gamma - 1.0) * xi
                          + vg * xi_cutoff_derivative(V, R)) / denom
            dg_dx = L * vg * xi * k * xa ** (k - 2) * X / denom ** 2
            out = np.empty_like(y)
            out[:, 0] = -V ** alpha
            out[:, 1] = -drift
            out[:, 2] = -alpha * V ** (alpha - 1.0) * dvV
            out[:, 3] = dg_dx * dvX + dg_dv * dvV
        return out

    return rhs


def integrate_batch(xs, vs, ts, p, rtol=1e-8):
    """Integrate the characteristic flow for many samples at once.

    Elements with v <= R (or L = 0) never engage the drift and are solved
    in closed form; the rest run through the adaptive integrator with
    per-element step control, so results do not depend on how the batch is
    partitioned.

    Returns arrays (X, V, dvX, dvV).
    """
    xs = np.asarray(xs, dtype=float)
    vs = np.asarray(vs, dtype=float)
    ts = np.asarray(ts, dtype=float)
    if np.any(vs <= 0.0):
        raise DomainError("volumes must be positive")
    if np.any(ts < 0.0):
        raise DomainError("elapsed times must be nonnegative")
    X = xs - vs ** p.alpha * ts
    V = vs.copy()
    dvX = -p.alpha * vs ** (p.alpha - 1.0) * ts
    dvV = np.ones_like(vs)
    if p.L > 0.0:
        hard = vs > p.R  # the backward flow only shrinks V, so v <= R is exact
        if hard.any():
            y0 = np.stack([xs[hard], vs[hard], np.zeros(hard.sum()),
                           np.ones(hard.sum())], axis=1)
            y = integrate_adaptive(_char_rhs(p), y0, ts[hard], rtol=rtol)
            X[hard] = y[:, 0]
            V[hard] = y[:, 1]
            dvX[hard] = y[:, 2]
            dvV[hard] = y[:, 3]
    return X, V, dvX, dvV


def integrate_characteristics(x, v, t, p, tol=1e-8):
    """Backward characteristic through (x, v) over elapsed time t."""
    X, V, dvX, dvV = integrate_batch(
        np.array([x]), np.array([v]), np.array([t]), p, rtol=tol)
    return CharPath(X=float(X[0]), V=float(V[0]), dvX=float(dvX[0]),
                    dvV=float(dvV[0]), t=float(t))


# ---------------------------------------------------------------------------
# Drift potential psi and conjugate volume flow phi.

@lru_cache(maxsize=4096)
def _psi_core(x, L, k):
    """psi(x) = int_{-inf}^x L / (1 + |s|^k) ds with algebraic tails."""
    tail_lo = L * _PSI_TAIL ** (1 - k) / (k - 1)
    if x <= -_PSI_TAIL:
        return L * abs(x) ** (1 - k) / (k - 1)
    upper = min(x, _PSI_TAIL)
    val, _ = quad(lambda s: L / (1.0 + abs(s) ** k), -_PSI_TAIL, upper,
                  limit=200, epsabs=1e-13, epsrel=1e-12)
    total = tail_lo + val
    if x > _PSI_TAIL:
        total += L * (_PSI_TAIL ** (1 - k) - x ** (1 - k)) / (k - 1)
    return total


def psi(x, p):
    """Strictly increasing, bounded drift potential at position x."""
    if p.k_decay < 2:
        raise ConfigurationError("psi requires m - d >= 2")
    return _psi_core(float(x), float(p.L), int(p.k_decay))


def psi_total(p):
    """psi(+inf); by evenness of the integrand it equals 2 psi(0)."""
    return 2.0 * psi(0.0, p)


def phi(z, v, p, rtol=1e-10):
    """Conjugate volume flow: solution of dPhi/dz = Phi^(gamma-alpha) xi_R(Phi).

    Closed form below R (constant) and wherever the path stays in the
    fully-switched region; adaptive integration across the cutoff band.
    ``z`` may be negative: the backward conjugation feeds z = psi(X) - psi(x)
    which is nonpositive, so the domain is extended accordingly.
    """
    if v <= 0.0:
        raise DomainError("phi requires v > 0")
    beta = 1.0 - (p.gamma - p.alpha)
    if beta <= 0.0:
        raise ConfigurationError(
            "phi requires gamma - alpha < 1 (exponent 1-(gamma-alpha) "
            "must stay positive)")
    R = p.R
    if v <= R:
        return float(v)

    def closed(zz):
        rad = v ** beta + beta * zz
        if rad <= 0.0:
            raise DomainError("drift coordinate z exhausts the volume")
        return rad ** (1.0 / beta)

    if v >= 2.0 * R:
        if z >= 0.0:
            return closed(z)
        cand = closed(z)
        if cand >= 2.0 * R:
            return cand
    # cutoff band, or a negative-z path dipping into it: integrate
    sign = 1.0 if z >= 0.0 else -1.0

    def rhs(y):
        val = np.maximum(y[:, 0], 1e-300)
        with np.errstate(over="ignore"):
            return sign * val ** (p.gamma - p.alpha) * xi_cutoff(val, R)[:, None]

    y = integrate_adaptive(rhs, np.array([[float(v)]]), np.array([abs(z)]),
                           rtol=rtol)
    out = float(y[0, 0])
    if z >= 0.0 and v >= R:
        upper = closed(z)
        if out > upper * (1.0 + 1e-8) or out < v * (1.0 - 1e-8):
            raise NumericalError(
                f"phi({z!r}, {v!r}) = {out!r} escapes its sandwich "
                f"[{v!r}, {upper!r}]")
    return out


# ---------------------------------------------------------------------------
# Verification of the quantitative flow estimates.

_INEQUALITIES = (
    "V_band", "X_band", "dvX_band", "dvV_band_off_strip",
    "dvV_strip_magnitude", "dvV_strip_upper",
    "X_negative_side", "X_positive_side",
)


@dataclass
class BoundReport:
    """Violation bookkeeping for the characteristic estimates."""

    delta: float
    n_samples: int
    checked: dict
    violations: dict
    worst_margin: dict
    witness: dict

    @property
    def passed(self):
        return all(len(v) == 0 for v in self.violations.values())

    def summary(self):
        return {
            "delta": self.delta,
            "samples": self.n_samples,
            "passed": self.passed,
            "per_inequality": {
                name: {
                    "checked": self.checked[name],
                    "violations": len(self.violations[name]),
                    "worst_margin": self.worst_margin[name],
                    "witness": self.witness[name],
                }
                for name in _INEQUALITIES
            },
        }


def _record(report, name, sample, margin):
    """margin > 0 is headroom; margin <= 0 is a violation of that size."""
    report.checked[name] += 1
    if margin < report.worst_margin[name]:
        report.worst_margin[name] = margin
        report.witness[name] = sample
    if margin < 0.0:
        report.violations[name].append((sample, margin))


def verify_char_bounds(samples, delta, p, rtol=1e-8, slack=1e-9):
    """Check the two-sided flow estimates on a sample set.

    Samples are (x, v, t) triples.  Violations are data, not errors; the
    report carries the worst margin and a witness per inequality.  On the
    critical strip the variational volume bound is checked in the additive
    form |dvV| <= 2 + 36 L max(1, v^(gamma-1) t): the bare multiplicative
    form has no room for the drift-free part of dvV and would reject the
    exact pure-transport flow.
    """
    if not 0.0 < delta < 0.5:
        raise ConfigurationError("delta must lie in (0, 1/2)")
    samples = [(float(x), float(v), float(t)) for x, v, t in samples]
    if not samples:
        raise ConfigurationError("empty sample set")
    xs = np.array([s[0] for s in samples])
    vs = np.array([s[1] for s in samples])
    ts = np.array([s[2] for s in samples])
    X, V, dvX, dvV = integrate_batch(xs, vs, ts, p, rtol=rtol)

    report = BoundReport(
        delta=delta, n_samples=len(samples),
        checked={k: 0 for k in _INEQUALITIES},
        violations={k: [] for k in _INEQUALITIES},
        worst_margin={k: np.inf for k in _INEQUALITIES},
        witness={k: None for k in _INEQUALITIES},
    )

    for i, s in enumerate(samples):
        x, v, t = s
        vat = v ** p.alpha * t
        eps = slack * max(1.0, v)

        lo, hi = (1.0 - delta) * v, (1.0 + delta) * v
        _record(report, "V_band", s,
                min(V[i] - lo, hi - V[i]) + slack * v)

        shift = x - X[i]
        eps_x = slack * max(1.0, vat)
        _record(report, "X_band", s,
                min(shift - (1.0 - delta) * vat,
                    (1.0 + delta) * vat - shift) + eps_x)

        dvx_scale = p.alpha * v ** (p.alpha - 1.0) * t
        eps_d = slack * max(1.0, dvx_scale)
        _record(report, "dvX_band", s,
                min(-dvX[i] - dvx_scale / 18.0,
                    18.0 * dvx_scale - (-dvX[i])) + eps_d)

        strip_lo = (1.0 - 2.0 * delta) * vat
        strip_hi = (1.0 + 2.0 * delta) * vat
        strip_slack = 1e-12 * max(1.0, vat)
        on_strip = strip_lo - strip_slack <= x <= strip_hi + strip_slack
        if on_strip:
            cap = 2.0 + 36.0 * p.L * max(1.0, v ** (p.gamma - 1.0) * t)
            _record(report, "dvV_strip_magnitude", s,
                    cap - abs(dvV[i]) + eps)
            _record(report, "dvV_strip_upper", s, 2.0 - dvV[i] + eps)
        else:
            _record(report, "dvV_band_off_strip", s,
                    min(dvV[i] - 0.25, 2.25 - dvV[i]) + slack)

        absX = abs(X[i])
        if x <= 0.0:
            lo_b = abs(x) + (1.0 - delta) * vat
            hi_b = abs(x) + (1.0 + delta) * vat
            _record(report, "X_negative_side", s,
                    min(absX - lo_b, hi_b - absX) + eps_x)
        else:
            t_fast = x / ((1.0 - delta) * v ** p.alpha)
            t_slow = x / ((1.0 + delta) * v ** p.alpha)
            if t >= t_fast:
                lo_b = abs(x - (1.0 - delta) * vat)
                hi_b = abs(x - (1.0 + delta) * vat)
            elif t <= t_slow:
                lo_b = abs(x - (1.0 + delta) * vat)
                hi_b = abs(x - (1.0 - delta) * vat)
            else:
                lo_b, hi_b = 0.0, 3.0 * vat
            _record(report, "X_positive_side", s,
                    min(absX - lo_b, hi_b - absX) + eps_x)
    return report


def make_char_samples(budget, x_range=(-10.0, 10.0), v_range=(1e-2, 1e4),
                      t_max=1.0, include_strip=True):
    """Deterministic (x, v, t) sample sweep of roughly ``budget`` triples.

    Log-spaced volumes, symmetric log-spaced positions around 0, a time
    column including t = 0, plus per-(x, v) samples placed on the critical
    strip (x = v^alpha t center) for positive positions.
    """
    n_t = 5
    n_x = max(3, int(round(math.sqrt(budget / n_t))))
    n_v = max(3, int(math.ceil(budget / (n_t * n_x))))
    x_hi = max(abs(x_range[0]), abs(x_range[1]))
    half = np.geomspace(x_hi * 1e-2, x_hi, max(1, (n_x - 1) // 2))
    xs = np.concatenate([-half[::-1], [0.0], half])
    vs = np.geomspace(v_range[0], v_range[1], n_v)
    ts = np.concatenate([[0.0], np.geomspace(t_max * 1e-3, t_max, n_t - 1)])
    samples = [(x, v, t) for x in xs for v in vs for t in ts]
    if include_strip:
        for x in half:
            for v in vs:
                t_strip = x / v ** (2.0 / 3.0)
                if 0.0 < t_strip <= t_max:
                    samples.append((float(x), float(v), float(t_strip)))
    return samples


def auto_tune_R(delta, base, budget=200, x_range=(-10.0, 10.0),
                v_range=(1e-2, 1e4), t_max=1.0, rtol=1e-8,
                ceiling=2.0 ** 40 * 1e-2):
    """Doubling search for the smallest tested cutoff R passing all bounds.

    ``base`` is a CharParams whose R field is ignored.  Returns
    (R, CharParams, BoundReport).  Deterministic given the sample budget
    and ranges.  Raises TuningError past the ceiling.
    """
    samples = make_char_samples(budget, x_range=x_range, v_range=v_range,
                                t_max=t_max)
    R = 1.0
    last = None
    while R <= ceiling:
        params = replace(base, R=R)
        report = verify_char_bounds(samples, delta, params, rtol=rtol)
        if report.passed:
            return R, params, report
        last = report
        R *= 2.0
    raise TuningError(
        f"cutoff search exceeded ceiling {ceiling:.6g}; last report had "
        f"{sum(len(v) for v in last.violations.values())} violations")
