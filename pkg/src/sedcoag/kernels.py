"""Coagulation kernels: evaluation, growth/bound checks, and truncation.

Supported kinds:

* ``rain``     -- |v^a - w^a| (v^(1/3) + w^(1/3))^2, homogeneity a + 2/3,
                  vanishes on the diagonal.
* ``sum``      -- v^g + w^g.
* ``constant`` -- c.
* ``truncated``-- inner kernel times a continuous cutoff chi_N(v + w) that
                  is 1 below N/2 and 0 above N (linear ramp between).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class KernelSpec:
    """A coagulation kernel with its homogeneity and bound constant.

    ``gamma`` is the scaling exponent (K(s v, s w) = s^gamma K(v, w) for the
    built-in power-law families) and ``k1`` a constant with
    K(v, w) <= k1 (v^gamma + w^gamma) on positive volumes.  ``k1`` for the
    rain kernel is a reported, deliberately non-tight bound.
    """

    kind: str
    alpha: Optional[float] = None       # rain velocity exponent
    gamma_exp: Optional[float] = None   # sum kernel exponent
    c: Optional[float] = None           # constant kernel rate
    inner: Optional["KernelSpec"] = None
    cutoff: Optional[float] = None      # truncation volume N
    gamma: float = field(init=False, default=0.0)
    k1: float = field(init=False, default=1.0)

    def __post_init__(self):
        if self.kind == "rain":
            if self.alpha is None or not 0.0 < self.alpha < 1.0:
                raise ConfigurationError("rain kernel needs alpha in (0, 1)")
            gamma = self.alpha + 2.0 / 3.0
            k1 = 4.0  # crude but valid bound, reported rather than tight
        elif self.kind == "sum":
            if self.gamma_exp is None or self.gamma_exp < 0.0:
                raise ConfigurationError("sum kernel needs gamma >= 0")
            gamma = self.gamma_exp
            k1 = 1.0
        elif self.kind == "constant":
            if self.c is None or self.c < 0.0:
                raise ConfigurationError("constant kernel needs c >= 0")
            gamma = 0.0
            k1 = 0.5 * self.c if self.c > 0.0 else 1.0
        elif self.kind == "truncated":
            if self.inner is None:
                raise ConfigurationError("truncated kernel needs an inner kernel")
            if self.cutoff is None or self.cutoff <= 1.0:
                raise ConfigurationError("truncation volume N must exceed 1")
            gamma = self.inner.gamma
            k1 = self.inner.k1
        else:
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "k1", k1)


def rain_kernel(alpha=2.0 / 3.0):
    """Differential-sedimentation kernel with velocity exponent alpha."""
    return KernelSpec(kind="rain", alpha=alpha)


def sum_kernel(gamma):
    """Additive power-law kernel v^gamma + w^gamma."""
    return KernelSpec(kind="sum", gamma_exp=gamma)


def constant_kernel(c=1.0):
    return KernelSpec(kind="constant", c=c)


def truncate_kernel(k, cutoff):
    """Multiply ``k`` by the continuous cutoff chi_N(v + w).

    chi_N is 1 for v + w <= N/2, 0 for v + w >= N, and ramps linearly in
    between; truncation is the identity below N/2 and dominated everywhere.
    """
    if cutoff is None or cutoff <= 1.0:
        raise ConfigurationError("truncation volume N must exceed 1")
    return KernelSpec(kind="truncated", inner=k, cutoff=float(cutoff))


def chi_cutoff(s, cutoff):
    """The ramp chi_N evaluated at pair volume s = v + w."""
    s = np.asarray(s, dtype=float)
    return np.clip(2.0 * (cutoff - s) / cutoff, 0.0, 1.0)


def eval_kernel(k, v, vp):
    """Evaluate K(v, vp); accepts scalars or broadcastable arrays.

    Raises DomainError on non-positive volumes.
    """
    v = np.asarray(v, dtype=float)
    vp = np.asarray(vp, dtype=float)
    if np.any(v <= 0.0) or np.any(vp <= 0.0):
        raise DomainError("kernel volumes must be positive")
    out = _eval(k, v, vp)
    if out.ndim == 0:
        return float(out)
    return out


def _eval(k, v, vp):
    if k.kind == "rain":
        a = k.alpha
        return np.abs(v ** a - vp ** a) * (v ** (1.0 / 3.0) + vp ** (1.0 / 3.0)) ** 2
    if k.kind == "sum":
        g = k.gamma_exp
        return v ** g + vp ** g
    if k.kind == "constant":
        return np.broadcast_arrays(np.full_like(v * vp, k.c))[0]
    # truncated
    return _eval(k.inner, v, vp) * chi_cutoff(v + vp, k.cutoff)


@dataclass
class AssumptionReport:
    """Outcome of sampling-based kernel property checks.

    Violation entries are tuples ((v, vp), margin) where a positive margin
    is the size of the breach.
    """

    n_pairs: int
    symmetry_violations: list
    bound_violations: list
    monotonicity_violations: list

    @property
    def passed(self):
        return not (self.symmetry_violations or self.bound_violations
                    or self.monotonicity_violations)

    def summary(self):
        return {
            "pairs": self.n_pairs,
            "symmetry": len(self.symmetry_violations),
            "bound": len(self.bound_violations),
            "monotonicity": len(self.monotonicity_violations),
        }


def check_assumption(k, samples, gamma=None, k1=None, rel_tol=1e-12):
    """Check symmetry, the growth bound and pairwise monotonicity on samples.

    ``k`` may be a KernelSpec or a plain callable K(v, vp).  For a callable,
    ``gamma`` and ``k1`` must be supplied for the bound check.  Monotonicity
    means K(v - vp, vp) <= K(v, vp) whenever vp <= v/2.
    """
    samples = [(float(v), float(vp)) for v, vp in samples]
    if not samples:
        raise ConfigurationError("check_assumption needs a nonempty sample set")
    if isinstance(k, KernelSpec):
        fn = lambda v, vp: eval_kernel(k, v, vp)
        gamma = k.gamma if gamma is None else gamma
        k1 = k.k1 if k1 is None else k1
    else:
        fn = k
        if gamma is None or k1 is None:
            raise ConfigurationError("callable kernels need explicit gamma and k1")

    sym, bound, mono = [], [], []
    for v, vp in samples:
        if v <= 0.0 or vp <= 0.0:
            raise DomainError("sample volumes must be positive")
        kv = fn(v, vp)
        kr = fn(vp, v)
        scale = max(abs(kv), abs(kr), 1e-300)
        if abs(kv - kr) > rel_tol * scale:
            sym.append(((v, vp), abs(kv - kr) / scale))
        cap = k1 * (v ** gamma + vp ** gamma)
        if kv > cap * (1.0 + rel_tol):
            bound.append(((v, vp), kv - cap))
        if vp <= 0.5 * v:
            lhs = fn(v - vp, vp)
            if lhs > kv * (1.0 + rel_tol) + 1e-300:
                mono.append(((v, vp), lhs - kv))
    return AssumptionReport(
        n_pairs=len(samples),
        symmetry_violations=sym,
        bound_violations=bound,
        monotonicity_violations=mono,
    )


def log_spaced_pairs(v_lo, v_hi, n):
    """Deterministic n x n log-spaced sample grid of volume pairs."""
    vs = np.geomspace(v_lo, v_hi, n)
    return [(v, vp) for v in vs for vp in vs]
