"""Configuration parsing, validation, and run manifests.

Config files are plain ``key = value`` lines with dotted sections
(kernel.*, grid.*, initial.*, solver.*, supersolution.*), ``#`` comments
and blank lines.  Unknown keys are errors.  An empty (or absent) file
yields the documented defaults.  The manifest hash covers the fully
resolved configuration, so changes to defaults are visible in provenance.
"""

import hashlib
import json
import time as time_mod
from dataclasses import dataclass, field

from . import __version__
from .errors import ConfigurationError
from .grid import GridSpec, InitialData
from .kernels import constant_kernel, rain_kernel, sum_kernel, truncate_kernel
from .solver import RunConfig

# key -> (type, default, doc); None default means "unset"
SCHEMA = {
    "kernel.kind": (str, "rain", "rain | sum | constant | truncated"),
    "kernel.alpha": (float, 2.0 / 3.0, "rain velocity exponent in (0,1)"),
    "kernel.gamma": (float, 1.5, "sum kernel exponent"),
    "kernel.c": (float, 1.0, "constant kernel rate"),
    "kernel.N": (float, None, "truncation volume (kind=truncated)"),
    "grid.x_min": (float, -20.0, "left position bound"),
    "grid.x_max": (float, 20.0, "right position bound"),
    "grid.nx": (int, 128, "position cells (uniform)"),
    "grid.v_min": (float, 1e-2, "smallest volume edge"),
    "grid.v_max": (float, 1e2, "largest volume edge"),
    "grid.nv": (int, 128, "volume bins (geometric)"),
    "initial.c0": (float, 1.0, "initial amplitude"),
    "initial.m": (int, 8, "even spatial decay exponent"),
    "initial.alpha": (float, 2.0 / 3.0, "transport exponent in (0,1)"),
    "initial.p": (float, None, "volume decay exponent; must equal alpha*m"),
    "solver.T": (float, 0.02, "time horizon"),
    "solver.dt": (float, 1e-3, "base step"),
    "solver.mode": (str, "mild_picard",
                    "mild_picard | operator_split | homogeneous | "
                    "approximate_transport"),
    "solver.picard_tol": (float, 1e-10, "outer sup-norm tolerance"),
    "solver.picard_max_iters": (int, 25, "outer iteration cap"),
    "solver.n_outputs": (int, 5, "snapshot count"),
    "solver.char_L": (float, 1.0, "drift strength of the reference model"),
    "solver.char_R": (float, 1.0, "drift cutoff of the reference model"),
    "supersolution.delta": (float, 0.25, "strip half-width parameter (0, 1/4]"),
    "supersolution.lambda": (float, None, "growth rate override"),
    "supersolution.R": (float, None, "drift cutoff override"),
    "supersolution.k2": (float, None, "comparison constant override"),
    "supersolution.k3": (float, None, "moment constant override"),
    "supersolution.kmax": (float, None, "cap scaling constant override"),
    "supersolution.T": (float, None, "verified horizon override"),
    "supersolution.char_budget": (int, 200, "cutoff tuning sample budget"),
    "supersolution.residual_samples": (int, 600, "residual sweep target"),
}


def parse_config(path=None):
    """Read and validate a config file.

    Returns (resolved, raw) where ``resolved`` maps every schema key to a
    value (defaults filled in) and ``raw`` only the explicitly set keys.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}")
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in SCHEMA:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            typ = SCHEMA[key][0]
            try:
                raw[key] = typ(value) if typ is not str else value
            except ValueError:
                raise ConfigurationError(
                    f"{path}:{lineno}: key {key!r} expects {typ.__name__}, "
                    f"got {value!r}")
    resolved = {k: (raw[k] if k in raw else default)
                for k, (_, default, _) in SCHEMA.items()}
    _validate(resolved, raw)
    return resolved, raw


def _validate(resolved, raw):
    alpha = resolved["initial.alpha"]
    m = resolved["initial.m"]
    if m % 2 != 0 or m <= 0:
        raise ConfigurationError(
            "initial.m must be an even positive integer (the spatial decay "
            "exponent of the initial profile)")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("initial.alpha must lie in (0, 1)")
    p = resolved["initial.p"]
    if p is not None and abs(p - alpha * m) > 1e-12 * max(1.0, alpha * m):
        raise ConfigurationError(
            f"initial.p must equal initial.alpha * initial.m = {alpha * m!r}")
    kernel = build_kernel(resolved, raw)
    if not kernel.gamma < 1.0 + alpha:
        raise ConfigurationError(
            f"kernel homogeneity gamma = {kernel.gamma:.6g} must satisfy "
            f"gamma in [0, 1 + alpha) with alpha = {alpha:.6g}")
    lower = max((2.0 * kernel.gamma + 1.0) / alpha, 2.0 / alpha + 3.0)
    if not m > lower:
        raise ConfigurationError(
            f"initial.m = {m} violates m > max((2*gamma+1)/alpha, 2/alpha+3) "
            f"= {lower:.6g}")
    if not 0.0 < resolved["supersolution.delta"] <= 0.25:
        raise ConfigurationError("supersolution.delta must lie in (0, 1/4]")


def build_kernel(resolved, raw=None):
    kind = resolved["kernel.kind"]
    if kind == "rain":
        return rain_kernel(resolved["kernel.alpha"])
    if kind == "sum":
        return sum_kernel(resolved["kernel.gamma"])
    if kind == "constant":
        return constant_kernel(resolved["kernel.c"])
    if kind == "truncated":
        cutoff = resolved["kernel.N"]
        if cutoff is None:
            raise ConfigurationError("kernel.kind=truncated requires kernel.N")
        raw = raw or {}
        if "kernel.alpha" in raw:
            inner = rain_kernel(resolved["kernel.alpha"])
        elif "kernel.gamma" in raw:
            inner = sum_kernel(resolved["kernel.gamma"])
        elif "kernel.c" in raw:
            inner = constant_kernel(resolved["kernel.c"])
        else:
            inner = sum_kernel(resolved["kernel.gamma"])
        return truncate_kernel(inner, cutoff)
    raise ConfigurationError(
        "kernel.kind must be one of rain, sum, constant, truncated")


def build_grid(resolved):
    return GridSpec(x_min=resolved["grid.x_min"], x_max=resolved["grid.x_max"],
                    nx=resolved["grid.nx"], v_min=resolved["grid.v_min"],
                    v_max=resolved["grid.v_max"], nv=resolved["grid.nv"])


def build_initial(resolved):
    return InitialData(c0=resolved["initial.c0"], m=resolved["initial.m"],
                       alpha=resolved["initial.alpha"])


def build_run_config(resolved, raw=None):
    return RunConfig(
        grid=build_grid(resolved),
        kernel=build_kernel(resolved, raw),
        initial=build_initial(resolved),
        T=resolved["solver.T"],
        dt=resolved["solver.dt"],
        mode=resolved["solver.mode"],
        picard_tol=resolved["solver.picard_tol"],
        picard_max_iters=resolved["solver.picard_max_iters"],
        verified_horizon=resolved["supersolution.T"],
        char_L=resolved["solver.char_L"],
        char_R=resolved["solver.char_R"],
        n_outputs=resolved["solver.n_outputs"],
    )


def config_hash(resolved):
    """Stable content hash of the fully resolved configuration."""
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        lines.append(f"{key}={value!r}")
    digest = hashlib.sha256("\n".join(lines).encode("utf-8"))
    return digest.hexdigest()


@dataclass
class Manifest:
    """Provenance record written next to run outputs."""

    config: dict
    config_hash: str
    versions: dict = field(default_factory=lambda: {"sedcoag": __version__})
    fitted_constants: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    step_count: int = 0
    iterate_diffs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, path):
        payload = {
            "config": self.config,
            "config_hash": self.config_hash,
            "versions": self.versions,
            "fitted_constants": self.fitted_constants,
            "wall_clock_s": round(self.wall_clock_s, 3),
            "step_count": self.step_count,
            "iterate_diffs": self.iterate_diffs,
        }
        payload.update(self.extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")


def timed():
    return time_mod.perf_counter()
