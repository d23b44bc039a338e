"""Parameter scans, feedback-strength optimization and critical couplings.

Every quantity is evaluated at the steady state. The stored energy is
measured from the ground state of the battery Hamiltonian unless another
initial state is requested.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .dynamics import NumericalError, steady_state
from .operators import (
    ChainSpec,
    ControlSpec,
    ValidationError,
    all_down,
    build_battery_hamiltonian,
    ground_state,
)

METRICS = ("stored_energy", "ergotropy", "utilization", "ratio", "rho11")
ARGMAX_TOL = 1e-9
FLAT_TOL = 1e-12
CHI_TOL = 1e-4
J_TOL = 1e-3
INVPHI = (math.sqrt(5) - 1) / 2


def n_workers() -> int:
    """Worker count: ``QBATT_THREADS`` if set, else the CPU count."""
    env = os.environ.get("QBATT_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(f"QBATT_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise ValidationError("QBATT_THREADS must be >= 1")
        return value
    return os.cpu_count() or 1


def parallel_map(func: Callable, items: Sequence) -> list:
    """Map ``func`` over ``items``; results come back in input order."""
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _reference_state(chain: ChainSpec, initial: str) -> np.ndarray:
    H = build_battery_hamiltonian(chain)
    if initial == "ground":
        return ground_state(H)
    if initial == "all_down":
        return all_down(chain.n_sites)
    raise ValidationError(f"unknown initial state {initial!r}; use 'ground' or 'all_down'")


def steady_metric(chain: ChainSpec, ctrl: ControlSpec, metric: str = "stored_energy",
                  initial: str = "ground", rho_0: Optional[np.ndarray] = None) -> float:
    """One figure of merit at the steady state.

    ``metric`` is one of ``stored_energy``, ``ergotropy``, ``utilization``,
    ``ratio`` (ergotropy over stored energy, NaN when undefined) or
    ``rho11`` (population of the all-up state).
    """
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}; choose from {METRICS}")
    rho = steady_state(chain, ctrl, method="solve")
    if metric == "rho11":
        return float(rho[0, 0].real)
    H = build_battery_hamiltonian(chain)
    if rho_0 is None:
        rho_0 = _reference_state(chain, initial)
    if metric == "ergotropy":
        return metrics.ergotropy(rho, H)
    rec = metrics.evaluate(rho, rho_0, H)
    if metric == "stored_energy":
        return rec.stored_energy
    if metric == "utilization":
        return rec.utilization
    return metrics.ratio_or_nan(rec)


@dataclass(frozen=True)
class Axis:
    name: str
    start: float
    stop: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError(f"axis {self.name!r} needs at least one point")
        if self.count > 1 and not self.stop >= self.start:
            raise ValidationError(f"axis {self.name!r}: stop < start")

    @property
    def values(self) -> np.ndarray:
        # endpoint inclusive
        return np.linspace(self.start, self.stop, self.count)


@dataclass
class SweepSurface:
    """Metric values on an (alpha, chi) grid.

    ``values[i, k]`` belongs to ``alpha = axes[0].values[i]`` and
    ``chi = axes[1].values[k]``. Failed grid points hold NaN and are listed
    in ``failed``. ``argmax`` holds every grid point within ``1e-9`` of the
    maximum, as ``(alpha, chi)`` pairs.
    """

    axes: tuple
    metric: str
    values: np.ndarray
    argmax: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    def __post_init__(self):
        shape = tuple(a.count for a in self.axes)
        if self.values.shape != shape:
            raise ValidationError(f"value grid {self.values.shape} does not match axes {shape}")
        if not self.argmax:
            self.argmax = argmax_set(self.axes, self.values)

    @property
    def max_value(self) -> float:
        return float(np.nanmax(self.values))

    @property
    def multiplicity(self) -> int:
        return len(self.argmax)


def argmax_set(axes, values: np.ndarray, tol: float = ARGMAX_TOL) -> list:
    finite = np.isfinite(values)
    if not finite.any():
        raise NumericalError("every grid point failed")
    top = np.max(values[finite])
    hits = np.argwhere(finite & (values >= top - tol))
    grids = [a.values for a in axes]
    return [tuple(float(g[i]) for g, i in zip(grids, idx)) for idx in hits]


def grid_sweep(chain: ChainSpec, ctrl: ControlSpec, alpha: Axis, chi: Axis,
               metric: str = "stored_energy", initial: str = "ground") -> SweepSurface:
    """Evaluate ``metric`` at the steady state over an (alpha, chi) grid.

    ``ctrl`` supplies everything but the direction and feedback strength.
    A grid point whose steady state cannot be found is set to NaN and left
    out of the argmax.
    """
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}; choose from {METRICS}")
    rho_0 = None if metric == "rho11" else _reference_state(chain, initial)
    points = [(a, c) for a in alpha.values for c in chi.values]

    def evaluate(point):
        a, c = point
        try:
            return steady_metric(chain, replace(ctrl, direction=float(a),
                                                feedback_strength=float(c) * ctrl.decay_rate),
                                 metric, rho_0=rho_0)
        except (NumericalError, np.linalg.LinAlgError):
            return math.nan

    flat = np.array(parallel_map(evaluate, points), dtype=float)
    values = flat.reshape(alpha.count, chi.count)
    failed = [points[i] for i in np.flatnonzero(~np.isfinite(flat))]
    return SweepSurface(axes=(alpha, chi), metric=metric, values=values, failed=failed)


def golden_section(func: Callable[[float], float], lo: float, hi: float,
                   tol: float = CHI_TOL):
    """Maximize a unimodal ``func`` on ``[lo, hi]`` until the bracket is below ``tol``.

    Returns ``(x, func(x))``.
    """
    if hi < lo:
        lo, hi = hi, lo
    a, b = lo, hi
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = func(d)
    x = 0.5 * (a + b)
    return x, func(x)


@dataclass(frozen=True)
class ChiOptimum:
    """Result of :func:`optimize_chi`.

    Unpacks as ``chi, value = result``. ``interior_chi`` and
    ``interior_value`` describe the best local maximum with ``chi > 0``,
    which can lose to ``chi = 0``; ``feedback_effective`` is False when it
    does (or when the objective is flat), in which case ``chi = 0``.
    """

    chi: float
    value: float
    feedback_effective: bool
    value_at_zero: float
    interior_chi: float
    interior_value: float

    def __iter__(self):
        return iter((self.chi, self.value))


def _chi_objective(chain, ctrl, metric, initial):
    rho_0 = None if metric == "rho11" else _reference_state(chain, initial)
    cache = {}

    def objective(chi: float) -> float:
        key = float(chi)
        if key not in cache:
            c = replace(ctrl, feedback_strength=key * ctrl.decay_rate)
            cache[key] = steady_metric(chain, c, metric, rho_0=rho_0)
        return cache[key]

    return objective


def optimize_chi(chain: ChainSpec, ctrl: ControlSpec, metric: str = "stored_energy",
                 bracket=(0.0, 5.0), initial: str = "ground", n_scan: int = 51,
                 tol: float = CHI_TOL) -> ChiOptimum:
    """Best dimensionless feedback strength at the direction set in ``ctrl``.

    The objective can have two competing maxima (one at ``chi = 0``, one
    inside the bracket), so a coarse scan of ``n_scan`` points locates the
    best interior local maximum, which golden-section search then refines
    to ``|dchi| < tol``.
    """
    lo, hi = map(float, bracket)
    if not hi > lo:
        raise ValidationError("chi bracket must have hi > lo")
    objective = _chi_objective(chain, ctrl, metric, initial)
    grid = np.linspace(lo, hi, n_scan)
    vals = np.array(parallel_map(objective, list(grid)))
    if not np.all(np.isfinite(vals)):
        raise NumericalError(f"metric {metric!r} undefined somewhere in the chi bracket")
    at_zero = objective(0.0) if lo <= 0.0 <= hi else math.nan

    # best local maximum away from chi = 0
    start = 1 if grid[0] == 0.0 else 0
    candidates = [k for k in range(start, n_scan)
                  if (k == 0 or vals[k] >= vals[k - 1])
                  and (k == n_scan - 1 or vals[k] >= vals[k + 1])]
    if not candidates:
        candidates = [int(np.argmax(vals[start:])) + start]
    k = max(candidates, key=lambda i: vals[i])
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_scan - 1)]
    x, fx = golden_section(objective, a, b, tol)
    if vals[k] > fx:
        x, fx = float(grid[k]), float(vals[k])

    flat = np.ptp(vals) < FLAT_TOL
    effective = not flat and not (math.isfinite(at_zero) and fx <= at_zero + FLAT_TOL)
    if effective:
        return ChiOptimum(x, fx, True, at_zero, x, fx)
    return ChiOptimum(0.0, at_zero if math.isfinite(at_zero) else fx, False, at_zero, x, fx)


def find_critical_J(chain: ChainSpec, ctrl: ControlSpec, metric: str = "stored_energy",
                    bracket=(0.5, 5.0), tol: float = J_TOL, initial: str = "ground",
                    chi_bracket=(0.0, 5.0)) -> float:
    """Coupling beyond which feedback stops improving ``metric``.

    Bisects ``g(J) = metric(best interior chi) - metric(chi = 0)`` on ``J``
    until the bracket is narrower than ``tol`` (in units of ``h``).
    """
    if ctrl.eta >= 1:
        raise ValidationError("no critical coupling exists at eta = 1")

    def gap(J: float) -> float:
        opt = optimize_chi(replace(chain, coupling=J), ctrl, metric, chi_bracket, initial)
        return opt.interior_value - opt.value_at_zero

    lo, hi = map(float, bracket)
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo * g_hi > 0 or not (math.isfinite(g_lo) and math.isfinite(g_hi)):
        raise NumericalError(
            f"no sign change of the feedback gain on J in [{lo}, {hi}]: "
            f"g({lo}) = {g_lo:.6g}, g({hi}) = {g_hi:.6g}"
        )
    h = chain.field_strength
    while hi - lo > tol * h:
        mid = 0.5 * (lo + hi)
        g_mid = gap(mid)
        if g_mid == 0:
            return mid
        if (g_mid > 0) == (g_lo > 0):
            lo, g_lo = mid, g_mid
        else:
            hi, g_hi = mid, g_mid
    return 0.5 * (lo + hi)


SCAN_PARAMETERS = ("J", "gamma", "n_T", "Gamma", "eta")


@dataclass
class ScanTable:
    parameter: str
    columns: list
    rows: list  # one list per abscissa: [x, chi, metric values...]
    failed: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)


def _with_parameter(chain: ChainSpec, ctrl: ControlSpec, name: str, x: float):
    if name == "J":
        return replace(chain, coupling=x), ctrl
    if name == "gamma":
        return replace(chain, gamma=x), ctrl
    if name == "n_T":
        return chain, replace(ctrl, thermal_occupation=x)
    if name == "Gamma":
        # keep chi fixed while the decay rate changes
        return chain, replace(ctrl, decay_rate=x, feedback_strength=ctrl.chi * x)
    if name == "eta":
        return chain, replace(ctrl, detector_efficiency=x / ctrl.collection_efficiency)
    raise ValidationError(f"cannot scan {name!r}; choose from {SCAN_PARAMETERS}")


def scan_1d(chain: ChainSpec, ctrl: ControlSpec, parameter: str, values,
            metric_list=("stored_energy", "ergotropy", "utilization", "ratio"),
            optimize: bool = False, optimize_metric: str = "stored_energy",
            initial: str = "ground", chi_bracket=(0.0, 5.0)) -> ScanTable:
    """Steady-state metrics along one parameter.

    With ``optimize=True`` the feedback strength is re-optimized at every
    point for ``optimize_metric``; otherwise ``ctrl.chi`` is used. Points
    that fail are recorded as NaN rows and listed in ``failed``.
    """
    if parameter not in SCAN_PARAMETERS:
        raise ValidationError(f"cannot scan {parameter!r}; choose from {SCAN_PARAMETERS}")
    for m in metric_list:
        if m not in METRICS:
            raise ValidationError(f"unknown metric {m!r}")

    def point(x):
        ch, ct = _with_parameter(chain, ctrl, parameter, float(x))
        if optimize:
            opt = optimize_chi(ch, ct, optimize_metric, chi_bracket, initial)
            ct = replace(ct, feedback_strength=opt.chi * ct.decay_rate)
        rho_0 = _reference_state(ch, initial)
        return [float(x), ct.chi] + [steady_metric(ch, ct, m, rho_0=rho_0) for m in metric_list]

    rows, failed = [], []
    for x in values:
        try:
            rows.append(point(x))
        except (NumericalError, ValidationError, np.linalg.LinAlgError):
            failed.append(float(x))
            rows.append([float(x)] + [math.nan] * (1 + len(metric_list)))
    return ScanTable(parameter=parameter, columns=[parameter, "chi", *metric_list],
                     rows=rows, failed=failed)
