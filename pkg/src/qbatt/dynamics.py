"""Ensemble-averaged feedback master equation: generators, RK4 propagation and steady states.

The generator for homodyne feedback with feedback operators ``F_j`` and
local decay ``sigma_j^-`` is

    d rho/dt = -i[H_B, rho] + sum_j decay_j(rho)
               - i sum_j ([F_j, s_j rho + rho s_j^dag] - i/(2 eta Gamma) [F_j, [F_j, rho]])

where at zero temperature ``decay_j = Gamma D[s_j]``. At finite temperature
the uncollected fraction ``1 - eta_c`` of the emission goes to a thermal
reservoir with occupation ``n_T``.

Superoperators use column stacking: ``vec(A rho B) = (B^T kron A) vec(rho)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import metrics
from .operators import (
    ChainSpec,
    ControlSpec,
    ValidationError,
    build_battery_hamiltonian,
    build_feedback_operator,
    build_pauli,
)

log = logging.getLogger(__name__)

POSITIVITY_TOL = 1e-6
NULL_TOL = 1e-9
RESIDUAL_TOL = 1e-9
DENSE_EIG_LIMIT = 1024  # Liouvillian dimension handled by a full eigensolve
SUPEROP_LIMIT = 256  # below this the RK4 stages use the Liouvillian matvec
NULL_SPACE_MAX_SITES = 6
MAX_HALVINGS = 4


class NumericalError(RuntimeError):
    """A numerical procedure failed to meet its accuracy contract."""


class PositivityError(NumericalError):
    pass


def _dag(A):
    return A.conj().T


def hermitize(rho: np.ndarray) -> np.ndarray:
    return 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))


def dissipator(o: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``D[o] rho = o rho o^dag - (o^dag o rho + rho o^dag o) / 2``."""
    if o.shape[-2:] != rho.shape[-2:]:
        raise ValidationError(f"dimension mismatch: {o.shape} vs {rho.shape}")
    od = _dag(o)
    odo = od @ o
    return o @ rho @ od - 0.5 * (odo @ rho + rho @ odo)


def _commutator(A, B):
    return A @ B - B @ A


class FeedbackGenerator:
    """Precomputed operators for one ``(chain, ctrl)`` pair.

    ``thermal=False`` builds the zero-temperature generator and refuses a
    nonzero thermal occupation; ``thermal=True`` builds the finite-temperature
    one, which reduces to the former when ``n_T = 0``.
    """

    def __init__(self, chain: ChainSpec, ctrl: ControlSpec, thermal: bool = False):
        if not thermal and not ctrl.is_zero_temperature:
            raise ValidationError(
                "thermal_occupation != 0: use the thermal generator (thermal_me_rhs)"
            )
        self.chain = chain
        self.ctrl = ctrl
        self.thermal = thermal
        n = chain.n_sites
        self.dim = chain.dim
        self.H = build_battery_hamiltonian(chain)
        self.lowering = [build_pauli(j, "-", n) for j in range(1, n + 1)]
        self.raising = [build_pauli(j, "+", n) for j in range(1, n + 1)]
        self.feedback = [build_feedback_operator(j, ctrl, n) for j in range(1, n + 1)]
        G = ctrl.decay_rate
        if thermal:
            eta_c, n_t = ctrl.collection_efficiency, ctrl.thermal_occupation
            self.down_rate = G * (eta_c + (1 - eta_c) * (1 + n_t))
            self.up_rate = G * (1 - eta_c) * n_t
        else:
            self.down_rate = G
            self.up_rate = 0.0
        self.kappa = 1.0 / (2.0 * ctrl.eta * G)
        self._L = None

    def rhs(self, rho: np.ndarray) -> np.ndarray:
        out = -1j * _commutator(self.H, rho)
        for s, sp, F in zip(self.lowering, self.raising, self.feedback):
            out += self.down_rate * dissipator(s, rho)
            if self.up_rate:
                out += self.up_rate * dissipator(sp, rho)
            if self.ctrl.feedback_strength:
                out += -1j * _commutator(F, s @ rho + rho @ sp)
                out += -self.kappa * _commutator(F, _commutator(F, rho))
        return out

    def liouvillian(self) -> np.ndarray:
        if self._L is None:
            self._L = self._build_liouvillian()
        return self._L

    def liouvillian_sparse(self) -> scipy.sparse.csc_matrix:
        return self._build_liouvillian(sparse=True)

    def _build_liouvillian(self, sparse: bool = False):
        # assembled sparse either way: the local operators make the Kronecker factors sparse
        d = self.dim
        kron = lambda a, b: scipy.sparse.kron(scipy.sparse.csr_matrix(a),
                                              scipy.sparse.csr_matrix(b), format="csr")
        eye = scipy.sparse.identity(d, dtype=complex, format="csr")
        # collect left- and right-multiplying parts first: vec(A rho B) = (B^T kron A) vec(rho)
        left = -1j * self.H
        right = 1j * self.H
        cross = []
        fb = bool(self.ctrl.feedback_strength)
        for s, sp, F in zip(self.lowering, self.raising, self.feedback):
            sd = _dag(s)
            jumps = [(s, self.down_rate)] + ([(sp, self.up_rate)] if self.up_rate else [])
            for c, rate in jumps:
                cdc = _dag(c) @ c
                left = left - 0.5 * rate * cdc
                right = right - 0.5 * rate * cdc
                cross.append(rate * kron(c.conj(), c))
            if fb:
                F2 = F @ F
                # -i[F, s rho + rho s^dag] - kappa [F, [F, rho]]
                left = left - 1j * F @ s - self.kappa * F2
                right = right + 1j * sd @ F - self.kappa * F2
                cross.append(-1j * kron(s.conj(), F) + 1j * kron(F.T, s)
                             + 2 * self.kappa * kron(F.T, F))
        L = kron(eye, left) + kron(right.T, eye)
        for term in cross:
            L = L + term
        return scipy.sparse.csc_matrix(L) if sparse else L.toarray()


def vec(rho: np.ndarray) -> np.ndarray:
    return rho.reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int) -> np.ndarray:
    return v.reshape(dim, dim, order="F")


def feedback_me_rhs(rho: np.ndarray, chain: ChainSpec, ctrl: ControlSpec) -> np.ndarray:
    """Zero-temperature feedback master equation applied to ``rho``."""
    return FeedbackGenerator(chain, ctrl).rhs(rho)


def thermal_me_rhs(rho: np.ndarray, chain: ChainSpec, ctrl: ControlSpec) -> np.ndarray:
    """Finite-temperature feedback master equation applied to ``rho``."""
    return FeedbackGenerator(chain, ctrl, thermal=True).rhs(rho)


def make_generator(chain: ChainSpec, ctrl: ControlSpec) -> FeedbackGenerator:
    """Generator appropriate for ``ctrl``: thermal iff ``n_T > 0``."""
    return FeedbackGenerator(chain, ctrl, thermal=not ctrl.is_zero_temperature)


def maximally_mixed(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=complex) / dim


def check_density_matrix(rho: np.ndarray, herm_tol=1e-10, trace_tol=1e-10,
                         positivity_tol=POSITIVITY_TOL):
    """Raise ``ValidationError`` unless ``rho`` is a valid density matrix."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValidationError(f"density matrix must be square, got {rho.shape}")
    herm = float(np.max(np.abs(rho - _dag(rho))))
    if herm > herm_tol:
        raise ValidationError(f"density matrix not Hermitian (error {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1) > trace_tol:
        raise ValidationError(f"density matrix trace {tr} != 1")
    lam = float(np.linalg.eigvalsh(hermitize(rho))[0])
    if lam < -positivity_tol:
        raise ValidationError(f"density matrix has eigenvalue {lam:.3e}")


@dataclass
class EvolutionResult:
    """Snapshots of an RK4 run with metrics computed from the stored states.

    ``times`` are in units of ``1/Gamma`` (i.e. ``Gamma t``).
    """

    times: np.ndarray
    states: np.ndarray
    hamiltonian: np.ndarray
    initial_state: np.ndarray
    dt: float
    rhs_norms: np.ndarray
    trace_drift: float
    min_eigenvalue: float
    _records: Optional[list] = field(default=None, repr=False)

    @property
    def records(self) -> list:
        if self._records is None:
            c_max = metrics.capacity(self.hamiltonian)
            self._records = [metrics.evaluate(rho, self.initial_state, self.hamiltonian, c_max)
                             for rho in self.states]
        return self._records

    @property
    def stored_energy(self) -> np.ndarray:
        return np.array([r.stored_energy for r in self.records])

    @property
    def ergotropy(self) -> np.ndarray:
        return np.array([r.ergotropy for r in self.records])

    @property
    def utilization(self) -> np.ndarray:
        return np.array([r.utilization for r in self.records])

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diagonal(self.states, axis1=1, axis2=2))

    def time_to_steady_state(self, tol: float = 1e-6) -> float:
        """First recorded ``Gamma t`` with ``||rhs(rho)||_F < tol * Gamma``.

        Returns ``nan`` if the run never gets there.
        """
        hit = np.nonzero(self.rhs_norms < tol)[0]
        return float(self.times[hit[0]]) if hit.size else math.nan


def _rk4_run(gen: FeedbackGenerator, rho0: np.ndarray, n_steps: int, h: float,
             record_every: int):
    """Fixed-step RK4 in physical time step ``h``. Returns snapshots."""
    d = gen.dim
    use_superop = d * d <= SUPEROP_LIMIT
    if use_superop:
        L = gen.liouvillian()
        f = lambda v: L @ v
        y = vec(rho0).astype(complex)
        to_rho = lambda v: unvec(v, d)
        from_rho = vec
    else:
        f = gen.rhs
        y = rho0.astype(complex)
        to_rho = lambda r: r
        from_rho = lambda r: r

    states = [to_rho(y).copy()]
    for step in range(1, n_steps + 1):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        y = from_rho(hermitize(to_rho(y)))
        if step % record_every == 0 or step == n_steps:
            states.append(to_rho(y).copy())
    return np.array(states)


def evolve(rho0: np.ndarray, chain: ChainSpec, ctrl: ControlSpec, t_final: float,
           dt: float = 1e-2, record_every: Optional[int] = None,
           n_records: int = 201) -> EvolutionResult:
    """Integrate the feedback master equation from ``rho0`` up to ``Gamma t = t_final``.

    ``dt`` is the step in units of ``1/Gamma``. Snapshots are kept every
    ``record_every`` steps (default: about ``n_records`` snapshots). The
    zero- or finite-temperature generator is chosen from ``ctrl``.

    A snapshot eigenvalue below ``-1e-6`` triggers a restart with half the
    step, at most four times, then ``PositivityError``.
    """
    check_density_matrix(rho0)
    if t_final <= 0 or dt <= 0:
        raise ValidationError("t_final and dt must be positive")
    gen = make_generator(chain, ctrl)
    G = ctrl.decay_rate
    n_steps = max(1, int(round(t_final / dt)))
    if not math.isclose(n_steps * dt, t_final, rel_tol=1e-9):
        raise ValidationError(f"t_final={t_final} is not a multiple of dt={dt}")
    if record_every is None:
        record_every = max(1, n_steps // max(1, n_records - 1))

    worst = None
    for attempt in range(MAX_HALVINGS + 1):
        states = _rk4_run(gen, rho0, n_steps, dt / G, record_every)
        lam = np.array([np.linalg.eigvalsh(r)[0] for r in states])
        if lam.min() >= -POSITIVITY_TOL:
            break
        worst = (attempt, float(lam.min()), int(np.argmin(lam)))
        log.warning("positivity violated (min eig %.3e), halving dt to %g", lam.min(), dt / 2)
        dt /= 2
        n_steps *= 2
        record_every *= 2
    else:
        raise PositivityError(
            f"min eigenvalue {worst[1]:.3e} at snapshot {worst[2]} after "
            f"{MAX_HALVINGS} halvings (dt={dt * 2:g})"
        )

    steps = np.arange(len(states)) * record_every
    steps[-1] = n_steps
    times = steps * dt
    norms = np.array([np.linalg.norm(gen.rhs(r)) / G for r in states])
    drift = float(np.max(np.abs(np.trace(states, axis1=1, axis2=2) - np.trace(rho0))))
    return EvolutionResult(times=times, states=states, hamiltonian=gen.H,
                           initial_state=rho0, dt=dt, rhs_norms=norms,
                           trace_drift=drift, min_eigenvalue=float(lam.min()))


@dataclass(frozen=True)
class SteadyStateInfo:
    method: str  # "null-space", "solve" or "integration"
    multiplicity: int
    residual: float
    slowest_rate: float  # smallest |lambda| among the non-zero modes, if known


def _null_space(gen: FeedbackGenerator):
    """Eigenvalues/vectors of smallest modulus, sorted by ``|lambda|``.

    Large generators use shift-invert Arnoldi with a shift slightly off zero,
    since the generator itself is singular.
    """
    if gen.dim**2 <= DENSE_EIG_LIMIT:
        w, v = scipy.linalg.eig(gen.liouvillian(), check_finite=False)
    else:
        shift = -1e-6 * gen.ctrl.decay_rate
        w, v = scipy.sparse.linalg.eigs(gen.liouvillian_sparse(), k=6, sigma=shift)
    order = np.argsort(np.abs(w), kind="stable")
    return w[order], v[:, order]


def _solve_stationary(gen: FeedbackGenerator) -> Optional[np.ndarray]:
    """Solve ``L v = 0`` with the first row swapped for the trace condition.

    A well-conditioned system proves the stationary state is unique. Returns
    ``None`` when the system is singular or ill-conditioned.
    """
    d = gen.dim
    trace_row = np.zeros(d * d, dtype=complex)
    trace_row[:: d + 1] = 1.0
    rhs = np.zeros(d * d, dtype=complex)
    rhs[0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        try:
            if d * d <= DENSE_EIG_LIMIT:
                A = gen.liouvillian().copy()
                A[0, :] = trace_row
                v = scipy.linalg.solve(A, rhs, check_finite=False)
            else:
                A = gen.liouvillian_sparse().tolil()
                A[0, :] = trace_row
                v = scipy.sparse.linalg.spsolve(A.tocsc(), rhs)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, RuntimeWarning,
                scipy.sparse.linalg.MatrixRankWarning):
            return None
    if not np.all(np.isfinite(v)):
        return None
    return unvec(v, d)


def steady_state(chain: ChainSpec, ctrl: ControlSpec, return_info: bool = False,
                 t_fallback: float = 200.0, method: str = "eig"):
    """Stationary state of the feedback master equation.

    Primary route (N <= 6): the eigenvector of the column-stacked generator
    with the eigenvalue of smallest modulus, Hermitized and trace-normalized.
    Exactly one eigenvalue with ``|lambda| < 1e-9 Gamma`` is expected; if
    more are found the state is obtained instead by integrating from the
    maximally mixed state, and the multiplicity is reported in the info.

    ``method="solve"`` replaces the eigensolve by one linear solve with the
    trace condition built in. It is much faster, which matters for sweeps,
    and falls back to the eigensolve when the system is ill-conditioned.
    """
    if method not in ("eig", "solve"):
        raise ValidationError(f"unknown steady-state method {method!r}")
    gen = make_generator(chain, ctrl)
    G = ctrl.decay_rate
    d = gen.dim
    if method == "solve" and chain.n_sites <= NULL_SPACE_MAX_SITES:
        rho = _solve_stationary(gen)
        if rho is not None:
            rho = hermitize(rho)
            rho = rho / np.trace(rho).real
            residual = float(np.linalg.norm(gen.rhs(rho)))
            if residual < RESIDUAL_TOL * G:
                info = SteadyStateInfo("solve", 1, residual, math.nan)
                return (rho, info) if return_info else rho
        log.info("linear solve inconclusive; using the eigensolver")
    multiplicity = None
    slowest = math.nan
    if chain.n_sites <= NULL_SPACE_MAX_SITES:
        w, v = _null_space(gen)
        multiplicity = int(np.sum(np.abs(w) < NULL_TOL * G))
        if len(w) > 1:
            slowest = float(np.abs(w[1]))
        if multiplicity == 1:
            rho = hermitize(unvec(v[:, 0], d))
            rho = rho / np.trace(rho)
            residual = float(np.linalg.norm(gen.rhs(rho)))
            if residual < RESIDUAL_TOL * G:
                info = SteadyStateInfo("null-space", 1, residual, slowest)
                return (rho, info) if return_info else rho
            log.warning("null-space residual %.3e too large; integrating instead", residual)
        else:
            log.warning("null space has multiplicity %d; integrating instead", multiplicity)

    run = evolve(maximally_mixed(d), chain, ctrl, t_final=t_fallback, n_records=2)
    rho = run.states[-1]
    residual = float(np.linalg.norm(gen.rhs(rho)))
    info = SteadyStateInfo("integration", multiplicity if multiplicity is not None else -1,
                           residual, slowest)
    if multiplicity is None and residual > RESIDUAL_TOL * G:
        raise NumericalError(
            f"integration did not reach stationarity (residual {residual:.3e})"
        )
    return (rho, info) if return_info else rho
