"""Closed-form results for the two-site XXX battery and related scalar formulas.

Everything here is plain scalar arithmetic (the ODE transcription aside,
which works on a bare 4x4 array) so it can serve as an independent check
on the matrix machinery. Populations are ordered
``(up-up, up-down, down-up, down-down)``.

The finite-temperature formulas carry no explicit feedback angle; they
hold for ``alpha = pi`` (``cos(alpha) = -1``).
"""
from __future__ import annotations

import cmath
import math
from typing import Optional

import numpy as np

from .operators import ValidationError

SINGULAR_TOL = 1e-14


class SingularParameterError(ValidationError):
    """The formula's denominator vanishes at the requested parameters."""


def _denominator(chi, alpha, eta):
    den = 2 * chi**2 + 2 * chi * eta * math.cos(alpha) + eta
    if abs(den) < SINGULAR_TOL:
        raise SingularParameterError(
            f"2 chi^2 + 2 chi eta cos(alpha) + eta vanishes at chi={chi}, alpha={alpha}, eta={eta}"
        )
    return den


def xxx2_steady_populations(chi: float, alpha: float, eta: float):
    """Steady-state diagonal of the two-site XXX battery under feedback."""
    den = _denominator(chi, alpha, eta)
    mid = chi**2 + 2 * chi * eta * math.cos(alpha) + eta
    p11 = chi**4 / den**2
    p22 = chi**2 * mid / den**2
    p44 = mid**2 / den**2
    return p11, p22, p22, p44


def rho11_max(eta: float, alpha: float):
    """Best achievable up-up population at fixed ``(eta, alpha)``.

    Returns ``(value, chi_opt)`` with ``chi_opt = -1/cos(alpha)``.
    """
    c = math.cos(alpha)
    if abs(c) < 1e-12:
        raise SingularParameterError("cos(alpha) = 0: no finite optimal chi")
    return 1.0 / (2 - eta * c**2) ** 2, -1.0 / c


def _thermal_denominator(x, eta, eta_c, n_t):
    # in units of Gamma: x = f / Gamma
    den = 2 * x**2 - 2 * x * eta + (1 + 2 * n_t) * eta - 2 * n_t * eta * eta_c
    if abs(den) < SINGULAR_TOL:
        raise SingularParameterError("thermal steady-state denominator vanishes")
    return den


def thermal_steady_populations(f: float, decay_rate: float, eta: float, eta_c: float,
                               n_t: float):
    """Finite-temperature steady-state diagonal of the two-site XXX battery."""
    G = decay_rate
    x = f / G
    den = _thermal_denominator(x, eta, eta_c, n_t)
    p11 = (x**2 + n_t * eta - n_t * eta * eta_c) ** 2 / den**2
    p22 = -((-2 * x + 1) ** 2) * eta**2 / (4 * den**2) + 0.25
    p44 = (x**2 - 2 * x * eta + (1 + n_t) * eta - n_t * eta * eta_c) ** 2 / den**2
    return p11, p22, p22, p44


def thermal_mu(n_t: float, eta: float, eta_c: float) -> float:
    return 4 * n_t * eta * (1 - eta_c)


def optimal_f_thermal(n_t: float, eta: float, eta_c: float) -> float:
    """Feedback strength ``f / Gamma`` maximizing the thermal up-up population."""
    if not (0 < eta <= 1 and 0 < eta_c <= 1 and n_t >= 0):
        raise ValidationError("need 0 < eta, eta_c <= 1 and n_t >= 0")
    return 0.5 * (1 + math.sqrt(1 + thermal_mu(n_t, eta, eta_c)))


def rho11_max_thermal(eta: float, mu: float) -> float:
    if mu < 0:
        raise ValidationError("mu must be >= 0")
    s = math.sqrt(1 + mu)
    return 0.25 * (1 + eta * s / (1 + mu + (1 - eta) * s)) ** 2


def critical_J_n2(eta: float) -> Optional[float]:
    """Coupling ``J_c / h`` beyond which feedback stops raising the stored energy.

    Returns ``None`` at ``eta = 1``, where no finite critical value exists.
    """
    if not 0 < eta <= 1:
        raise ValidationError(f"eta must lie in (0, 1], got {eta}")
    if eta == 1:
        return None
    return (2 - eta) / (2 * (1 - eta))


def _vartheta(chi, alpha, eta):
    return chi**2 / _denominator(chi, alpha, eta)


def deltaE1_deltaE2(chi: float, alpha: float, eta: float, J: float, h: float):
    """Steady-state stored energy from the two possible two-site ground states.

    ``dE1`` starts from down-down (ground for ``J < h/4``), ``dE2`` from the
    singlet (ground for ``J > h/4``).
    """
    den = _denominator(chi, alpha, eta)
    th = chi**2 / den
    dE1 = 2 * (h - 2 * J) * th * (eta + 2 * chi * eta * math.cos(alpha)) / den \
        + 4 * (h - J) * th**2
    dE2 = -h + 4 * J + 4 * J * th**2 + 2 * (h - 2 * J) * th
    return dE1, dE2


def xxx_highest_energy(n_sites: int, h: float, J: float) -> float:
    if n_sites < 1:
        raise ValidationError("n_sites must be >= 1")
    return n_sites * h / 2 + (n_sites - 1) * J


def xxx2_ode_rhs(rho: np.ndarray, h: float, J: float, f: float, alpha: float,
                 decay_rate: float, eta: float, gamma: float = 0.0,
                 delta: float = 1.0) -> np.ndarray:
    """Time derivative of the two-site XXX density matrix, element by element.

    ``rho`` is a 4x4 array in the basis (up-up, up-down, down-up, down-down).
    Only the XXX chain is covered.
    """
    if gamma != 0 or delta != 1:
        raise ValidationError("xxx2_ode_rhs covers only the XXX chain (gamma=0, delta=1)")
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValidationError(f"expected a 4x4 matrix, got {rho.shape}")
    G = decay_rate
    c, s = math.cos(alpha), math.sin(alpha)
    e2 = cmath.exp(2j * alpha)
    k = f**2 / (G * eta)
    r = lambda a, b: rho[a - 1, b - 1]

    out = np.zeros((4, 4), dtype=complex)
    out[0, 0] = -2 * G * r(1, 1) - 4 * f * c * r(1, 1) + k * (r(2, 2) + r(3, 3) - 2 * r(1, 1))
    out[1, 1] = (2j * J * (r(2, 3) - r(3, 2)) + (G + 2 * f * c) * (r(1, 1) - r(2, 2))
                 + k * (r(1, 1) - 2 * r(2, 2) + r(4, 4)))
    out[2, 2] = (-2j * J * (r(2, 3) - r(3, 2)) + (G + 2 * f * c) * (r(1, 1) - r(3, 3))
                 + k * (r(1, 1) - 2 * r(3, 3) + r(4, 4)))
    out[3, 3] = -out[0, 0] - out[1, 1] - out[2, 2]

    out[0, 1] = (-1j * (h * r(1, 2) + 2 * J * (r(1, 2) - r(1, 3)))
                 - f * ((3 * r(1, 2) + r(2, 1)) * c + 1j * (r(1, 2) + r(2, 1)) * s)
                 - k * (2 * r(1, 2) + e2 * r(2, 1) - r(3, 4))
                 - 1.5 * G * r(1, 2))
    out[0, 2] = (-1j * (h * r(1, 3) + 2 * J * (r(1, 3) - r(1, 2)))
                 - f * ((3 * r(1, 3) + r(3, 1)) * c + 1j * (r(1, 3) + r(3, 1)) * s)
                 - k * (2 * r(1, 3) + e2 * r(3, 1) - r(2, 4))
                 - 1.5 * G * r(1, 3))
    out[0, 3] = (-cmath.exp(1j * alpha) * f * (2 * r(1, 4) + r(2, 3) + r(3, 2))
                 - 2j * h * r(1, 4) - G * r(1, 4)
                 - k * (2 * r(1, 4) + e2 * (r(2, 3) + r(3, 2))))
    out[1, 2] = (2j * J * (r(2, 2) - r(3, 3)) - G * r(2, 3)
                 + k * (-2 * r(2, 3) - cmath.exp(-2j * alpha) * (r(1, 4) + cmath.exp(4j * alpha) * r(4, 1)))
                 - f * c * (r(1, 4) + 2 * r(2, 3) + r(4, 1))
                 + 1j * f * s * (r(1, 4) - r(4, 1)))
    out[1, 3] = ((r(1, 3) - r(2, 4) / 2) * G
                 - 1j * (h * r(2, 4) + 2 * J * (r(3, 4) - r(2, 4)))
                 + k * (r(1, 3) - 2 * r(2, 4) - e2 * r(4, 2))
                 + f * ((2 * r(1, 3) - r(2, 4) - r(4, 2)) * c - 1j * (r(2, 4) + r(4, 2)) * s))
    out[2, 3] = ((r(1, 2) - r(3, 4) / 2) * G
                 - 1j * (h * r(3, 4) + 2 * J * (r(2, 4) - r(3, 4)))
                 + k * (r(1, 2) - 2 * r(3, 4) - e2 * r(4, 3))
                 + f * ((2 * r(1, 2) - r(3, 4) - r(4, 3)) * c - 1j * (r(3, 4) + r(4, 3)) * s))

    # lower triangle: rho_dot_ba = conj(rho_dot_ab)
    for a in range(4):
        for b in range(a + 1, 4):
            out[b, a] = np.conj(out[a, b])
    return out


def xxx2_stored_energy(rho_inf: np.ndarray, rho_0: np.ndarray, h: float, J: float) -> float:
    """Stored energy of the two-site XXX battery from matrix elements."""

    def energy(rho):
        r = lambda a, b: rho[a - 1][b - 1]
        return ((J + h) * r(1, 1) - J * r(2, 2) + 2 * J * r(3, 2) + 2 * J * r(2, 3)
                - J * r(3, 3) + (J - h) * r(4, 4))

    return float(np.real(energy(rho_inf) - energy(rho_0)))
