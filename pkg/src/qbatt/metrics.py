"""Battery figures of merit: stored energy, ergotropy, capacity and utilization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .operators import ValidationError, spectrum

RATIO_FLOOR = 1e-12
IMAG_TOL = 1e-10


def _check_same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"dimension mismatch: {sorted(shapes)}")


def expectation(H: np.ndarray, rho: np.ndarray) -> float:
    value = np.trace(H @ rho)
    if abs(value.imag) > IMAG_TOL * max(1.0, abs(value.real)):
        raise ValidationError(f"expectation value has imaginary part {value.imag:.3e}")
    return float(value.real)


def stored_energy(rho_t: np.ndarray, rho_0: np.ndarray, H: np.ndarray) -> float:
    """``Tr[H rho_t] - Tr[H rho_0]``."""
    _check_same_shape(rho_t, rho_0, H)
    return expectation(H, rho_t) - expectation(H, rho_0)


@dataclass(frozen=True)
class PassiveDecomposition:
    populations: np.ndarray  # descending
    energies: np.ndarray  # ascending

    @property
    def passive_energy(self) -> float:
        return float(np.dot(self.populations, self.energies))


def passive_decomposition(rho: np.ndarray, H: np.ndarray) -> PassiveDecomposition:
    """Pair the state eigenvalues (descending) with the energies (ascending).

    Sorting is stable, so ties keep their eigensolver order; the passive
    energy does not depend on how ties are broken.
    """
    _check_same_shape(rho, H)
    r = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    r = r[np.argsort(-r, kind="stable")]
    eps, _ = spectrum(H)
    return PassiveDecomposition(populations=r, energies=np.sort(eps, kind="stable"))


def ergotropy(rho: np.ndarray, H: np.ndarray) -> float:
    """Maximum energy extractable from ``rho`` by a unitary."""
    passive = passive_decomposition(rho, H)
    return expectation(H, rho) - passive.passive_energy


def passive_state(rho: np.ndarray, H: np.ndarray) -> np.ndarray:
    passive = passive_decomposition(rho, H)
    _, vecs = spectrum(H)
    return (vecs * passive.populations) @ vecs.conj().T


def capacity(H: np.ndarray) -> float:
    """Spectral width ``E_max - E_min``."""
    eps, _ = spectrum(H)
    return float(eps[-1] - eps[0])


def utilization(delta_e: float, c_max: float) -> float:
    if c_max == 0:
        raise ValidationError("utilization undefined for zero capacity")
    return delta_e / c_max


@dataclass(frozen=True)
class MetricsRecord:
    stored_energy: float
    ergotropy: float
    capacity: float
    utilization: float
    extraction_ratio: Optional[float]

    @property
    def ratio_defined(self) -> bool:
        return self.extraction_ratio is not None


def evaluate(rho: np.ndarray, rho_0: np.ndarray, H: np.ndarray,
             c_max: Optional[float] = None) -> MetricsRecord:
    """All metrics of ``rho`` relative to the initial state ``rho_0``.

    The extraction ratio ``ergotropy / stored_energy`` is ``None`` when
    ``|stored_energy| < 1e-12``.
    """
    if c_max is None:
        c_max = capacity(H)
    de = stored_energy(rho, rho_0, H)
    erg = ergotropy(rho, H)
    ratio = erg / de if abs(de) >= RATIO_FLOOR else None
    return MetricsRecord(stored_energy=de, ergotropy=erg, capacity=c_max,
                         utilization=utilization(de, c_max), extraction_ratio=ratio)


def fidelity_with_pure(rho: np.ndarray, psi: np.ndarray) -> float:
    return float(np.real(psi.conj() @ rho @ psi))


def ratio_or_nan(record: MetricsRecord) -> float:
    return math.nan if record.extraction_ratio is None else record.extraction_ratio
