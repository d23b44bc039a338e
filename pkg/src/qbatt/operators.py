"""Spin-chain operators: local Paulis, the battery Hamiltonian and feedback fields.

Basis convention: site 1 is the leftmost tensor factor and the single-site
basis is ``(|up>, |down>)``, so computational index 0 is ``|up up ... up>``
and ``sigma_z = diag(1, -1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SITES = 10
HERMITIAN_TOL = 1e-12

_SINGLE = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    # sigma^+ |down> = |up>
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}


class ValidationError(ValueError):
    """Raised when parameters or operator inputs violate their contract."""


@dataclass(frozen=True)
class ChainSpec:
    """Open-boundary spin chain with Hamiltonian

    H_B = (h/2) sum_j sz_j
          + J sum_j [(1+gamma) sx_j sx_{j+1} + (1-gamma) sy_j sy_{j+1} + delta sz_j sz_{j+1}]

    ``gamma=0, delta=1`` is the XXX chain, ``delta=0`` the XY chain.
    """

    n_sites: int = 2
    field_strength: float = 1.0
    coupling: float = 1.0
    gamma: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 1:
            raise ValidationError(f"n_sites must be a positive integer, got {self.n_sites}")
        if self.n_sites > MAX_SITES:
            raise ValidationError(f"n_sites={self.n_sites} exceeds the dense cap of {MAX_SITES}")
        if not self.field_strength > 0:
            raise ValidationError(f"field_strength must be > 0, got {self.field_strength}")
        if not self.coupling >= 0:
            raise ValidationError(f"coupling must be >= 0, got {self.coupling}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not math.isfinite(self.delta):
            raise ValidationError(f"delta must be finite, got {self.delta}")

    @property
    def dim(self) -> int:
        return 2**self.n_sites

    @property
    def is_xxx(self) -> bool:
        return self.gamma == 0 and self.delta == 1


@dataclass(frozen=True)
class ControlSpec:
    """Homodyne feedback and measurement settings.

    ``feedback_strength`` is ``f`` in energy units; ``chi = f / decay_rate``.
    The total efficiency is ``eta = collection_efficiency * detector_efficiency``.
    ``thermal_occupation`` is the mean photon number of the reservoir that
    receives the uncollected photons.
    """

    feedback_strength: float = 0.0
    direction: float = math.pi
    decay_rate: float = 1.0
    detector_efficiency: float = 1.0
    collection_efficiency: float = 1.0
    thermal_occupation: float = 0.0

    def __post_init__(self):
        if not self.decay_rate > 0:
            raise ValidationError(f"decay_rate must be > 0, got {self.decay_rate}")
        for name in ("detector_efficiency", "collection_efficiency"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {value}")
        if not self.thermal_occupation >= 0:
            raise ValidationError(
                f"thermal_occupation must be >= 0, got {self.thermal_occupation}"
            )
        if not (math.isfinite(self.feedback_strength) and math.isfinite(self.direction)):
            raise ValidationError("feedback_strength and direction must be finite")

    @classmethod
    def from_chi(cls, chi: float, direction: float = math.pi, decay_rate: float = 1.0,
                 eta: float = 1.0, collection_efficiency: float = 1.0,
                 thermal_occupation: float = 0.0) -> "ControlSpec":
        """Build from the dimensionless strength ``chi`` and total efficiency ``eta``.

        The detector efficiency is set to ``eta / collection_efficiency``.
        """
        return cls(feedback_strength=chi * decay_rate, direction=direction,
                   decay_rate=decay_rate,
                   detector_efficiency=eta / collection_efficiency,
                   collection_efficiency=collection_efficiency,
                   thermal_occupation=thermal_occupation)

    @property
    def eta(self) -> float:
        return self.collection_efficiency * self.detector_efficiency

    @property
    def chi(self) -> float:
        return self.feedback_strength / self.decay_rate

    @property
    def is_zero_temperature(self) -> bool:
        return self.thermal_occupation == 0


def _check_sites(n_sites: int):
    if int(n_sites) != n_sites or n_sites < 1:
        raise ValidationError(f"n_sites must be a positive integer, got {n_sites}")
    if n_sites > MAX_SITES:
        raise ValidationError(f"n_sites={n_sites} exceeds the dense cap of {MAX_SITES}")


def embed(local: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """Place a 2x2 operator at ``site`` (1-based) of an ``n_sites`` chain."""
    _check_sites(n_sites)
    if not 1 <= site <= n_sites:
        raise IndexError(f"site {site} out of range 1..{n_sites}")
    left = np.eye(2 ** (site - 1), dtype=complex)
    right = np.eye(2 ** (n_sites - site), dtype=complex)
    return np.kron(np.kron(left, local), right)


@lru_cache(maxsize=256)
def _pauli_cached(site: int, axis: str, n_sites: int) -> np.ndarray:
    op = embed(_SINGLE[axis], site, n_sites)
    op.flags.writeable = False
    return op


def build_pauli(site: int, axis: str, n_sites: int) -> np.ndarray:
    """Return ``sigma^axis`` acting on ``site`` (1-based), identity elsewhere.

    ``axis`` is one of ``"x", "y", "z", "+", "-"``. The returned array is
    read-only and shared between calls.
    """
    if axis not in _SINGLE:
        raise ValidationError(f"unknown Pauli axis {axis!r}")
    _check_sites(n_sites)
    if not 1 <= site <= n_sites:
        raise IndexError(f"site {site} out of range 1..{n_sites}")
    return _pauli_cached(int(site), axis, int(n_sites))


def build_battery_hamiltonian(spec: ChainSpec) -> np.ndarray:
    n = spec.n_sites
    h, J = spec.field_strength, spec.coupling
    H = np.zeros((spec.dim, spec.dim), dtype=complex)
    for j in range(1, n + 1):
        H += 0.5 * h * build_pauli(j, "z", n)
    for j in range(1, n):
        H += J * (1 + spec.gamma) * build_pauli(j, "x", n) @ build_pauli(j + 1, "x", n)
        H += J * (1 - spec.gamma) * build_pauli(j, "y", n) @ build_pauli(j + 1, "y", n)
        H += J * spec.delta * build_pauli(j, "z", n) @ build_pauli(j + 1, "z", n)
    # kill rounding asymmetry from the products
    return 0.5 * (H + H.conj().T)


def build_feedback_operator(site: int, ctrl: ControlSpec, n_sites: int) -> np.ndarray:
    """``F_j = f [sin(alpha) sigma_x + cos(alpha) sigma_y]`` at ``site``."""
    f, alpha = ctrl.feedback_strength, ctrl.direction
    local = f * (math.sin(alpha) * _SINGLE["x"] + math.cos(alpha) * _SINGLE["y"])
    return embed(local, site, n_sites)


def total_magnetization(n_sites: int) -> np.ndarray:
    return sum(build_pauli(j, "z", n_sites) for j in range(1, n_sites + 1))


def hermiticity_error(A: np.ndarray) -> float:
    return float(np.max(np.abs(A - A.conj().T))) if A.size else 0.0


def spectrum(H: np.ndarray, tol: float = HERMITIAN_TOL):
    """Eigen-decomposition of a Hermitian matrix.

    Returns
    -------
    (evals, evecs)
        Eigenvalues in ascending order and the matching orthonormal
        eigenvectors as columns.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {H.shape}")
    err = hermiticity_error(H)
    if err > tol * max(1.0, float(np.max(np.abs(H)))):
        raise ValidationError(f"matrix is not Hermitian (max |A - A^dag| = {err:.3e})")
    return np.linalg.eigh(H)


def basis_state(index: int, n_sites: int) -> np.ndarray:
    """Projector onto computational basis state ``index`` (0 = all up)."""
    dim = 2**n_sites
    rho = np.zeros((dim, dim), dtype=complex)
    rho[index, index] = 1.0
    return rho


def all_up(n_sites: int) -> np.ndarray:
    return basis_state(0, n_sites)


def all_down(n_sites: int) -> np.ndarray:
    return basis_state(2**n_sites - 1, n_sites)


def ground_state(H: np.ndarray) -> np.ndarray:
    """Projector onto the lowest eigenvector of ``H``.

    For a degenerate ground level the first eigenvector returned by the
    eigensolver is used.
    """
    _, vecs = spectrum(H)
    psi = vecs[:, 0]
    return np.outer(psi, psi.conj())
