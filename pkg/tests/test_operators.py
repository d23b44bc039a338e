import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbatt import (
    ChainSpec,
    ControlSpec,
    ValidationError,
    build_battery_hamiltonian,
    build_feedback_operator,
    build_pauli,
    spectrum,
    xxx_highest_energy,
)
from qbatt.operators import all_up, hermiticity_error, total_magnetization

SY = np.array([[0, -1j], [1j, 0]])
SX = np.array([[0, 1], [1, 0]])
I2 = np.eye(2)


def test_single_site_z():
    assert np.array_equal(build_pauli(1, "z", 1), np.diag([1, -1]))


def test_lowering_acts_on_second_site():
    op = build_pauli(2, "-", 2)
    assert np.allclose(op, np.kron(I2, [[0, 0], [1, 0]]))
    up_up = np.array([1, 0, 0, 0])
    assert np.allclose(op @ up_up, [0, 1, 0, 0])  # |up, down>


def test_pauli_squares_to_identity():
    sx = build_pauli(1, "x", 2)
    assert np.allclose(sx @ sx, np.eye(4))


def test_raising_is_adjoint_of_lowering():
    for j in (1, 2, 3):
        assert np.allclose(build_pauli(j, "+", 3), build_pauli(j, "-", 3).conj().T)


@pytest.mark.parametrize("site", [0, 3, -1])
def test_site_out_of_range(site):
    with pytest.raises(IndexError):
        build_pauli(site, "x", 2)


def test_unknown_axis():
    with pytest.raises(ValidationError):
        build_pauli(1, "w", 2)


def test_two_site_spectrum_ordering():
    H = build_battery_hamiltonian(ChainSpec(2, 1.0, 0.5))
    assert np.allclose(spectrum(H)[0], [-1.5, -0.5, 0.5, 1.5])


def test_decoupled_spins():
    H = build_battery_hamiltonian(ChainSpec(2, 1.0, 0.0))
    assert np.allclose(spectrum(H)[0], [-1, 0, 0, 1])


@pytest.mark.parametrize("J, ground", [(0.1, -0.9), (1.0, -3.0)])
def test_ground_energy_branches(J, ground):
    evals, _ = spectrum(build_battery_hamiltonian(ChainSpec(2, 1.0, J)))
    assert evals[0] == pytest.approx(ground, abs=1e-12)


def test_spectrum_of_identity():
    evals, vecs = spectrum(np.eye(5))
    assert np.allclose(evals, 1)
    assert np.allclose(vecs.conj().T @ vecs, np.eye(5))


def test_spectrum_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        spectrum(np.array([[0, 1], [0, 0]]))


@pytest.mark.parametrize("f, alpha, expected", [
    (1.0, math.pi, -SY),
    (1.0, 0.0, SY),
    (2.0, math.pi / 2, 2 * SX),
])
def test_feedback_operator(f, alpha, expected):
    ctrl = ControlSpec(feedback_strength=f, direction=alpha)
    assert np.allclose(build_feedback_operator(1, ctrl, 1), expected, atol=1e-15)
    assert np.allclose(build_feedback_operator(2, ctrl, 2), np.kron(I2, expected), atol=1e-15)


def test_xxx_conserves_magnetization():
    H = build_battery_hamiltonian(ChainSpec(4, 1.0, 0.8))
    M = total_magnetization(4)
    assert np.max(np.abs(H @ M - M @ H)) < 1e-12


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_xxx_highest_level_is_all_up(n):
    h, J = 1.0, 0.7
    evals, vecs = spectrum(build_battery_hamiltonian(ChainSpec(n, h, J)))
    assert abs(evals[-1] - xxx_highest_energy(n, h, J)) < 1e-10
    assert abs(vecs[0, -1]) ** 2 > 1 - 1e-10
    assert np.allclose(np.outer(vecs[:, -1], vecs[:, -1].conj()), all_up(n))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), h=st.floats(0.1, 3.0), J=st.floats(0.0, 3.0),
       gamma=st.floats(0.0, 1.0), delta=st.floats(-2.0, 2.0),
       f=st.floats(-3.0, 3.0), alpha=st.floats(-math.pi, math.pi))
def test_operators_are_hermitian(n, h, J, gamma, delta, f, alpha):
    H = build_battery_hamiltonian(ChainSpec(n, h, J, gamma, delta))
    assert hermiticity_error(H) < 1e-12
    ctrl = ControlSpec(feedback_strength=f, direction=alpha)
    for j in range(1, n + 1):
        assert hermiticity_error(build_feedback_operator(j, ctrl, n)) < 1e-12


@pytest.mark.parametrize("kwargs", [
    dict(n_sites=0), dict(n_sites=11), dict(field_strength=0.0), dict(coupling=-1.0),
    dict(gamma=1.5), dict(n_sites=2.5),
])
def test_chain_validation(kwargs):
    with pytest.raises(ValidationError):
        ChainSpec(**kwargs)


@pytest.mark.parametrize("kwargs", [
    dict(decay_rate=0.0), dict(detector_efficiency=0.0), dict(collection_efficiency=1.2),
    dict(thermal_occupation=-0.1), dict(feedback_strength=math.inf),
])
def test_control_validation(kwargs):
    with pytest.raises(ValidationError):
        ControlSpec(**kwargs)


def test_control_from_chi():
    ctrl = ControlSpec.from_chi(1.5, decay_rate=2.0, eta=0.64, collection_efficiency=0.8)
    assert ctrl.feedback_strength == 3.0
    assert ctrl.chi == 1.5
    assert ctrl.eta == pytest.approx(0.64)
    assert ctrl.detector_efficiency == pytest.approx(0.8)
