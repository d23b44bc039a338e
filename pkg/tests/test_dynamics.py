import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_density, random_hermitian
from qbatt import (
    ChainSpec,
    ControlSpec,
    PositivityError,
    ValidationError,
    all_down,
    all_up,
    build_battery_hamiltonian,
    build_pauli,
    capacity,
    evolve,
    feedback_me_rhs,
    ground_state,
    steady_state,
    thermal_me_rhs,
    xxx2_steady_populations,
)
from qbatt.dynamics import FeedbackGenerator, check_density_matrix, dissipator, unvec, vec

PI = math.pi
DOWN = np.diag([0.0, 1.0]).astype(complex)
UP = np.diag([1.0, 0.0]).astype(complex)
SM = np.array([[0, 0], [1, 0]], dtype=complex)


def plain_lindblad(rho, chain, rate):
    H = build_battery_hamiltonian(chain)
    out = -1j * (H @ rho - rho @ H)
    for j in range(1, chain.n_sites + 1):
        s = build_pauli(j, "-", chain.n_sites)
        sd = s.conj().T
        out += rate * (s @ rho @ sd - 0.5 * (sd @ s @ rho + rho @ sd @ s))
    return out


def test_dissipator_examples(rng):
    assert np.allclose(dissipator(SM, UP), DOWN - UP)
    assert np.allclose(dissipator(SM, DOWN), 0)
    o = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    assert abs(np.trace(dissipator(o, random_density(4, rng)))) < 1e-13


def test_dissipator_dimension_mismatch():
    with pytest.raises(ValidationError):
        dissipator(SM, np.eye(4))


def test_no_feedback_is_plain_decay(rng):
    chain = ChainSpec(3, 1.0, 0.7)
    ctrl = ControlSpec(feedback_strength=0.0, direction=1.1, decay_rate=0.6,
                       detector_efficiency=0.5)
    rho = random_density(8, rng)
    assert np.max(np.abs(feedback_me_rhs(rho, chain, ctrl) - plain_lindblad(rho, chain, 0.6))) \
        < 1e-14


def test_locked_state_is_stationary():
    out = feedback_me_rhs(all_up(2), ChainSpec(2, 1.0, 1.0), ControlSpec.from_chi(1.0))
    assert np.max(np.abs(out)) < 1e-14


def test_zero_temperature_rhs_refuses_thermal_control(rng):
    ctrl = ControlSpec.from_chi(1.0, eta=0.5, collection_efficiency=0.5, thermal_occupation=0.1)
    with pytest.raises(ValidationError):
        feedback_me_rhs(random_density(4, rng), ChainSpec(2), ctrl)


def test_thermal_reduces_to_zero_temperature(rng):
    chain = ChainSpec(3, 1.0, 0.4, gamma=0.3, delta=0.0)
    ctrl = ControlSpec.from_chi(0.8, direction=2.0, eta=0.7)
    rho = random_density(8, rng)
    diff = thermal_me_rhs(rho, chain, ctrl) - feedback_me_rhs(rho, chain, ctrl)
    assert np.max(np.abs(diff)) < 1e-14


def test_thermal_single_spin_balance():
    # almost nothing collected: the spin thermalizes with the reservoir
    ctrl = ControlSpec(feedback_strength=0.0, collection_efficiency=1e-9, thermal_occupation=1.0)
    rho = steady_state(ChainSpec(1, 1.0, 0.0), ctrl)
    assert rho[0, 0].real == pytest.approx(1 / 3, abs=1e-8)


def test_liouvillian_matches_rhs(rng):
    for chain, ctrl in [
        (ChainSpec(2, 1.0, 1.0), ControlSpec.from_chi(1.2, direction=0.4, eta=0.6)),
        (ChainSpec(3, 1.0, 0.3, gamma=0.5, delta=0.0),
         ControlSpec.from_chi(0.5, eta=0.5, collection_efficiency=0.7, thermal_occupation=0.4)),
    ]:
        gen = FeedbackGenerator(chain, ctrl, thermal=True)
        rho = random_density(chain.dim, rng)
        assert np.allclose(unvec(gen.liouvillian() @ vec(rho), chain.dim), gen.rhs(rho),
                           atol=1e-13)
        assert np.allclose(gen.liouvillian_sparse().toarray(), gen.liouvillian(), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), J=st.floats(0, 3), gamma=st.floats(0, 1),
       delta=st.sampled_from([0.0, 1.0]), chi=st.floats(-2, 3),
       alpha=st.floats(-PI, PI), eta_c=st.floats(0.05, 1), eta_d=st.floats(0.05, 1),
       n_t=st.floats(0, 2), seed=st.integers(0, 2**31))
def test_generator_trace_and_hermiticity(n, J, gamma, delta, chi, alpha, eta_c, eta_d, n_t,
                                         seed):
    rng = np.random.default_rng(seed)
    chain = ChainSpec(n, 1.0, J, gamma, delta)
    ctrl = ControlSpec.from_chi(chi, direction=alpha, eta=eta_c * eta_d,
                                collection_efficiency=eta_c, thermal_occupation=n_t)
    X = random_hermitian(chain.dim, rng)
    out = thermal_me_rhs(X, chain, ctrl)
    scale = max(1.0, np.max(np.abs(out)))
    assert abs(np.trace(out)) < 1e-12 * scale
    assert np.max(np.abs(out - out.conj().T)) < 1e-12 * scale


def test_evolve_reaches_full_charge():
    chain = ChainSpec(2, 1.0, 1.0)
    H = build_battery_hamiltonian(chain)
    run = evolve(ground_state(H), chain, ControlSpec.from_chi(1.0), 20.0)
    assert abs(run.stored_energy[-1] - capacity(H)) < 1e-6
    assert abs(run.utilization[-1] - 1) < 1e-6
    assert run.trace_drift < 1e-8
    assert np.all(np.diff(run.times) > 0)
    assert run.times[-1] == pytest.approx(20.0)


def test_evolve_leaves_dark_state_alone():
    chain = ChainSpec(3, 1.0, 0.5)
    run = evolve(all_down(3), chain, ControlSpec(), 5.0, n_records=11)
    for rho in run.states:
        assert np.allclose(rho, all_down(3), atol=1e-14)


def test_decay_attracts_every_state(rng):
    # needs H to conserve magnetization, otherwise all-down is not stationary
    chain = ChainSpec(3, 1.0, 0.8)
    ctrl = ControlSpec(decay_rate=1.5)
    run = evolve(random_density(8, rng), chain, ctrl, 50.0, dt=2e-2, n_records=3)
    assert run.states[-1][-1, -1].real > 1 - 1e-6


def test_evolve_metrics_come_from_states():
    chain = ChainSpec(2, 1.0, 0.1)
    H = build_battery_hamiltonian(chain)
    rho0 = ground_state(H)
    run = evolve(rho0, chain, ControlSpec.from_chi(0.7, eta=0.9), 3.0, n_records=7)
    k = 4
    assert run.stored_energy[k] == pytest.approx(np.trace(H @ (run.states[k] - rho0)).real)
    assert np.allclose(run.populations[k], np.real(np.diag(run.states[k])))
    assert len(run.records) == len(run.times)


def test_evolve_validates_input():
    chain = ChainSpec(2)
    with pytest.raises(ValidationError):
        evolve(2 * all_up(2), chain, ControlSpec(), 1.0)
    with pytest.raises(ValidationError):
        evolve(all_up(2), chain, ControlSpec(), 1.0, dt=0.3)


def test_evolve_gives_up_after_four_halvings():
    # Gamma << h, so a step of 1/Gamma is far outside RK4 stability
    chain = ChainSpec(2, 1.0, 1.0)
    rho0 = np.full((4, 4), 0.25, dtype=complex)
    with pytest.raises(PositivityError):
        evolve(rho0, chain, ControlSpec(decay_rate=0.01), 4.0, dt=1.0)


def test_steady_state_examples():
    chain = ChainSpec(2, 1.0, 1.0)
    rho, info = steady_state(chain, ControlSpec.from_chi(1.0), return_info=True)
    assert np.allclose(rho, all_up(2), atol=1e-10)
    assert info.method == "null-space" and info.multiplicity == 1
    assert np.allclose(steady_state(chain, ControlSpec.from_chi(0.0)), all_down(2), atol=1e-10)
    rho = steady_state(chain, ControlSpec.from_chi(1.0, eta=0.8))
    assert rho[0, 0].real == pytest.approx(1 / 1.2**2, abs=1e-10)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_steady_state_contract(n, rng):
    chain = ChainSpec(n, 1.0, rng.uniform(0.2, 2), gamma=0.3, delta=0.0)
    ctrl = ControlSpec.from_chi(rng.uniform(0.2, 2), direction=rng.uniform(-PI, PI),
                                decay_rate=0.7, eta=0.6, collection_efficiency=0.8,
                                thermal_occupation=0.2)
    rho, info = steady_state(chain, ctrl, return_info=True)
    check_density_matrix(rho)
    assert info.residual < 1e-9 * ctrl.decay_rate
    assert info.multiplicity == 1
    fast = steady_state(chain, ctrl, method="solve")
    assert np.allclose(fast, rho, atol=1e-9)


def test_steady_state_unknown_method():
    with pytest.raises(ValidationError):
        steady_state(ChainSpec(2), ControlSpec(), method="guess")


def test_steady_state_grid_matches_closed_form():
    chain = ChainSpec(2, 1.0, 0.3)
    for chi in (0.0, 0.5, 1.5):
        for alpha in (0.0, PI / 2, 2.0):
            for eta in (0.3, 1.0):
                rho = steady_state(chain, ControlSpec.from_chi(chi, direction=alpha, eta=eta))
                p = xxx2_steady_populations(chi, alpha, eta)
                assert np.allclose(np.real(np.diag(rho)), p, atol=1e-8)
                assert rho[1, 1].real == pytest.approx(rho[2, 2].real, abs=1e-10)


def test_utilization_stays_in_range_along_evolution():
    chain = ChainSpec(2, 1.0, 1.0)
    H = build_battery_hamiltonian(chain)
    for ctrl in (ControlSpec.from_chi(1.0), ControlSpec.from_chi(0.6, direction=2.5, eta=0.7)):
        run = evolve(ground_state(H), chain, ctrl, 10.0, n_records=101)
        assert np.all(run.utilization >= -1e-12)
        assert np.all(run.utilization <= 1 + 1e-12)
