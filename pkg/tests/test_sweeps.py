import math

import numpy as np
import pytest

from qbatt import (
    Axis,
    ChainSpec,
    ControlSpec,
    ValidationError,
    critical_J_n2,
    find_critical_J,
    golden_section,
    grid_sweep,
    optimal_f_thermal,
    optimize_chi,
    scan_1d,
)
from qbatt import sweeps
from qbatt.dynamics import NumericalError
from qbatt.sweeps import argmax_set, steady_metric

PI = math.pi


def test_axis_is_endpoint_inclusive():
    assert np.allclose(Axis("alpha", -PI, PI, 5).values, [-PI, -PI / 2, 0, PI / 2, PI])
    with pytest.raises(ValidationError):
        Axis("chi", 1.0, 0.0, 3)
    with pytest.raises(ValidationError):
        Axis("chi", 0.0, 1.0, 0)


def test_single_point_grid():
    surf = grid_sweep(ChainSpec(2), ControlSpec(), Axis("alpha", 1.0, 1.0, 1),
                      Axis("chi", 0.5, 0.5, 1))
    assert surf.argmax == [(1.0, 0.5)]
    assert surf.values.shape == (1, 1)


def test_two_site_maximum_is_full_charge():
    surf = grid_sweep(ChainSpec(2, 1.0, 1.0), ControlSpec(), Axis("alpha", -PI, PI, 9),
                      Axis("chi", -2.0, 2.0, 9))
    assert surf.max_value == pytest.approx(5.0, abs=1e-9)
    assert not surf.failed


def test_landscape_is_even_in_alpha():
    surf = grid_sweep(ChainSpec(2, 1.0, 0.7), ControlSpec.from_chi(0.0, eta=0.6),
                      Axis("alpha", -PI, PI, 13), Axis("chi", -1.5, 2.0, 8),
                      metric="ergotropy")
    assert np.allclose(surf.values, surf.values[::-1], atol=1e-9)


def test_argmax_survives_positive_scaling():
    surf = grid_sweep(ChainSpec(2, 1.0, 0.3), ControlSpec.from_chi(0.0, eta=0.8),
                      Axis("alpha", -PI, PI, 9), Axis("chi", -2.0, 2.0, 17))
    assert argmax_set(surf.axes, 7.3 * surf.values) == surf.argmax


def test_failed_points_are_nan_and_skipped(monkeypatch):
    real = sweeps.steady_metric

    def flaky(chain, ctrl, metric, initial="ground", rho_0=None):
        if ctrl.chi == 0.5:
            raise NumericalError("no steady state")
        return real(chain, ctrl, metric, initial, rho_0)

    monkeypatch.setattr(sweeps, "steady_metric", flaky)
    surf = grid_sweep(ChainSpec(2), ControlSpec(), Axis("alpha", PI, PI, 1),
                      Axis("chi", 0.0, 1.0, 3))
    assert surf.failed == [(PI, 0.5)]
    assert math.isnan(surf.values[0, 1])
    assert surf.argmax == [(PI, 1.0)]


@pytest.mark.slow
def test_four_site_landscape_has_three_grid_optima():
    # coarse endpoint-inclusive grid through the optima; +pi and -pi are the same point
    surf = grid_sweep(ChainSpec(4, 1.0, 1.0), ControlSpec(), Axis("alpha", -PI, PI, 9),
                      Axis("chi", -2.0, 2.0, 9))
    found = sorted((round(a, 9), round(c, 9)) for a, c in surf.argmax)
    assert found == sorted([(0.0, -1.0), (round(-PI, 9), 1.0), (round(PI, 9), 1.0)])
    assert surf.multiplicity == 3


def test_golden_section_finds_parabola_peak():
    x, fx = golden_section(lambda t: -(t - 1.234) ** 2 + 2, 0.0, 5.0, 1e-8)
    assert x == pytest.approx(1.234, abs=1e-7)
    assert fx == pytest.approx(2.0)


def test_optimize_chi_thermal_matches_formula():
    ctrl = ControlSpec.from_chi(1.0, eta=0.64, collection_efficiency=0.8, thermal_occupation=0.2)
    opt = optimize_chi(ChainSpec(2, 1.0, 1.0), ctrl, metric="rho11")
    assert opt.feedback_effective
    assert opt.chi == pytest.approx(optimal_f_thermal(0.2, 0.64, 0.8), abs=1e-3)
    chi, value = opt
    assert chi == opt.chi and value == opt.value


def test_optimize_chi_reports_ineffective_feedback():
    opt = optimize_chi(ChainSpec(2, 1.0, 4.0), ControlSpec.from_chi(1.0, eta=0.8))
    assert not opt.feedback_effective
    assert opt.chi == 0.0
    assert opt.value == opt.value_at_zero
    assert opt.interior_value < opt.value_at_zero


def test_optimize_chi_flat_objective(monkeypatch):
    monkeypatch.setattr(sweeps, "steady_metric", lambda *a, **k: 0.25)
    opt = optimize_chi(ChainSpec(2), ControlSpec())
    assert not opt.feedback_effective
    assert opt.chi == 0.0


def test_optimize_chi_agrees_with_grid():
    chain = ChainSpec(2, 1.0, 0.5)
    ctrl = ControlSpec.from_chi(0.0, direction=2.5, eta=0.7)
    chi_axis = Axis("chi", 0.0, 5.0, 51)
    surf = grid_sweep(chain, ctrl, Axis("alpha", 2.5, 2.5, 1), chi_axis)
    opt = optimize_chi(chain, ctrl)
    step = chi_axis.values[1] - chi_axis.values[0]
    assert any(abs(opt.chi - c) <= step for _, c in surf.argmax)
    # and the closed form -1/cos(alpha)
    assert opt.chi == pytest.approx(-1 / math.cos(2.5), abs=1e-3)


@pytest.mark.slow
@pytest.mark.parametrize("eta", [0.5, 0.7, 0.8, 0.9])
def test_critical_J_matches_closed_form(eta):
    jc = find_critical_J(ChainSpec(2, 1.0, 1.0), ControlSpec.from_chi(1.0, eta=eta),
                         bracket=(0.5, 8.0))
    assert jc == pytest.approx(critical_J_n2(eta), abs=1e-3)


def test_critical_J_errors():
    chain = ChainSpec(2, 1.0, 1.0)
    with pytest.raises(ValidationError):
        find_critical_J(chain, ControlSpec.from_chi(1.0, eta=1.0))
    with pytest.raises(NumericalError, match=r"g\(0\.5\).*g\(1\.0\)"):
        find_critical_J(chain, ControlSpec.from_chi(1.0, eta=0.8), bracket=(0.5, 1.0))


def test_steady_metric_names():
    chain, ctrl = ChainSpec(2, 1.0, 1.0), ControlSpec.from_chi(1.0)
    assert steady_metric(chain, ctrl, "rho11") == pytest.approx(1.0)
    assert steady_metric(chain, ctrl, "utilization") == pytest.approx(1.0)
    assert steady_metric(chain, ctrl, "ratio") == pytest.approx(1.0)
    assert steady_metric(chain, ctrl, "stored_energy", initial="all_down") == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        steady_metric(chain, ctrl, "power")
    with pytest.raises(ValidationError):
        steady_metric(chain, ctrl, "stored_energy", initial="thermal")


def test_scan_full_use_at_perfect_detection():
    table = scan_1d(ChainSpec(4, 1.0, 1.0), ControlSpec.from_chi(1.0), "J", [0.3, 1.0, 2.5])
    arr = table.as_array()
    assert table.columns == ["J", "chi", "stored_energy", "ergotropy", "utilization", "ratio"]
    assert np.allclose(arr[:, 4], 1.0, atol=1e-8)
    assert np.allclose(arr[:, 5], 1.0, atol=1e-8)


def test_scan_other_parameters():
    chain, ctrl = ChainSpec(2, 1.0, 1.0), ControlSpec.from_chi(1.0, eta=0.8)
    by_gamma = scan_1d(chain, ctrl, "Gamma", [0.5, 2.0], metric_list=("rho11",)).as_array()
    # chi is held fixed, and rho11 depends on chi and eta only
    assert np.allclose(by_gamma[:, 2], 1 / 1.2**2)
    by_eta = scan_1d(chain, ctrl, "eta", [0.5, 1.0], metric_list=("rho11",)).as_array()
    assert np.allclose(by_eta[:, 2], [1 / 1.5**2, 1.0])
    with pytest.raises(ValidationError):
        scan_1d(chain, ctrl, "h", [1.0])


def test_scan_flags_failed_points():
    ctrl = ControlSpec.from_chi(1.0)
    table = scan_1d(ChainSpec(2, 1.0, 1.0), ctrl, "eta", [0.5, 1.5], metric_list=("rho11",))
    assert table.failed == [1.5]
    assert math.isnan(table.rows[1][2])
