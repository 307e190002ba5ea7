import numpy as np
import pandas as pd
import pytest

from entropy_audit import (
    REPORT_COLUMNS,
    TestFunction,
    YoungMeasureEstimate,
    audit,
    bin_to_grid,
    crafted_expansion_shock,
    default_alphas,
    default_test_functions,
    fit_grid_constant,
    initial_recovery,
    measure_valued_residual,
    minimum_residual,
    sgn_form_gap,
    weak_form_residual,
    young_concentration,
)
from errors import DomainError
from flux_model import FluxModel, MollifierKernel, RateFunction, SpeedField, closure_from_rate, well_closure
from fv_solver import Grid1D, GridSolution, solve_series


@pytest.fixture(scope="module")
def step_model():
    return FluxModel(SpeedField.step((2.0, 1.0), (0.0, 0.5)), closure_from_rate(RateFunction("indicator")))


@pytest.fixture(scope="module")
def crafted():
    return crafted_expansion_shock(n_cells=1600)


def test_test_function_shape():
    J = TestFunction(0.25, 0.1, 1.0)
    assert J.id == "c0.25_w0.1"
    assert J(0.0, 0.25) == pytest.approx(1.0)
    assert J(0.4, 0.25) == pytest.approx(1.0)
    assert J(0.95, 0.25) == 0.0
    assert J(0.0, 0.35) == 0.0
    assert J(0.0, 1.25) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        TestFunction(0.5, 0.6, 1.0)
    with pytest.raises(DomainError):
        TestFunction(0.5, 0.1, 0.0)


def test_test_function_derivatives():
    J = TestFunction(0.5, 0.1, 1.0)
    h = 1e-6
    t, x = 0.7, 0.54
    assert J.dx(t, x) == pytest.approx((J(t, x + h) - J(t, x - h)) / (2 * h), rel=1e-5)
    assert J.dt(t, x) == pytest.approx((J(t + h, x) - J(t - h, x)) / (2 * h), rel=1e-5)


def test_default_library():
    tests = default_test_functions(0.4)
    assert len(tests) == 9
    assert len({J.id for J in tests}) == 9


def test_default_alphas_span_envelope(step_model):
    grid = Grid1D(100)
    rho0 = np.where(grid.centers < 0.5, 1.0 / 3.0, 2.0)
    alphas = default_alphas(step_model, rho0)
    assert alphas.size == 12
    assert alphas[0] == 0.0
    assert alphas[-1] == pytest.approx(0.8, abs=0.02)


def test_default_alphas_on_mollified_riemann_data(step_model):
    grid = Grid1D(200)
    rho0 = np.where(grid.centers < 0.5, 1.0 / 3.0, 2.0)
    alphas = default_alphas(step_model.mollified(MollifierKernel(0.05)), rho0)
    assert alphas.size == 12
    assert alphas[-1] == pytest.approx(0.8, abs=0.02)
    assert alphas[-1] < 1.0


def test_audit_with_default_library_on_riemann_data(step_model):
    kernel = MollifierKernel(0.05)
    grid = Grid1D(200)
    series = solve_series(step_model, kernel, np.where(grid.centers < 0.5, 1.0 / 3.0, 2.0), 0.2, grid, 20)
    report = audit(series, step_model.mollified(kernel), threads=2)
    assert len(report) == 12 * 9
    assert report["alpha"].max() < 1.0


def test_crafted_profile_is_weak_but_not_entropic(crafted):
    model, series = crafted
    J = TestFunction(0.5, 0.2, series.t_end)
    assert abs(weak_form_residual(series, model, J)) < 0.005
    report = audit(series, model, alphas=[0.5], tests=[J])
    assert minimum_residual(report) < -0.02


def test_fv_solution_passes_the_audit(step_model):
    kernel = MollifierKernel(0.05)
    grid = Grid1D(200)
    series = solve_series(step_model, kernel, np.where(grid.centers < 0.5, 1.0 / 3.0, 2.0), 0.2, grid, 20)
    tests = [J for J in default_test_functions(0.2) if J.width >= 0.1]
    report = audit(series, step_model.mollified(kernel), alphas=[0.3, 0.5, 0.7, 1.5], tests=tests, threads=4)
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 18
    assert set(report["branch"]) == {"plus"}
    assert report["alpha"].is_monotonic_increasing
    assert report.attrs["n_cells"] == 200
    assert minimum_residual(report) >= -0.02


def test_fit_grid_constant():
    report = pd.DataFrame({"alpha": [0.1, 0.2], "branch": ["plus"] * 2, "J_id": ["a", "b"], "residual": [0.3, -0.02]})
    assert fit_grid_constant(report, 0.01, 0.01) == pytest.approx(1.0)
    assert fit_grid_constant(report.iloc[:1], 0.01, 0.01) == 0.0
    assert np.isnan(minimum_residual(report.iloc[:0]))


def test_sign_form_matches_absolute_value_for_increasing_flux(step_model):
    k = np.linspace(0.0, 5.0, 51)
    assert sgn_form_gap(step_model, 0.5, [0.1, 0.3, 0.6, 0.9], k) < 1e-12


def test_sign_form_differs_for_wells():
    model = FluxModel(SpeedField.step((2.0, 1.0), (0.0, 0.5)), well_closure(1.0, 1), rho_max=4.0)
    assert sgn_form_gap(model, 0.5, [0.25, 0.75], np.linspace(0.0, 4.0, 41)) > 1.0


def test_initial_recovery_window():
    grid = Grid1D(100)
    rho0 = lambda x: np.ones_like(x)
    sol = GridSolution(grid, 0.0, np.full(100, 1.1))
    assert initial_recovery(sol, rho0, 0.1) == pytest.approx(0.02)


def test_initial_recovery_picks_snapshot(crafted):
    _, series = crafted
    assert initial_recovery(series, series.initial.values, 0.4) == 0.0
    later = initial_recovery(series, series.initial.values, 0.4, t_min=0.01)
    assert later > 0.0
    with pytest.raises(DomainError):
        initial_recovery(series, series.initial.values, 0.4, t_min=1.0)


def test_bin_to_grid():
    np.testing.assert_allclose(bin_to_grid(np.arange(8.0), 4), [0.5, 2.5, 4.5, 6.5])
    assert bin_to_grid(np.ones((3, 8)), 2).shape == (3, 2)
    with pytest.raises(DomainError):
        bin_to_grid(np.ones(4), 8)


def test_young_estimate_of_a_spread_ensemble():
    c = np.linspace(0.0, 1.0, 40)
    blocks = np.repeat(c[:, None], 100, axis=1)
    est = YoungMeasureEstimate.from_ensemble(blocks, 10)
    np.testing.assert_allclose(est.histograms.sum(axis=1), 1.0)
    np.testing.assert_allclose(est.mean, 0.5)
    np.testing.assert_allclose(est.variance, np.var(c, ddof=1))
    summary = young_concentration(est)
    assert summary.max_variance == pytest.approx(np.var(c, ddof=1))
    assert summary.excluded_bins == ()


def test_young_concentration_needs_an_ensemble():
    est = YoungMeasureEstimate.from_ensemble(np.ones((10, 20)), 5)
    with pytest.raises(DomainError):
        young_concentration(est)


def test_young_empty_bins_are_excluded():
    est = YoungMeasureEstimate.from_ensemble(np.ones((30, 10)), 20)
    summary = young_concentration(est)
    assert summary.excluded_bins == tuple(range(1, 20, 2))
    assert summary.max_variance == 0.0


def test_measure_valued_residual_averages_members(crafted):
    model, series = crafted
    J = TestFunction(0.5, 0.2, series.t_end)
    single = measure_valued_residual([series], model, 0.4, "plus", J)
    assert measure_valued_residual([series, series], model, 0.4, "plus", J) == pytest.approx(single)
    with pytest.raises(DomainError):
        measure_valued_residual([], model, 0.4, "plus", J)
