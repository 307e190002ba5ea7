import numpy as np
import pytest

from errors import DomainError, NoSolutionError
from flux_model import FluxModel, MollifierKernel, RateFunction, SpeedField, closure_from_rate, well_closure
from fv_solver import Grid1D
from steady_states import (
    envelope_alpha,
    solve_steady,
    steady_convergence,
    steady_profile,
    steady_table,
    steady_values,
)


@pytest.fixture(scope="module")
def step_model():
    return FluxModel(SpeedField.step((2.0, 1.0), (0.0, 0.5)), closure_from_rate(RateFunction("indicator")))


@pytest.fixture(scope="module")
def well_model():
    return FluxModel(SpeedField.step((2.0, 1.0), (0.0, 0.5)), well_closure(1.0, 1), rho_max=4.0)


def test_step_fixture_closed_form(step_model):
    assert solve_steady(step_model, 0.5, 0.25) == pytest.approx(1.0 / 3.0, abs=1e-10)
    assert solve_steady(step_model, 0.5, 0.75) == pytest.approx(1.0, abs=1e-10)
    assert solve_steady(step_model, 0.5, 0.5) == pytest.approx(1.0, abs=1e-10)


def test_flux_is_constant_across_the_jump(step_model):
    grid = Grid1D(64)
    m = steady_profile(step_model, 0.5, grid)
    flux = step_model.flux(grid.centers, m)
    assert np.max(np.abs(flux - 0.5)) < 1e-10


def test_zero_level_is_empty(step_model):
    np.testing.assert_allclose(steady_values(step_model, 0.0, [0.1, 0.9]), 0.0, atol=1e-12)


def test_unattainable_level_reports_cell(step_model):
    with pytest.raises(NoSolutionError) as info:
        steady_profile(step_model, 1.5, Grid1D(8))
    assert info.value.cell == 4
    lo, hi = info.value.attainable
    assert lo == pytest.approx(0.0) and hi < 1.0


def test_profile_cache_hands_out_copies(step_model):
    grid = Grid1D(16)
    first = steady_profile(step_model, 0.4, grid)
    first[:] = -1.0
    assert np.all(steady_profile(step_model, 0.4, grid) > 0.0)


def test_well_branches(well_model):
    x = np.array([0.25, 0.75])
    plus = steady_values(well_model, 0.5, x, "plus")
    minus = steady_values(well_model, 0.5, x, "minus")
    np.testing.assert_allclose(plus, [1.5, 1.0 + np.sqrt(0.5)], atol=1e-10)
    np.testing.assert_allclose(minus, [0.5, 1.0 - np.sqrt(0.5)], atol=1e-10)


def test_unknown_branch(well_model):
    with pytest.raises(DomainError):
        solve_steady(well_model, 0.5, 0.25, "middle")


def test_envelope_dominates_profile(step_model):
    grid = Grid1D(100)
    rho0 = np.where(grid.centers < 0.5, 1.0 / 3.0, 2.0)
    alpha = envelope_alpha(step_model, rho0)
    assert 2.0 / 3.0 - 1e-9 <= alpha <= 2.0 / 3.0 + 0.014
    assert np.all(steady_profile(step_model, alpha, grid) >= rho0 - 1e-9)


def test_envelope_rejects_bad_profiles(step_model):
    with pytest.raises(DomainError):
        envelope_alpha(step_model, [])
    with pytest.raises(DomainError):
        envelope_alpha(step_model, [-1.0, 0.5])


def test_steady_table_layout(step_model):
    table = steady_table(step_model, [0.25, 0.5], Grid1D(10))
    assert list(table.columns) == ["x", "alpha", "m_alpha_plus", "m_alpha_minus"]
    assert len(table) == 20
    assert table["m_alpha_plus"].notna().all()


def test_steady_table_marks_missing_branch(well_model):
    # the convex well has no steady state below its extremum level
    table = steady_table(well_model, [-0.5], Grid1D(4))
    assert table["m_alpha_plus"].isna().all()
    assert table["m_alpha_minus"].isna().all()


def test_mollified_steady_states_converge_off_the_jumps(step_model):
    x = np.array([0.2, 0.3, 0.7, 0.8])
    gaps = steady_convergence(step_model, 0.5, [0.1, 0.05], x)
    assert max(gaps) < 1e-10


def test_mollified_steady_state_keeps_flux_level(step_model):
    smooth = step_model.mollified(MollifierKernel(0.05))
    grid = Grid1D(200)
    m = steady_profile(smooth, 0.5, grid)
    assert np.max(np.abs(smooth.flux(grid.centers, m) - 0.5)) < 1e-10
    assert np.all(np.diff(m[(grid.centers > 0.4) & (grid.centers < 0.6)]) >= -1e-12)
