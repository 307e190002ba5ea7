import numpy as np
import pytest
from scipy import stats

from errors import DivergenceError, DomainError, EventBudgetError, QuiescentError, RangeError
from flux_model import FluxModel, RateFunction, SpeedField, closure_from_rate, linear_closure
from rate_index import fenwick_build
from rng import replica_rng
from zrp_core import (
    Configuration,
    EquilibriumTables,
    JumpKernel,
    ZRPDynamics,
    block_average,
    block_averages,
    empirical_pairing,
    invariant_fugacities,
    mean_occupation,
    partition_function,
    profile_fugacities,
    run_until,
    sample_invariant_measure,
    sample_product_measure,
    sample_sites,
)


@pytest.fixture(scope="module")
def indicator_tables():
    return EquilibriumTables.build(RateFunction("indicator"))


@pytest.fixture(scope="module")
def step_model():
    return FluxModel(SpeedField.step((2.0, 1.0), (0.0, 0.5)), closure_from_rate(RateFunction("indicator")))


def test_indicator_series_is_geometric(indicator_tables):
    assert partition_function(indicator_tables, 0.5) == pytest.approx(2.0, rel=1e-12)
    assert mean_occupation(indicator_tables, 0.5) == pytest.approx(1.0, rel=1e-12)
    assert indicator_tables.variance(0.5) == pytest.approx(2.0, rel=1e-10)
    assert partition_function(indicator_tables, 0.0) == 1.0


def test_identity_series_is_poisson():
    tables = EquilibriumTables.build(RateFunction("identity"))
    z, mean, var = tables.moments(np.array([0.5, 2.0]))
    np.testing.assert_allclose(z, np.exp([0.5, 2.0]), rtol=1e-12)
    np.testing.assert_allclose(mean, [0.5, 2.0], rtol=1e-12)
    np.testing.assert_allclose(var, [0.5, 2.0], rtol=1e-9)


def test_fugacity_inverts_mean_occupation():
    tables = EquilibriumTables.build(RateFunction.parse("table:0,1,1.5"))
    phi = np.array([0.1, 0.7, 1.2])
    np.testing.assert_allclose(tables.fugacity(tables.mean_occupation(phi)), phi, rtol=1e-8)
    assert tables.fugacity(0.0) == 0.0


def test_fugacity_errors(indicator_tables):
    with pytest.raises(DivergenceError):
        indicator_tables.partition_function(1.0)
    with pytest.raises(DomainError):
        indicator_tables.partition_function(-0.1)
    with pytest.raises(DomainError):
        indicator_tables.fugacity(-1.0)
    with pytest.raises(RangeError):
        indicator_tables.fugacity(1e9)


def test_site_sampler_mean(indicator_tables):
    eta = sample_sites(indicator_tables, np.full(20_000, 0.5), replica_rng(1))
    assert eta.min() >= 0
    assert eta.mean() == pytest.approx(1.0, abs=0.05)


def test_tabulated_quantile_matches_closed_form(indicator_tables):
    table = EquilibriumTables.build(RateFunction.parse("table:0,1"))
    u = replica_rng(2).random(1000)
    np.testing.assert_array_equal(table.quantile(0.6, u), indicator_tables.quantile(0.6, u))


def test_jump_kernel_parsing():
    kernel = JumpKernel.parse("2:0.5,1:0.25,-1:0.25")
    assert kernel.range == 2
    disp, cdf = kernel.arrays()
    np.testing.assert_array_equal(disp, [2, 1, -1])
    np.testing.assert_allclose(cdf, [0.5, 0.75, 1.0])
    assert JumpKernel.parse("1:1") == JumpKernel()


@pytest.mark.parametrize("spec", ["1:0.75,-1:0.25", "1:0.5,1:0.5", "0:1", "2:0.5", "1:0.5"])
def test_jump_kernel_validation(spec):
    with pytest.raises(DomainError):
        JumpKernel.parse(spec)


def test_configuration_checks():
    with pytest.raises(DomainError):
        Configuration(np.array([1, -1, 0]))
    cfg = Configuration(np.array([2, 0, 1]))
    assert cfg.total_particles == 3
    cfg.eta[0] = 5
    with pytest.raises(DomainError):
        cfg.verify()


def test_block_averages_are_periodic():
    eta = np.array([1, 2, 3, 4, 5, 6])
    np.testing.assert_allclose(block_averages(eta, 1), [3.0, 2.0, 3.0, 4.0, 5.0, 4.0])
    np.testing.assert_allclose(block_averages(eta, 0), eta)
    assert block_average(Configuration(eta), 0, 1) == pytest.approx(3.0)
    with pytest.raises(DomainError):
        block_averages(eta, 3)


def test_empirical_pairing():
    cfg = Configuration(np.array([0, 2, 4, 2]))
    assert empirical_pairing(cfg, np.ones_like) == pytest.approx(2.0)
    assert empirical_pairing(cfg, lambda x: x) == pytest.approx((0.25 * 2 + 0.5 * 4 + 0.75 * 2) / 4)


def test_product_measure_profile_checks(step_model, indicator_tables):
    with pytest.raises(DomainError):
        profile_fugacities(step_model, indicator_tables, np.full(8, -0.5), 8)
    with pytest.raises(RangeError):
        profile_fugacities(step_model, indicator_tables, np.full(8, 60.0), 8)
    with pytest.raises(DomainError):
        profile_fugacities(step_model, indicator_tables, np.ones(5), 8)


def test_invariant_measure_follows_steady_profile(step_model, indicator_tables):
    cfg = sample_invariant_measure(step_model, indicator_tables, 0.5, 2000, replica_rng(4))
    assert cfg.eta[:1000].mean() == pytest.approx(1.0 / 3.0, abs=0.1)
    assert cfg.eta[1000:].mean() == pytest.approx(1.0, abs=0.15)
    with pytest.raises(DomainError):
        invariant_fugacities(step_model, -0.1, 10)


def test_shared_uniforms_give_ordered_samples(step_model, indicator_tables):
    u = replica_rng(5).random(100)
    low = sample_product_measure(step_model, indicator_tables, np.full(100, 0.5), 100, None, uniforms=u)
    high = sample_product_measure(step_model, indicator_tables, np.full(100, 1.5), 100, None, uniforms=u)
    assert np.all(low.eta <= high.eta)


def test_single_particle_hops_right(step_model):
    eta = np.zeros(10, dtype=np.int64)
    eta[3] = 1
    cfg = Configuration(eta)
    dt = ZRPDynamics(step_model, JumpKernel(), 10).step(cfg, replica_rng(6))
    assert dt > 0.0 and cfg.sim_time == dt
    assert cfg.eta[4] == 1 and cfg.eta.sum() == 1
    assert cfg.events == 1


def test_run_conserves_particles(step_model, indicator_tables):
    cfg = sample_product_measure(step_model, indicator_tables, lambda x: 0.5 + 0.0 * x, 50, replica_rng(7))
    n = cfg.total_particles
    out = run_until(cfg, step_model, JumpKernel(), 0.05, replica_rng(8))
    assert out.sim_time == 0.05
    assert out.eta.sum() == n
    assert out.events > 0
    out.verify()


def test_run_is_reproducible(step_model, indicator_tables):
    runs = []
    for _ in range(2):
        cfg = sample_product_measure(step_model, indicator_tables, np.full(40, 1.0), 40, replica_rng(9, 0, 0))
        runs.append(run_until(cfg, step_model, JumpKernel(), 0.1, replica_rng(9)).eta)
    np.testing.assert_array_equal(runs[0], runs[1])


def test_empty_lattice_is_quiescent(step_model):
    dynamics = ZRPDynamics(step_model, JumpKernel(), 8)
    with pytest.raises(QuiescentError):
        dynamics.step(Configuration(np.zeros(8, dtype=np.int64)), replica_rng(10))
    cfg = dynamics.run_until(Configuration(np.zeros(8, dtype=np.int64)), 0.3, replica_rng(10))
    assert cfg.sim_time == 0.3


def test_event_budget(step_model):
    cfg = Configuration(np.full(20, 3, dtype=np.int64))
    with pytest.raises(EventBudgetError) as info:
        run_until(cfg, step_model, JumpKernel(), 10.0, replica_rng(11), event_budget=5)
    assert info.value.budget == 5
    assert cfg.events == 5


def test_dynamics_preconditions(step_model):
    with pytest.raises(DomainError):
        ZRPDynamics(FluxModel(SpeedField.constant(1.0), linear_closure()), JumpKernel(), 10)
    with pytest.raises(DomainError):
        ZRPDynamics(step_model, JumpKernel.parse("2:0.5,1:0.25,-1:0.25"), 4)


@pytest.fixture(scope="module")
def flat_model():
    return FluxModel(SpeedField.constant(1.0), closure_from_rate(RateFunction("indicator")))


def test_waiting_time_is_exponential_with_euler_speedup(flat_model):
    n = 50
    eta = np.zeros(n, dtype=np.int64)
    eta[7] = 1
    cfg = Configuration(eta)
    dynamics = ZRPDynamics(flat_model, JumpKernel(), n)
    rng = replica_rng(13)
    waits = np.array([dynamics.step(cfg, rng) for _ in range(10_000)])
    assert waits.mean() == pytest.approx(1.0 / n, rel=0.04)
    assert stats.kstest(waits, stats.expon(scale=1.0 / n).cdf).pvalue > 0.001
    assert cfg.eta[(7 + 10_000) % n] == 1


def test_equal_rate_sites_split_sources_evenly(flat_model):
    eta0 = np.zeros(10, dtype=np.int64)
    eta0[[2, 6]] = 1
    dynamics = ZRPDynamics(flat_model, JumpKernel(), 10)
    rng = replica_rng(14)
    from_first = 0
    for _ in range(10_000):
        cfg = Configuration(eta0.copy())
        dynamics.step(cfg, rng)
        from_first += int(cfg.eta[2] == 0)
    assert from_first / 10_000 == pytest.approx(0.5, abs=0.02)
    assert stats.binomtest(from_first, 10_000, 0.5).pvalue > 0.001


def test_rate_index_total_after_a_million_events(step_model, indicator_tables):
    cfg = sample_product_measure(step_model, indicator_tables, np.full(200, 1.0), 200, replica_rng(12, 0, 0))
    dynamics = ZRPDynamics(step_model, JumpKernel(), 200, rebuild_every=10**9, event_budget=10**6)
    with pytest.raises(EventBudgetError):
        dynamics.run_until(cfg, np.inf, replica_rng(12))
    assert cfg.events == 10**6
    index = cfg.rate_index
    assert index.since_rebuild == 10**6
    np.testing.assert_allclose(index.tree, fenwick_build(index.weights), rtol=1e-9, atol=1e-9)
    assert dynamics.verify(cfg) < 1e-9
    assert index.since_rebuild == 0


def test_verify_catches_stale_rates(step_model):
    cfg = Configuration(np.full(12, 2, dtype=np.int64))
    dynamics = ZRPDynamics(step_model, JumpKernel(), 12)
    dynamics.run_until(cfg, 0.01, replica_rng(15))
    assert dynamics.verify(cfg) < 1e-9
    cfg.rate_index.weights[0] += 1.0
    with pytest.raises(DomainError):
        dynamics.verify(cfg)
