#!/usr/bin/env python3
"""
Basic coupling of two zero range processes on one lattice.

At each site three clocks run: a joint clock at rate lambda min(g(eta), g(xi))
moving a particle in both marginals, and two excess clocks at rates
lambda (g(eta) - g(xi))+ and lambda (g(xi) - g(eta))+ moving only one.
Nondecreasing g keeps eta <= xi sitewise once it holds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from errors import DomainError, EventBudgetError, OrderingBrokenError, QuiescentError
from flux_model import FluxModel
from rate_index import REBUILD_EVERY, fenwick_build
from steady_states import steady_values
from zrp_core import (
    EVENT_BUDGET,
    UNIFORM_CHUNK,
    Configuration,
    EquilibriumTables,
    JumpKernel,
    Profile,
    ZRPDynamics,
    block_averages,
    invariant_fugacities,
    profile_fugacities,
    site_positions,
)
import zrp_kernels

logger = logging.getLogger(__name__)

SNAPSHOTS_PER_UNIT = 50
TRACE_COLUMNS = ["t", "discrepancy", "uncoupled_pairs"]


@dataclass(eq=False)
class CoupledConfiguration:
    eta: Configuration
    xi: Configuration
    since_rebuild: int = 0
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    trees: Optional[np.ndarray] = field(default=None, repr=False)
    totals: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.eta.n_sites != self.xi.n_sites:
            raise DomainError(f"marginals have {self.eta.n_sites} and {self.xi.n_sites} sites")
        if self.eta.sim_time != self.xi.sim_time:
            raise DomainError("marginals must share the simulation time")

    @property
    def n_sites(self) -> int:
        return self.eta.n_sites

    @property
    def sim_time(self) -> float:
        return self.eta.sim_time

    @property
    def ordered(self) -> bool:
        return bool(np.all(self.eta.eta <= self.xi.eta))

    def copy(self) -> "CoupledConfiguration":
        return CoupledConfiguration(self.eta.copy(), self.xi.copy())


def discrepancy(cc: CoupledConfiguration) -> float:
    """N^-1 sum_u |eta(u) - xi(u)|."""
    return float(np.abs(cc.eta.eta - cc.xi.eta).sum()) / cc.n_sites


def uncoupled_pairs(cc: CoupledConfiguration, kernel: JumpKernel) -> int:
    """sum over u and z in supp p of G_{u,u+z}: sites whose discrepancies have opposite signs."""
    d = np.sign(cc.eta.eta - cc.xi.eta)
    total = 0
    for z, p in zip(kernel.displacements, kernel.probabilities):
        if p > 0.0:
            total += int(np.count_nonzero(d * np.roll(d, -z) < 0))
    return total


class CoupledDynamics(ZRPDynamics):
    """Channel rate indices (joint, eta excess, xi excess) over one lattice."""

    def coupled_rates(self, eta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        g = self.g_table(int(max(eta.max(initial=0), xi.max(initial=0))))
        a, b = g[eta], g[xi]
        return np.stack([
            self.site_speed * np.minimum(a, b),
            self.site_speed * np.maximum(a - b, 0.0),
            self.site_speed * np.maximum(b - a, 0.0),
        ])

    def attach_pair(self, cc: CoupledConfiguration) -> None:
        if cc.n_sites != self.n_sites:
            raise DomainError(f"configuration has {cc.n_sites} sites, dynamics {self.n_sites}")
        if cc.weights is None:
            cc.weights = np.ascontiguousarray(self.coupled_rates(cc.eta.eta, cc.xi.eta))
            cc.trees = np.stack([fenwick_build(w) for w in cc.weights])
            cc.totals = cc.weights.sum(axis=1)
            cc.since_rebuild = 0

    def _advance_pair(self, cc: CoupledConfiguration, t_target: float, uniforms: np.ndarray, max_events: int,
                      check_order: bool) -> tuple[int, int, int]:
        self.attach_pair(cc)
        g = self.g_table(max(cc.eta.total_particles, cc.xi.total_particles))
        t, _, events, status, since, site = zrp_kernels.advance_coupled(
            cc.eta.eta, cc.xi.eta, cc.weights, cc.trees, cc.totals, self.site_speed, g,
            self.disp, self.disp_cdf, float(self.n_sites),
            cc.sim_time, t_target, uniforms, 0, max_events, self.rebuild_every, cc.since_rebuild, check_order,
        )
        cc.eta.sim_time = cc.xi.sim_time = t
        cc.eta.events += events
        cc.xi.events += events
        cc.since_rebuild = since
        return events, status, site

    def step_pair(self, cc: CoupledConfiguration, rng: np.random.Generator) -> float:
        t0 = cc.sim_time
        _, status, _ = self._advance_pair(cc, np.inf, rng.random((1, 3)), 1, False)
        if status == zrp_kernels.QUIESCENT:
            raise QuiescentError("joint total rate is zero")
        return cc.sim_time - t0

    def run_pair(self, cc: CoupledConfiguration, t_target: float, rng: np.random.Generator,
                 check_order: bool = False, max_events: Optional[int] = None) -> int:
        """Advance to t_target (or until max_events); returns the number of events."""
        if t_target < cc.sim_time:
            raise DomainError(f"target time {t_target} before current time {cc.sim_time}")
        budget = self.event_budget if max_events is None else int(max_events)
        done = 0
        while True:
            events, status, site = self._advance_pair(cc, t_target, rng.random((self.chunk, 3)),
                                                      budget - done, check_order)
            done += events
            if status == zrp_kernels.ORDER_BROKEN:
                raise OrderingBrokenError(int(site), cc.eta.events, cc.sim_time)
            if status == zrp_kernels.REACHED:
                return done
            if status == zrp_kernels.QUIESCENT:
                if np.isfinite(t_target):
                    cc.eta.sim_time = cc.xi.sim_time = t_target
                return done
            if status == zrp_kernels.EXHAUSTED:
                if max_events is not None:
                    return done
                raise EventBudgetError(self.event_budget, cc)


def coupled_step(cc: CoupledConfiguration, model: FluxModel, kernel: JumpKernel,
                 rng: np.random.Generator) -> tuple[CoupledConfiguration, float]:
    dt = CoupledDynamics(model, kernel, cc.n_sites).step_pair(cc, rng)
    return cc, dt


def ordered_preservation(cc: CoupledConfiguration, model: FluxModel, kernel: JumpKernel, rng: np.random.Generator,
                         n_events: Optional[int] = None, t_end: float = np.inf) -> bool:
    """Checks eta <= xi after every event; raises OrderingBrokenError at the first violation."""
    if not cc.ordered:
        raise DomainError("initial pair is not ordered")
    if n_events is None and not np.isfinite(t_end):
        raise DomainError("need an event count or a finite horizon")
    dyn = CoupledDynamics(model, kernel, cc.n_sites)
    dyn.run_pair(cc, t_end, rng, check_order=True, max_events=n_events)
    return True


# ── Initial pairs ──────────────────────────────────────────────────────────────
def sample_coupled_pair(model: FluxModel, tables: EquilibriumTables, rho_profile: Profile, alpha: float,
                        n_sites: int, rng: np.random.Generator, mode: str = "independent") -> CoupledConfiguration:
    """
    eta from the product measure of rho_profile, xi from the invariant measure at level alpha.
    mode='ordered' shares the uniforms, so eta <= xi wherever rho_profile <= m_alpha.
    """
    if mode not in ("independent", "ordered"):
        raise DomainError(f"unknown pairing mode {mode!r}")
    phi_eta = profile_fugacities(model, tables, rho_profile, n_sites)
    phi_xi = invariant_fugacities(model, alpha, n_sites)
    u = rng.random(n_sites)
    v = u if mode == "ordered" else rng.random(n_sites)
    return CoupledConfiguration(Configuration(tables.quantile(phi_eta, u)), Configuration(tables.quantile(phi_xi, v)))


# ── Trajectories ───────────────────────────────────────────────────────────────
@dataclass(eq=False)
class CoupledRun:
    """Occupancies at t=0 and at interval midpoints, plus the discrepancy trace at interval ends."""

    dt: float
    times: np.ndarray
    eta0: np.ndarray
    xi0: np.ndarray
    eta: np.ndarray       # (K, N)
    xi: np.ndarray
    trace: pd.DataFrame
    events: int = 0

    @property
    def n_sites(self) -> int:
        return self.eta0.size


def run_coupled(cc: CoupledConfiguration, model: FluxModel, kernel: JumpKernel, t_end: float,
                rng: np.random.Generator, snapshots_per_unit: int = SNAPSHOTS_PER_UNIT,
                check_order: bool = False, event_budget: int = EVENT_BUDGET,
                rebuild_every: int = REBUILD_EVERY, chunk: int = UNIFORM_CHUNK) -> CoupledRun:
    if t_end <= 0.0:
        raise DomainError("t_end must be positive")
    dyn = CoupledDynamics(model, kernel, cc.n_sites, rebuild_every, event_budget, chunk)
    k = max(1, int(round(snapshots_per_unit * t_end)))
    dt = t_end / k
    t0 = cc.sim_time
    eta0, xi0 = cc.eta.eta.copy(), cc.xi.eta.copy()
    eta = np.empty((k, cc.n_sites), dtype=np.int64)
    xi = np.empty_like(eta)
    trace = [(t0, discrepancy(cc), uncoupled_pairs(cc, kernel))]
    events = 0
    for i in range(k):
        events += dyn.run_pair(cc, t0 + (i + 0.5) * dt, rng, check_order)
        eta[i], xi[i] = cc.eta.eta, cc.xi.eta
        events += dyn.run_pair(cc, t0 + (i + 1) * dt, rng, check_order)
        trace.append((cc.sim_time, discrepancy(cc), uncoupled_pairs(cc, kernel)))
    times = t0 + (np.arange(k) + 0.5) * dt
    logger.debug("coupled run: %d events to t=%.4g", events, cc.sim_time)
    return CoupledRun(dt, times, eta0, xi0, eta, xi, pd.DataFrame(trace, columns=TRACE_COLUMNS), events)


# ── Microscopic entropy ────────────────────────────────────────────────────────
def _h(model: FluxModel, rho: np.ndarray) -> np.ndarray:
    return np.asarray(model.closure.h(np.minimum(rho, model.rho_max)), dtype=float)


def _functional(run: CoupledRun, J, model: FluxModel, a0: np.ndarray, b0: np.ndarray,
                a: np.ndarray, b: np.ndarray) -> float:
    x = site_positions(run.n_sites)
    lam = np.asarray(model.speed(x), dtype=float)
    total = 0.0
    for i, t in enumerate(run.times):
        total += float(np.mean(J.dt(t, x) * np.abs(a[i] - b[i])
                               + J.dx(t, x) * lam * np.abs(_h(model, a[i]) - _h(model, b[i]))))
    return total * run.dt + float(np.mean(J(0.0, x) * np.abs(a0 - b0)))


def microscopic_entropy(run: CoupledRun, J, l: int, model: FluxModel) -> float:
    """
    int_0^t N^-1 sum_u [J_s |eta^l - xi^l| + J_x lambda_eps |h(eta^l) - h(xi^l)|] ds
    + N^-1 sum_u J(0) |eta_0^l - xi_0^l|, midpoint rule over the snapshots.
    """
    a = np.stack([block_averages(e, l) for e in run.eta])
    b = np.stack([block_averages(e, l) for e in run.xi])
    return _functional(run, J, model, block_averages(run.eta0, l), block_averages(run.xi0, l), a, b)


def microscopic_entropy_steady(run: CoupledRun, J, l: int, model: FluxModel, alpha: float,
                               branch: str = "plus") -> float:
    """The same functional with xi^l replaced by m_alpha at the sites."""
    m = steady_values(model, alpha, site_positions(run.n_sites), branch)
    a = np.stack([block_averages(e, l) for e in run.eta])
    return _functional(run, J, model, block_averages(run.eta0, l), m, a, np.broadcast_to(m, a.shape))
