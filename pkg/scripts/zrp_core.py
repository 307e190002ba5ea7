#!/usr/bin/env python3
"""
Zero range process with site-dependent rate lambda_eps(u/N) g(eta(u)) on the
torus of N sites, plus the equilibrium toolbox (Z, R = phi Z'/Z, h = R^-1)
and product-measure samplers.

The generator is sped up by N (Euler scaling): waiting times are
Exponential(N * W) with W the total rate sum_u lambda_eps(u/N) g(eta(u)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from errors import DivergenceError, DomainError, EventBudgetError, QuiescentError, RangeError
from flux_model import FluxModel, RateFunction
from rate_index import RATE_DRIFT_TOL, REBUILD_EVERY, RateIndex
import zrp_kernels

logger = logging.getLogger(__name__)

TAIL_TOLERANCE = 1e-14
EVENT_BUDGET = 200_000_000
UNIFORM_CHUNK = 65_536
_ROWS = 256   # fugacities per vectorised series evaluation

Profile = Union[Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray]


# ── Equilibrium tables ─────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class EquilibriumTables:
    """Truncated series for Z(phi) = sum_{n<=K} phi^n / g(n)! and its moments."""

    rate: RateFunction
    log_coeff: np.ndarray   # -log g(n)!, n = 0..K
    radius: float

    @classmethod
    def build(cls, rate: RateFunction, cap: Optional[int] = None) -> "EquilibriumTables":
        cap = rate.cap if cap is None else int(cap)
        return cls(rate, -rate.log_factorial(cap), rate.radius)

    @property
    def cap(self) -> int:
        return self.log_coeff.size - 1

    @property
    def phi_cap(self) -> float:
        return self.radius * (1.0 - 1e-6) if np.isfinite(self.radius) else np.inf

    @cached_property
    def phi_top(self) -> float:
        """Largest fugacity whose truncated series still certifies its tail at this cap."""
        if np.isfinite(self.radius):
            return float(self.radius * np.exp(np.log(1e-16) / self.cap))
        return self.cap / 8.0

    def _check(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if np.any(phi < 0.0) or np.any(~np.isfinite(phi)):
            raise DomainError("fugacity must be finite and non-negative")
        if np.any(phi >= self.radius) or np.any(phi > self.phi_cap):
            raise DivergenceError(f"fugacity {phi.max():.6g} at or above convergence radius {self.radius:g}")
        return phi

    def _weights(self, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Relative term weights w_n / max_n w_n for positive phi, plus log of the max."""
        n = np.arange(self.cap + 1)
        logt = n[None, :] * np.log(phi)[:, None] + self.log_coeff[None, :]
        top = logt.max(axis=1)
        w = np.exp(logt - top[:, None])
        tail = w[:, -1] / w.sum(axis=1)
        if np.any(tail >= TAIL_TOLERANCE) or np.any(w[:, -1] > w[:, -2]):
            raise DivergenceError(
                f"series for phi={phi[np.argmax(tail)]:.6g} not converged within cap K={self.cap} "
                f"(tail ratio {tail.max():.3g})"
            )
        return w, top

    def moments(self, phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(Z, mean, variance) of the single-site law with weights phi^n / g(n)!."""
        phi = self._check(phi)
        flat = np.atleast_1d(phi).ravel()
        uniq, inverse = np.unique(flat, return_inverse=True)
        z = np.ones_like(uniq)
        mean = np.zeros_like(uniq)
        var = np.zeros_like(uniq)
        n = np.arange(self.cap + 1, dtype=float)
        positive = np.flatnonzero(uniq > 0.0)
        for lo in range(0, positive.size, _ROWS):
            rows = positive[lo:lo + _ROWS]
            w, top = self._weights(uniq[rows])
            s = w.sum(axis=1)
            m1 = (w * n).sum(axis=1) / s
            m2 = (w * n * n).sum(axis=1) / s
            z[rows] = np.exp(top) * s
            mean[rows] = m1
            var[rows] = np.maximum(m2 - m1 * m1, 0.0)
        shape = np.shape(phi)
        return z[inverse].reshape(shape), mean[inverse].reshape(shape), var[inverse].reshape(shape)

    def partition_function(self, phi):
        z, _, _ = self.moments(phi)
        return float(z) if np.ndim(phi) == 0 else z

    def mean_occupation(self, phi):
        _, m, _ = self.moments(phi)
        return float(m) if np.ndim(phi) == 0 else m

    def variance(self, phi):
        _, _, v = self.moments(phi)
        return float(v) if np.ndim(phi) == 0 else v

    def reachable_density(self) -> float:
        return self.mean_occupation(self.phi_top)

    @cached_property
    def _inverse_grid(self) -> tuple[np.ndarray, np.ndarray]:
        phi = self.phi_top * np.linspace(0.0, 1.0, 2049) ** 2
        return self.mean_occupation(phi), phi

    def fugacity(self, rho):
        """h(rho) = R^{-1}(rho): interpolated start, Newton polish with phi R'(phi) = Var."""
        scalar = np.ndim(rho) == 0
        shape = np.shape(rho)
        rho = np.atleast_1d(np.asarray(rho, dtype=float)).ravel()
        if np.any(rho < 0.0):
            raise DomainError("density must be non-negative")
        r_grid, phi_grid = self._inverse_grid
        if np.any(rho > r_grid[-1]):
            raise RangeError(f"density {rho.max():.6g} beyond reachable range {r_grid[-1]:.6g}")
        phi = np.interp(rho, r_grid, phi_grid)
        for _ in range(4):
            active = phi > 0.0
            if not active.any():
                break
            _, m, v = self.moments(phi[active])
            step = (m - rho[active]) * phi[active] / np.where(v > 0.0, v, 1.0)
            phi[active] = np.clip(phi[active] - step, 0.0, self.phi_top)
        phi = np.where(rho == 0.0, 0.0, phi)
        return float(phi[0]) if scalar else phi.reshape(shape)

    def quantile(self, phi, u):
        """Inverse CDF of the single-site law at fugacity phi for uniforms u."""
        phi = self._check(phi)
        u = np.asarray(u, dtype=float)
        phi, u = np.broadcast_arrays(phi, u)
        out = np.zeros(phi.shape, dtype=np.int64)
        pos = phi > 0.0
        if not pos.any():
            return out
        if self.rate.tag == "indicator":
            # P(eta >= n) = phi^n
            out[pos] = np.floor(np.log1p(-u[pos]) / np.log(phi[pos])).astype(np.int64)
        elif self.rate.tag == "identity":
            out[pos] = np.maximum(stats.poisson.ppf(u[pos], phi[pos]), 0).astype(np.int64)
        else:
            flat_phi = phi[pos]
            flat_u = u[pos]
            res = np.empty(flat_phi.size, dtype=np.int64)
            uniq, inverse = np.unique(flat_phi, return_inverse=True)
            for lo in range(0, uniq.size, _ROWS):
                w, _ = self._weights(uniq[lo:lo + _ROWS])
                cdf = np.cumsum(w, axis=1)
                cdf /= cdf[:, -1:]
                for j in range(cdf.shape[0]):
                    sel = inverse == lo + j
                    res[sel] = np.searchsorted(cdf[j], flat_u[sel], side="right")
            out[pos] = res
        return np.minimum(out, self.cap)


def partition_function(tables: EquilibriumTables, phi):
    return tables.partition_function(phi)


def mean_occupation(tables: EquilibriumTables, phi):
    """R(phi) = phi Z'(phi) / Z(phi)."""
    return tables.mean_occupation(phi)


def sample_site(tables: EquilibriumTables, phi: float, rng: np.random.Generator) -> int:
    """n with probability phi^n / (Z(phi) g(n)!)."""
    return int(tables.quantile(phi, rng.random()))


def sample_sites(tables: EquilibriumTables, phi, rng: np.random.Generator) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    return tables.quantile(phi, rng.random(phi.shape))


# ── Jump kernel ────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class JumpKernel:
    displacements: tuple[int, ...] = (1,)
    probabilities: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        z = np.asarray(self.displacements, dtype=np.int64)
        p = np.asarray(self.probabilities, dtype=float)
        if z.size == 0 or z.size != p.size:
            raise DomainError("one probability per displacement")
        if np.any(z == 0) or np.unique(z).size != z.size:
            raise DomainError("displacements must be distinct and non-zero")
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError("jump probabilities must be non-negative and sum to 1")
        if abs(float(np.dot(z, p)) - 1.0) > 1e-12:
            raise DomainError(f"mean drift must be 1, got {np.dot(z, p):.6g}")
        if p[z == 1].sum() <= 0.0:
            raise DomainError("p(1) must be positive")

    @classmethod
    def parse(cls, spec: str) -> "JumpKernel":
        """'1:1.0' or '1:0.75,-1:0.25,...'"""
        pairs = [item.split(":") for item in spec.split(",") if item.strip()]
        return cls(tuple(int(a) for a, _ in pairs), tuple(float(b) for _, b in pairs))

    @property
    def range(self) -> int:
        return int(max(abs(z) for z in self.displacements))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(self.probabilities, dtype=float)
        return np.asarray(self.displacements, dtype=np.int64), np.cumsum(p) / p.sum()


# ── Configuration ──────────────────────────────────────────────────────────────
@dataclass(eq=False)
class Configuration:
    eta: np.ndarray
    sim_time: float = 0.0
    total_particles: Optional[int] = None
    events: int = 0
    rate_index: Optional[RateIndex] = field(default=None, repr=False)

    def __post_init__(self):
        self.eta = np.ascontiguousarray(self.eta, dtype=np.int64)
        if self.eta.ndim != 1 or self.eta.size == 0:
            raise DomainError("configuration must be a non-empty 1-D occupancy vector")
        if np.any(self.eta < 0):
            raise DomainError("occupancies must be non-negative")
        if self.total_particles is None:
            self.total_particles = int(self.eta.sum())

    @property
    def n_sites(self) -> int:
        return self.eta.size

    def verify(self) -> None:
        if np.any(self.eta < 0):
            raise DomainError("negative occupancy")
        if int(self.eta.sum()) != self.total_particles:
            raise DomainError(f"particle count {int(self.eta.sum())} != {self.total_particles}")

    def copy(self) -> "Configuration":
        return Configuration(self.eta.copy(), self.sim_time, self.total_particles, self.events)


# ── Product measures ───────────────────────────────────────────────────────────
def site_positions(n_sites: int) -> np.ndarray:
    return np.arange(n_sites) / n_sites


def profile_values(profile: Profile, n_sites: int) -> np.ndarray:
    if callable(profile):
        return np.asarray(profile(site_positions(n_sites)), dtype=float)
    values = np.asarray(profile, dtype=float)
    if values.size != n_sites:
        raise DomainError(f"profile has {values.size} values for {n_sites} sites")
    return values


def profile_fugacities(model: FluxModel, tables: EquilibriumTables, rho_profile: Profile,
                       n_sites: int) -> np.ndarray:
    rho = profile_values(rho_profile, n_sites)
    bad = np.flatnonzero((rho < 0.0) | ~np.isfinite(rho))
    if bad.size:
        raise DomainError(f"profile value {rho[bad[0]]:.6g} at site {bad[0]} is not an admissible density")
    limit = min(model.rho_max, tables.reachable_density())
    bad = np.flatnonzero(rho > limit)
    if bad.size:
        raise RangeError(f"profile value {rho[bad[0]]:.6g} at site {bad[0]} exceeds reachable density {limit:.6g}")
    return np.asarray(model.closure.h(rho), dtype=float)


def sample_product_measure(model: FluxModel, tables: EquilibriumTables, rho_profile: Profile,
                           n_sites: int, rng: np.random.Generator,
                           uniforms: Optional[np.ndarray] = None) -> Configuration:
    """
    Independent sites with fugacity h(rho(u/N)), so E[eta(u)] = rho(u/N).

    Passing the same `uniforms` for two profiles gives the monotone (quantile)
    coupling of the two product measures.
    """
    phi = profile_fugacities(model, tables, rho_profile, n_sites)
    u = rng.random(n_sites) if uniforms is None else np.asarray(uniforms, dtype=float)
    return Configuration(tables.quantile(phi, u))


def invariant_fugacities(model: FluxModel, alpha: float, n_sites: int) -> np.ndarray:
    """alpha / lambda_eps(u/N) = h(m_alpha(u/N)): the fugacities of the invariant measure at level alpha."""
    if alpha < 0.0:
        raise DomainError("flux level must be non-negative for the zero range process")
    return alpha / np.asarray(model.speed(site_positions(n_sites)), dtype=float)


def sample_invariant_measure(model: FluxModel, tables: EquilibriumTables, alpha: float, n_sites: int,
                             rng: np.random.Generator, uniforms: Optional[np.ndarray] = None) -> Configuration:
    phi = invariant_fugacities(model, alpha, n_sites)
    u = rng.random(n_sites) if uniforms is None else np.asarray(uniforms, dtype=float)
    return Configuration(tables.quantile(phi, u))


# ── Dynamics ───────────────────────────────────────────────────────────────────
class ZRPDynamics:
    """
    Per-(model, kernel, N) data for simulating the process: site speeds and
    the g lookup table. Configurations are owned by the caller.
    """

    def __init__(self, model: FluxModel, kernel: JumpKernel, n_sites: int,
                 rebuild_every: int = REBUILD_EVERY, event_budget: int = EVENT_BUDGET,
                 chunk: int = UNIFORM_CHUNK):
        if model.closure.rate is None:
            raise DomainError(f"closure {model.closure.name} has no microscopic rate function")
        if n_sites <= 2 * kernel.range:
            raise DomainError(f"lattice of {n_sites} sites too small for jump range {kernel.range}")
        self.model = model
        self.kernel = kernel
        self.n_sites = int(n_sites)
        self.rate = model.closure.rate
        self.site_speed = np.ascontiguousarray(model.speed(site_positions(self.n_sites)), dtype=float)
        self.disp, self.disp_cdf = kernel.arrays()
        self.rebuild_every = int(rebuild_every)
        self.event_budget = int(event_budget)
        self.chunk = int(chunk)
        self._g = self.rate.values(64)

    def g_table(self, n_max: int) -> np.ndarray:
        if self._g.size <= n_max:
            self._g = self.rate.values(max(n_max, 2 * self._g.size))
        return self._g

    def site_rates(self, eta: np.ndarray) -> np.ndarray:
        g = self.g_table(int(eta.max(initial=0)))
        return self.site_speed * g[eta]

    def attach(self, cfg: Configuration) -> RateIndex:
        if cfg.n_sites != self.n_sites:
            raise DomainError(f"configuration has {cfg.n_sites} sites, dynamics {self.n_sites}")
        if cfg.rate_index is None:
            cfg.rate_index = RateIndex(self.site_rates(cfg.eta), self.rebuild_every)
        return cfg.rate_index

    def _advance(self, cfg: Configuration, t_target: float, uniforms: np.ndarray, max_events: int) -> tuple[int, int]:
        index = self.attach(cfg)
        g = self.g_table(cfg.total_particles)
        t, total, _, events, status, since = zrp_kernels.advance(
            cfg.eta, index.weights, index.tree, index.total, self.site_speed, g,
            self.disp, self.disp_cdf, float(self.n_sites),
            cfg.sim_time, t_target, uniforms, 0, max_events, index.rebuild_every, index.since_rebuild,
        )
        cfg.sim_time = t
        cfg.events += events
        index.total = total
        index.since_rebuild = since
        return events, status

    def step(self, cfg: Configuration, rng: np.random.Generator) -> float:
        """One event; returns the waiting time. Raises QuiescentError when W = 0."""
        t0 = cfg.sim_time
        _, status = self._advance(cfg, np.inf, rng.random((1, 3)), 1)
        if status == zrp_kernels.QUIESCENT:
            raise QuiescentError("total jump rate is zero")
        return cfg.sim_time - t0

    def run_until(self, cfg: Configuration, t_target: float, rng: np.random.Generator) -> Configuration:
        if t_target < cfg.sim_time:
            raise DomainError(f"target time {t_target} before current time {cfg.sim_time}")
        budget = self.event_budget
        while True:
            events, status = self._advance(cfg, t_target, rng.random((self.chunk, 3)), budget)
            budget -= events
            if status == zrp_kernels.REACHED:
                break
            if status == zrp_kernels.QUIESCENT:
                logger.debug("quiescent at t=%.6g; advancing to %.6g", cfg.sim_time, t_target)
                cfg.sim_time = t_target
                break
            if status == zrp_kernels.EXHAUSTED:
                raise EventBudgetError(self.event_budget, cfg)
        return cfg

    def verify(self, cfg: Configuration, tol: float = RATE_DRIFT_TOL) -> float:
        """
        Particle count, per-site rates against eta, and the incrementally kept
        total against a full rebuild. Returns the relative drift removed.
        """
        cfg.verify()
        if cfg.rate_index is None:
            return 0.0
        index = cfg.rate_index
        if not np.allclose(index.weights, self.site_rates(cfg.eta), rtol=1e-12, atol=0.0):
            raise DomainError("rate index weights disagree with the occupancies")
        drift = index.rebuild()
        if drift > tol:
            raise DomainError(f"rate index total drifted by {drift:.3g} (relative) since the last rebuild")
        return drift


def gillespie_step(cfg: Configuration, model: FluxModel, kernel: JumpKernel,
                   rng: np.random.Generator) -> tuple[Configuration, float]:
    dt = ZRPDynamics(model, kernel, cfg.n_sites).step(cfg, rng)
    return cfg, dt


def run_until(cfg: Configuration, model: FluxModel, kernel: JumpKernel, t_target: float,
              rng: np.random.Generator, event_budget: int = EVENT_BUDGET) -> Configuration:
    return ZRPDynamics(model, kernel, cfg.n_sites, event_budget=event_budget).run_until(cfg, t_target, rng)


# ── Observables ────────────────────────────────────────────────────────────────
def block_averages(eta: np.ndarray, l: int) -> np.ndarray:
    """eta^l(u) = (2l+1)^-1 sum_{|v-u|<=l} eta(v) for every u, periodic."""
    eta = np.asarray(eta)
    n = eta.size
    if not (0 <= l < n / 2):
        raise DomainError(f"block radius {l} must satisfy 0 <= l < N/2 = {n / 2:g}")
    if l == 0:
        return eta.astype(float)
    padded = np.concatenate([eta[-l:], eta, eta[:l]]).astype(float)
    csum = np.concatenate([[0.0], np.cumsum(padded)])
    return (csum[2 * l + 1:] - csum[:-(2 * l + 1)]) / (2 * l + 1)


def block_average(cfg: Configuration, u: int, l: int) -> float:
    n = cfg.n_sites
    if not (0 <= l < n / 2):
        raise DomainError(f"block radius {l} must satisfy 0 <= l < N/2 = {n / 2:g}")
    sites = np.arange(u - l, u + l + 1) % n
    return float(cfg.eta[sites].sum()) / (2 * l + 1)


def empirical_pairing(cfg: Configuration, J: Callable[[np.ndarray], np.ndarray]) -> float:
    """<chi^N, J> = N^-1 sum_u J(u/N) eta(u)."""
    x = site_positions(cfg.n_sites)
    return float(np.dot(np.asarray(J(x), dtype=float), cfg.eta)) / cfg.n_sites


def occupancy_table(cfg: Configuration) -> pd.DataFrame:
    return pd.DataFrame({"u": np.arange(cfg.n_sites), "eta": cfg.eta})


def block_table(cfg: Configuration, l: int) -> pd.DataFrame:
    return pd.DataFrame({"x": site_positions(cfg.n_sites), "eta_l": block_averages(cfg.eta, l)})
