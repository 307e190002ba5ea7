#!/usr/bin/env python3
"""
First-order Godunov scheme on the periodic grid for
    rho_t + (lambda_eps(x) h(rho))_x = 0,
plus the exact Riemann solution at a single lambda-jump (increasing h,
concave or linear) and its periodic composition for piecewise-constant data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import DomainError, RejectedStepError, UnsupportedRegimeError
from flux_model import Closure, FluxModel, MollifiedSpeed, MollifierKernel, SpeedField
from steady_states import envelope_alpha, steady_profile

logger = logging.getLogger(__name__)

CFL = 0.45
EPS_PER_DX = 4.0
Profile = Union[Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray]


# ── Grid and solutions ─────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Grid1D:
    n_cells: int

    def __post_init__(self):
        if self.n_cells <= 0:
            raise DomainError("n_cells must be positive")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) / self.n_cells

    @property
    def interfaces(self) -> np.ndarray:
        """x_{i+1/2}; interface i sits between cell i and cell i+1 (mod n)."""
        return np.mod((np.arange(self.n_cells) + 1.0) / self.n_cells, 1.0)


@dataclass(frozen=True, eq=False)
class GridSolution:
    grid: Grid1D
    time: float
    values: np.ndarray
    model_id: str = ""
    epsilon: float = 0.0

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.dx)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.grid.centers, "rho": self.values})


@dataclass(eq=False)
class SolutionSeries:
    """Snapshots at t = 0 and at the midpoints of n uniform intervals of [0, t_end]."""

    initial: GridSolution
    midpoints: list[GridSolution] = field(default_factory=list)
    t_end: float = 0.0

    @property
    def grid(self) -> Grid1D:
        return self.initial.grid

    @property
    def dt(self) -> float:
        return self.t_end / len(self.midpoints) if self.midpoints else 0.0

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.midpoints])

    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.midpoints]) if self.midpoints else np.empty((0, self.grid.n_cells))


def l1_distance(a, b, dx: float) -> float:
    return float(np.sum(np.abs(np.asarray(a) - np.asarray(b))) * dx)


def profile_on_grid(profile: Profile, grid: Grid1D) -> np.ndarray:
    if callable(profile):
        return np.asarray(profile(grid.centers), dtype=float)
    values = np.asarray(profile, dtype=float).copy()
    if values.size != grid.n_cells:
        raise DomainError(f"profile has {values.size} values for {grid.n_cells} cells")
    return values


# ── Fluxes ─────────────────────────────────────────────────────────────────────
def godunov_flux(closure: Closure, lam_left, lam_right, a, b) -> np.ndarray:
    """
    Godunov flux between F_L = lam_left h (left state a) and F_R = lam_right h (right state b):
    min/max of the nondecreasing part of F_L at a and the nonincreasing part of F_R at b.
    Equal speeds give the classical Godunov flux.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    h = closure.h
    if closure.shape == "monotone":
        return np.asarray(lam_left) * np.asarray(h(a), dtype=float) * np.ones_like(b)
    rm = closure.rho_m
    if closure.shape == "convex":
        return np.maximum(lam_left * h(np.maximum(a, rm)), lam_right * h(np.minimum(b, rm)))
    return np.minimum(lam_left * h(np.minimum(a, rm)), lam_right * h(np.maximum(b, rm)))


def interface_flux(model: FluxModel, x_interface, rho_left, rho_right):
    """Godunov flux of F_eps(x_interface, .) between rho_left and rho_right."""
    model.check_density(rho_left)
    model.check_density(rho_right)
    lam = np.asarray(model.speed(x_interface), dtype=float)
    out = godunov_flux(model.closure, lam, lam, rho_left, rho_right)
    scalar = np.ndim(x_interface) == 0 and np.ndim(rho_left) == 0 and np.ndim(rho_right) == 0
    return float(out) if scalar else out


class FVSolver:
    """
    Cell-centred speeds of one (model, grid) pair. The flux at x_{i+1/2} uses
    lambda(x_i) on the left and lambda(x_{i+1}) on the right, so steady
    profiles sampled at the centres are discrete fixed points.
    """

    def __init__(self, model: FluxModel, grid: Grid1D, cfl: float = CFL):
        if not (0.0 < cfl <= 1.0):
            raise DomainError("CFL number must lie in (0, 1]")
        self.model = model
        self.grid = grid
        self.cfl = cfl
        self.lam = np.asarray(model.speed(grid.centers), dtype=float)
        self.lam_right = np.roll(self.lam, -1)

    def fluxes(self, values: np.ndarray) -> np.ndarray:
        return godunov_flux(self.model.closure, self.lam, self.lam_right, values, np.roll(values, -1))

    def admissible_dt(self, rho_lo: float, rho_hi: float) -> float:
        speed = self.model.max_wave_speed(rho_lo, rho_hi)
        return math.inf if speed <= 0.0 else self.cfl * self.grid.dx / speed

    def update(self, values: np.ndarray, dt: float) -> np.ndarray:
        flux = self.fluxes(values)
        return values - (dt / self.grid.dx) * (flux - np.roll(flux, 1))

    def solution(self, values: np.ndarray, time: float) -> GridSolution:
        return GridSolution(self.grid, time, values, self.model.name, self.model.epsilon)


def step(sol: GridSolution, dt: float, model: FluxModel, cfl: float = CFL) -> GridSolution:
    """rho_i <- rho_i - dt/dx (F_{i+1/2} - F_{i-1/2})."""
    solver = FVSolver(model, sol.grid, cfl)
    values = model.check_density(sol.values)
    limit = solver.admissible_dt(float(values.min()), float(values.max()))
    if dt > limit * (1.0 + 1e-12):
        raise RejectedStepError(dt, limit)
    return solver.solution(solver.update(values, dt), sol.time + dt)


def _smoothed(model: FluxModel, kernel: Optional[MollifierKernel], grid: Grid1D) -> FluxModel:
    if kernel is None:
        speed = model.speed
        if isinstance(speed, SpeedField) and len(speed.pieces) > 1:
            raise DomainError("a discontinuous speed needs a mollifier kernel")
        if isinstance(speed, MollifiedSpeed) and speed.epsilon < EPS_PER_DX * grid.dx:
            raise DomainError(f"eps={speed.epsilon:g} under-resolved: need eps >= {EPS_PER_DX:g} dx")
        return model
    if kernel.epsilon < EPS_PER_DX * grid.dx * (1.0 - 1e-12):
        raise DomainError(f"eps={kernel.epsilon:g} under-resolved: need eps >= {EPS_PER_DX:g} dx = {EPS_PER_DX * grid.dx:g}")
    return model.mollified(kernel)


def _run_dt(solver: FVSolver, rho0: np.ndarray) -> float:
    """Fixed dt from the CFL bound over the adapted envelope of rho0."""
    model = solver.model
    upper = float(rho0.max())
    try:
        alpha = envelope_alpha(model, rho0, solver.grid.centers)
        upper = max(upper, float(steady_profile(model, alpha, solver.grid).max()))
    except DomainError as e:
        logger.debug("envelope unavailable (%s); using the data range", e)
    return solver.admissible_dt(0.0, min(upper, model.rho_max))


def _march(solver: FVSolver, values: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    for _ in range(n_steps):
        values = solver.update(values, dt)
    return values


def solve(model: FluxModel, kernel: Optional[MollifierKernel], rho0: Profile, t_end: float, grid: Grid1D,
          cfl: float = CFL) -> GridSolution:
    """Time-march the mollified problem to t_end with a fixed CFL step."""
    if t_end < 0.0:
        raise DomainError("t_end must be non-negative")
    solver = FVSolver(_smoothed(model, kernel, grid), grid, cfl)
    values = solver.model.check_density(profile_on_grid(rho0, grid))
    if t_end == 0.0:
        return solver.solution(values, 0.0)
    limit = _run_dt(solver, values)
    n_steps = max(1, math.ceil(t_end / limit))
    dt = t_end / n_steps
    logger.debug("solve: %d steps of dt=%.3g on %d cells", n_steps, dt, grid.n_cells)
    return solver.solution(_march(solver, values, dt, n_steps), t_end)


def solve_series(model: FluxModel, kernel: Optional[MollifierKernel], rho0: Profile, t_end: float, grid: Grid1D,
                 n_intervals: int, cfl: float = CFL) -> SolutionSeries:
    """Snapshots at t=0 and at (k + 1/2) t_end / n_intervals, for midpoint time quadrature."""
    if t_end <= 0.0 or n_intervals <= 0:
        raise DomainError("need t_end > 0 and at least one interval")
    solver = FVSolver(_smoothed(model, kernel, grid), grid, cfl)
    values = solver.model.check_density(profile_on_grid(rho0, grid))
    half = t_end / (2 * n_intervals)
    per_half = max(1, math.ceil(half / _run_dt(solver, values)))
    dt = half / per_half
    series = SolutionSeries(solver.solution(values, 0.0), [], t_end)
    for k in range(n_intervals):
        values = _march(solver, values, dt, per_half)
        series.midpoints.append(solver.solution(values, (k + 0.5) * 2 * half))
        values = _march(solver, values, dt, per_half)
    return series


# ── Exact Riemann solutions ────────────────────────────────────────────────────
def _closure_curvature(closure: Closure, rho_hi: float) -> str:
    rho = np.linspace(0.0, rho_hi, 257)
    d = np.asarray(closure.dh(rho), dtype=float)
    if np.all(np.abs(d - d[0]) <= 1e-12 * max(1.0, abs(d[0]))):
        return "linear"
    if np.all(np.diff(d) <= 1e-14):
        return "concave"
    return "other"


def _inverse_speed(closure: Closure, lam: float, xi: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """rho in [lo, hi] with lam h'(rho) = xi, h' decreasing."""
    a = np.full(xi.shape, lo)
    b = np.full(xi.shape, hi)
    for _ in range(100):
        mid = 0.5 * (a + b)
        faster = lam * np.asarray(closure.dh(mid)) > xi
        a = np.where(faster, mid, a)
        b = np.where(faster, b, mid)
    return 0.5 * (a + b)


@dataclass(frozen=True, eq=False)
class RiemannSolution:
    """Self-similar solution with the lambda-jump at x = 0; all waves travel right."""

    lambda_left: float
    lambda_right: float
    closure: Closure
    rho_left: float
    rho_right: float
    rho_star: float
    kind: str           # none | contact | shock | rarefaction
    speeds: tuple[float, float]

    @property
    def max_speed(self) -> float:
        return max(self.speeds) if self.kind != "none" else 0.0

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        t, x = np.broadcast_arrays(t, x)
        out = np.where(x < 0.0, self.rho_left, self.rho_right).astype(float)
        live = (t > 0.0) & (x >= 0.0)
        if not live.any():
            return out if out.ndim else float(out)
        xi = x[live] / t[live]
        s_lo, s_hi = self.speeds
        vals = np.full(xi.shape, self.rho_right)
        if self.kind == "none":
            vals[:] = self.rho_star
        elif self.kind in ("contact", "shock"):
            vals = np.where(xi < s_lo, self.rho_star, self.rho_right)
        else:
            vals = np.where(xi < s_lo, self.rho_star, vals)
            fan = (xi >= s_lo) & (xi <= s_hi)
            if fan.any():
                vals[fan] = _inverse_speed(self.closure, self.lambda_right, xi[fan], self.rho_right, self.rho_star)
        out[live] = vals
        return out if out.ndim else float(out)


def riemann_exact(lambda_left: float, lambda_right: float, closure: Closure, rho_left: float, rho_right: float,
                  rho_max: float = 50.0) -> RiemannSolution:
    """
    Left state passes through; the interface trace rho* = h^-1(lambda_left h(rho_left) / lambda_right)
    keeps the flux continuous; a single wave joins rho* to rho_right under lambda_right h.
    """
    if lambda_left <= 0.0 or lambda_right <= 0.0:
        raise DomainError("speeds must be positive")
    if closure.shape != "monotone":
        raise UnsupportedRegimeError("exact Riemann reference needs an increasing closure")
    curvature = _closure_curvature(closure, max(rho_left, rho_right, 1.0) * 4.0)
    if curvature == "other":
        raise UnsupportedRegimeError(f"closure {closure.name} is neither linear nor concave")
    if rho_left < 0.0 or rho_right < 0.0:
        raise DomainError("densities must be non-negative")
    alpha_in = lambda_left * float(closure.h(rho_left))
    level = alpha_in / lambda_right
    if level >= closure.sup_h:
        raise UnsupportedRegimeError(
            f"incoming flux {alpha_in:.6g} not attainable on the right (sup {lambda_right * closure.sup_h:.6g}); "
            "boundary-layer regime"
        )
    rho_star = float(closure.h_inv(level))
    if not np.isfinite(rho_star) or rho_star > rho_max:
        raise UnsupportedRegimeError(f"interface trace {rho_star:.6g} beyond rho_max")

    def f(r):
        return lambda_right * float(closure.h(r))

    def fprime(r):
        return lambda_right * float(closure.dh(r))

    if abs(rho_star - rho_right) <= 1e-14 * max(1.0, rho_right):
        kind, speeds = "none", (0.0, 0.0)
    elif curvature == "linear":
        s = (f(rho_right) - f(rho_star)) / (rho_right - rho_star)
        kind, speeds = "contact", (s, s)
    elif rho_star < rho_right:
        # concave flux, increasing jump: Lax shock
        s = (f(rho_right) - f(rho_star)) / (rho_right - rho_star)
        kind, speeds = "shock", (s, s)
    else:
        kind, speeds = "rarefaction", (fprime(rho_star), fprime(rho_right))
    return RiemannSolution(lambda_left, lambda_right, closure, float(rho_left), float(rho_right),
                           rho_star, kind, speeds)


@dataclass(frozen=True, eq=False)
class PeriodicRiemannReference:
    """
    Piecewise-constant speed and data on the torus: one local Riemann solution per
    breakpoint, valid until a wave could reach the next breakpoint.
    """

    speed: SpeedField
    states: tuple[float, ...]
    local: tuple[RiemannSolution, ...]
    horizon: float

    @classmethod
    def build(cls, model: FluxModel, states: Sequence[float]) -> "PeriodicRiemannReference":
        speed = model.unmollified().speed
        if not isinstance(speed, SpeedField) or not speed.piecewise_constant:
            raise UnsupportedRegimeError("periodic Riemann reference needs a piecewise-constant speed")
        if len(states) != len(speed.pieces):
            raise DomainError("one density per speed piece")
        bp = np.asarray(speed.breakpoints)
        lam = np.asarray(speed.pieces, dtype=float)
        k = len(bp)
        local = []
        horizon = math.inf
        for j in range(k):
            left = (j - 1) % k
            sol = riemann_exact(lam[left], lam[j], model.closure, states[left], states[j], model.rho_max)
            local.append(sol)
            width = (bp[(j + 1) % k] - bp[j]) % 1.0 or 1.0
            if sol.max_speed > 0.0:
                horizon = min(horizon, width / sol.max_speed)
        return cls(speed, tuple(float(s) for s in states), tuple(local), horizon)

    def __call__(self, t: float, x) -> np.ndarray:
        if t > self.horizon * (1.0 + 1e-12):
            raise UnsupportedRegimeError(f"t={t:g} beyond the interaction-free horizon {self.horizon:.6g}")
        x = np.mod(np.asarray(x, dtype=float), 1.0)
        idx = self.speed.piece_index(x)
        bp = np.asarray(self.speed.breakpoints)
        out = np.empty(x.shape)
        for j, sol in enumerate(self.local):
            mask = idx == j
            if mask.any():
                out[mask] = sol(t, np.mod(x[mask] - bp[j], 1.0))
        return out

    def cell_averages(self, t: float, grid: Grid1D, sub: int = 16) -> np.ndarray:
        offsets = (np.arange(sub) + 0.5) / sub
        x = (np.arange(grid.n_cells)[:, None] + offsets[None, :]) * grid.dx
        return self(t, x).mean(axis=1)

    def initial(self, x) -> np.ndarray:
        idx = self.speed.piece_index(x)
        return np.asarray(self.states)[idx]
