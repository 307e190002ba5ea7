#!/usr/bin/env python3
"""
Steady states m_alpha(x) with F(x, m_alpha(x)) = alpha.

Monotone closures have one family; convex/concave closures have a plus
branch (densities >= rho_m) and a minus branch (densities <= rho_m) that
merge at the extremum level M0.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DomainError, NoSolutionError
from flux_model import FluxModel, MollifierKernel

logger = logging.getLogger(__name__)

BRANCHES = ("plus", "minus")
MAX_BISECTIONS = 200
RESIDUAL_TOL = 1e-10
ENVELOPE_STEPS = 100   # 1% granularity


def _bracket(model: FluxModel, size: int, branch: str) -> tuple[np.ndarray, np.ndarray]:
    if branch not in BRANCHES:
        raise DomainError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if model.monotone:
        lo, hi = 0.0, model.rho_max
    elif branch == "plus":
        lo, hi = model.rho_m, model.rho_max
    else:
        lo, hi = 0.0, model.rho_m
    return np.full(size, lo), np.full(size, hi)


def _solve(model: FluxModel, alpha: float, x: np.ndarray, branch: str, cells: bool = False) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lam = np.asarray(model.speed(x), dtype=float).reshape(x.shape)
    h = model.closure.h

    def f(r):
        return lam * np.asarray(h(r), dtype=float) - alpha

    lo, hi = _bracket(model, x.size, branch)
    flo, fhi = f(lo), f(hi)
    increasing = fhi >= flo
    a_min = np.minimum(flo, fhi) + alpha
    a_max = np.maximum(flo, fhi) + alpha
    slack = 1e-12 * max(1.0, abs(alpha))
    bad = np.flatnonzero((alpha < a_min - slack) | (alpha > a_max + slack))
    if bad.size:
        i = int(bad[0])
        raise NoSolutionError(alpha, float(x[i]), (float(a_min[i]), float(a_max[i])), cell=i if cells else None)

    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        right = np.where(increasing, fm < 0.0, fm > 0.0)
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
        if np.all(hi - lo <= 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi))):
            break

    # secant polish inside the final bracket
    flo, fhi = f(lo), f(hi)
    denom = fhi - flo
    safe = np.where(denom != 0.0, denom, 1.0)
    sec = np.clip(np.where(denom != 0.0, lo - flo * (hi - lo) / safe, 0.5 * (lo + hi)), lo, hi)
    candidates = np.stack([lo, hi, sec])
    residual = np.abs(np.stack([flo, fhi, f(sec)]))
    best = np.argmin(residual, axis=0)
    root = candidates[best, np.arange(x.size)]
    worst = residual[best, np.arange(x.size)].max()
    if worst > RESIDUAL_TOL * max(1.0, abs(alpha)):
        logger.warning("steady state residual %.3g at alpha=%.6g exceeds target", worst, alpha)
    return root


def solve_steady(model: FluxModel, alpha: float, x: float, branch: str = "plus") -> float:
    """m with F(x, m) = alpha on the requested branch."""
    return float(_solve(model, float(alpha), np.array([x]), branch)[0])


@lru_cache(maxsize=256)
def _cached_profile(model: FluxModel, alpha: float, n_cells: int, branch: str) -> np.ndarray:
    centers = (np.arange(n_cells) + 0.5) / n_cells
    profile = _solve(model, alpha, centers, branch, cells=True)
    profile.setflags(write=False)
    return profile


def steady_profile(model: FluxModel, alpha: float, grid, branch: str = "plus") -> np.ndarray:
    """m_alpha at the cell centers of `grid` (anything with n_cells); cached per (model, alpha, grid, branch)."""
    return _cached_profile(model, float(alpha), int(grid.n_cells), branch).copy()


def steady_values(model: FluxModel, alpha: float, x, branch: str = "plus") -> np.ndarray:
    return _solve(model, float(alpha), np.asarray(x, dtype=float), branch)


def envelope_alpha(model: FluxModel, rho_profile: Sequence[float], x: Optional[Sequence[float]] = None) -> float:
    """
    Smallest alpha on a 1% grid between M0 and the far level with m_alpha >= rho_profile
    everywhere (plus branch). x defaults to the cell centers of a grid with len(rho_profile) cells.
    """
    rho = np.asarray(rho_profile, dtype=float)
    if rho.size == 0:
        raise DomainError("empty profile")
    if np.any(~np.isfinite(rho)) or rho.min() < 0.0 or rho.max() > model.rho_max:
        raise DomainError(f"profile leaves the closure range [0, {model.rho_max:g}]")
    x = (np.arange(rho.size) + 0.5) / rho.size if x is None else np.asarray(x, dtype=float)

    m0 = model.M0
    top = float(rho.max())
    # on the plus branch the binding constraint is at the largest density and the fastest speed
    far = model.speed.lambda_hi * float(model.closure.h(top)) if model.monotone or top > model.rho_m else m0
    slack = 1e-12 * max(1.0, np.abs(rho).max())
    for k in range(ENVELOPE_STEPS + 1):
        alpha = m0 + (far - m0) * k / ENVELOPE_STEPS
        try:
            m = steady_values(model, alpha, x, "plus")
        except NoSolutionError:
            continue
        if np.all(m >= rho - slack):
            return float(alpha)
    raise DomainError("no steady state on the search grid dominates the profile")


def steady_table(model: FluxModel, alphas: Iterable[float], grid) -> pd.DataFrame:
    """Rows (x, alpha, m_alpha_plus, m_alpha_minus); NaN where a branch has no solution."""
    frames = []
    centers = (np.arange(grid.n_cells) + 0.5) / grid.n_cells
    for alpha in alphas:
        row = {"x": centers, "alpha": np.full(centers.size, float(alpha))}
        for branch in BRANCHES:
            try:
                row[f"m_alpha_{branch}"] = steady_profile(model, alpha, grid, branch)
            except NoSolutionError as e:
                logger.warning("⚠️  %s", e)
                row[f"m_alpha_{branch}"] = np.full(centers.size, np.nan)
        frames.append(pd.DataFrame(row))
    if not frames:
        return pd.DataFrame(columns=["x", "alpha", "m_alpha_plus", "m_alpha_minus"])
    return pd.concat(frames, ignore_index=True)


def steady_convergence(model: FluxModel, alpha: float, epsilons: Sequence[float], x: Sequence[float],
                       branch: str = "plus") -> list[float]:
    """max_x |m_alpha^eps(x) - m_alpha(x)| for each eps; x should avoid the breakpoints."""
    x = np.asarray(x, dtype=float)
    exact = steady_values(model, alpha, x, branch)
    out = []
    for eps in epsilons:
        smooth = model.mollified(MollifierKernel(eps))
        out.append(float(np.max(np.abs(steady_values(smooth, alpha, x, branch) - exact))))
    return out
