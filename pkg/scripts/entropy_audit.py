#!/usr/bin/env python3
"""
Discrete audit of the adapted entropy inequality

    int int |rho - m_a| J_t + sgn(rho - m_a) (F(x, rho) - a) J_x dt dx + int |rho0 - m_a| J(0, x) dx >= 0

over a fixed library of flux levels a and test functions J, plus Young-measure
estimates built from ensembles of block-averaged particle profiles.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import DomainError, NoSolutionError
from flux_model import FluxModel, RateFunction, SpeedField, closure_from_rate
from fv_solver import Grid1D, GridSolution, SolutionSeries
from steady_states import BRANCHES, envelope_alpha, steady_profile

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["alpha", "branch", "J_id", "residual"]
N_ALPHAS = 12
ALPHA_HEADROOM = 1.2
X_CENTERS = (0.25, 0.5, 0.75)
X_WIDTHS = (0.05, 0.1, 0.2)
MIN_ENSEMBLE = 30


# ── Test functions ─────────────────────────────────────────────────────────────
def _bump(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Peak-one bump e * exp(-1/(1-z^2)) on (-1, 1) and its derivative in z."""
    inside = np.abs(z) < 1.0
    zz = np.where(inside, z, 0.0)
    q = 1.0 - zz * zz
    val = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
    der = np.where(inside, val * (-2.0 * zz / (q * q)), 0.0)
    return val, der


def _smooth_cutoff(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1 for s <= 0, 0 for s >= 1, smooth in between; value and d/ds."""
    s = np.clip(s, 0.0, 1.0)
    inner = (s > 0.0) & (s < 1.0)
    ss = np.where(inner, s, 0.5)
    a = np.exp(-1.0 / (1.0 - ss))
    b = np.exp(-1.0 / ss)
    da = -a / (1.0 - ss) ** 2     # d/ds of exp(-1/(1-s))
    db = b / ss ** 2
    val = np.where(inner, a / (a + b), np.where(s <= 0.0, 1.0, 0.0))
    der = np.where(inner, (da * b - a * db) / (a + b) ** 2, 0.0)
    return val, der


@dataclass(frozen=True)
class TestFunction:
    """J(t, x) = S(t) B((x - center)/width) with B a periodic peak-one bump and S a smooth cutoff."""

    __test__ = False   # not a pytest class

    center: float
    width: float
    t_end: float
    hold: float = 0.5       # S = 1 on [0, hold * t_end]
    vanish: float = 0.9     # S = 0 from vanish * t_end

    def __post_init__(self):
        if not (0.0 < self.width < 0.5):
            raise DomainError("bump width must lie in (0, 1/2)")
        if self.t_end <= 0.0 or not (0.0 < self.hold < self.vanish < 1.0):
            raise DomainError("need t_end > 0 and 0 < hold < vanish < 1")

    @property
    def id(self) -> str:
        return f"c{self.center:g}_w{self.width:g}"

    def _space(self, x):
        d = np.mod(np.asarray(x, dtype=float) - self.center + 0.5, 1.0) - 0.5
        val, der = _bump(d / self.width)
        return val, der / self.width

    def _time(self, t):
        a, b = self.hold * self.t_end, self.vanish * self.t_end
        val, der = _smooth_cutoff((np.asarray(t, dtype=float) - a) / (b - a))
        return val, der / (b - a)

    def __call__(self, t, x):
        return self._time(t)[0] * self._space(x)[0]

    def dt(self, t, x):
        return self._time(t)[1] * self._space(x)[0]

    def dx(self, t, x):
        return self._time(t)[0] * self._space(x)[1]


def default_test_functions(t_end: float) -> list[TestFunction]:
    return [TestFunction(c, w, t_end) for c in X_CENTERS for w in X_WIDTHS]


def default_alphas(model: FluxModel, rho0: Sequence[float], n: int = N_ALPHAS) -> np.ndarray:
    """n levels from M0 to ALPHA_HEADROOM * envelope_alpha, kept inside the attainable range."""
    lo = model.M0
    try:
        top = envelope_alpha(model, rho0)
    except DomainError as e:
        # data that jumps with lambda can sit above every mollified steady state near the jump
        base = model.unmollified()
        if base is model:
            raise
        logger.info("envelope taken on the unmollified speed (%s)", e)
        top = envelope_alpha(base, rho0)
    hi = ALPHA_HEADROOM * top
    if model.monotone:
        hi = min(hi, model.speed.lambda_lo * model.closure.sup_h * (1.0 - 1e-9))
    return np.linspace(min(lo, hi), max(lo, hi), n)


# ── Residuals ──────────────────────────────────────────────────────────────────
def _midpoint_sum(series: SolutionSeries, integrand) -> float:
    x = series.grid.centers
    total = 0.0
    for snap in series.midpoints:
        total += float(np.sum(integrand(snap.time, x, snap.values)))
    return total * series.dt * series.grid.dx


def entropy_residual(series: SolutionSeries, model: FluxModel, alpha: float, branch: str,
                     J: TestFunction) -> float:
    """Midpoint quadrature in t and x of the adapted inequality; sgn(0) = 0."""
    m = steady_profile(model, alpha, series.grid, branch)
    x = series.grid.centers

    def integrand(t, x, rho):
        diff = rho - m
        return np.abs(diff) * J.dt(t, x) + np.sign(diff) * (model.flux(x, rho) - alpha) * J.dx(t, x)

    initial = float(np.sum(np.abs(series.initial.values - m) * J(0.0, x))) * series.grid.dx
    return _midpoint_sum(series, integrand) + initial


def weak_form_residual(series: SolutionSeries, model: FluxModel, J: TestFunction) -> float:
    """int int rho J_t + F J_x + int rho0 J(0); zero for weak solutions."""
    x = series.grid.centers

    def integrand(t, x, rho):
        return rho * J.dt(t, x) + model.flux(x, rho) * J.dx(t, x)

    initial = float(np.sum(series.initial.values * J(0.0, x))) * series.grid.dx
    return _midpoint_sum(series, integrand) + initial


def sgn_form_gap(model: FluxModel, alpha: float, x, k, branch: str = "plus") -> float:
    """max |sgn(k - m_a(x)) (F(x,k) - a) - |F(x,k) - a|| over the (x, k) sample grid."""
    from steady_states import steady_values

    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    m = steady_values(model, alpha, x, branch)
    X, K = np.meshgrid(x, k, indexing="ij")
    f = np.asarray(model.flux(X, K)) - alpha
    return float(np.max(np.abs(np.sign(K - m[:, None]) * f - np.abs(f))))


def _branches(model: FluxModel, branch: Optional[str]) -> tuple[str, ...]:
    if branch is not None:
        return (branch,)
    return ("plus",) if model.monotone else BRANCHES


def audit(series: SolutionSeries, model: FluxModel, alphas: Optional[Iterable[float]] = None,
          tests: Optional[Sequence[TestFunction]] = None, branch: Optional[str] = None,
          threads: int = 1) -> pd.DataFrame:
    """EntropyReport: one row per (alpha, branch, J); unattainable levels are skipped with a warning."""
    alphas = default_alphas(model, series.initial.values) if alphas is None else np.asarray(list(alphas), float)
    tests = default_test_functions(series.t_end) if tests is None else list(tests)
    jobs = [(float(a), b, j) for a in alphas for b in _branches(model, branch) for j in range(len(tests))]

    def one(job):
        a, b, j = job
        return a, b, tests[j].id, entropy_residual(series, model, a, b, tests[j])

    rows = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        futs = {ex.submit(one, job): job for job in jobs}
        for fut in as_completed(futs):
            job = futs[fut]
            try:
                rows[job] = fut.result()
            except NoSolutionError as e:
                logger.warning("⚠️  skipping alpha=%.6g branch=%s: %s", job[0], job[1], e)

    ordered = [rows[k] for k in sorted(rows)]
    report = pd.DataFrame(ordered, columns=REPORT_COLUMNS)
    report.attrs.update(n_cells=series.grid.n_cells, dt=series.dt, model=model.name, t_end=series.t_end)
    return report


def minimum_residual(report: pd.DataFrame) -> float:
    return float(report["residual"].min()) if len(report) else math.nan


def fit_grid_constant(report: pd.DataFrame, dx: float, dt: float) -> float:
    """Smallest C with residual >= -C (dx + dt) for every row."""
    worst = max(0.0, -minimum_residual(report)) if len(report) else 0.0
    return worst / (dx + dt)


# ── Initial data ───────────────────────────────────────────────────────────────
def initial_recovery(sol: Union[GridSolution, SolutionSeries], rho0, L: float, center: float = 0.5,
                     t_min: float = 0.0) -> float:
    """
    int over |x - center| <= L of |rho(t*, x) - rho0(x)|, with t* the earliest
    snapshot at or after t_min (a GridSolution is its own snapshot).
    """
    if isinstance(sol, SolutionSeries):
        snaps = [sol.initial] + list(sol.midpoints)
        later = [s for s in snaps if s.time >= t_min - 1e-15]
        if not later:
            raise DomainError(f"no snapshot at or after t={t_min:g}")
        sol = later[0]
    x = sol.grid.centers
    ref = np.asarray(rho0(x) if callable(rho0) else rho0, dtype=float)
    d = np.mod(x - center + 0.5, 1.0) - 0.5
    window = np.abs(d) <= L
    return float(np.sum(np.abs(sol.values - ref)[window])) * sol.grid.dx


# ── Crafted profiles ───────────────────────────────────────────────────────────
def crafted_expansion_shock(n_cells: int = 400, t_end: float = 0.3, n_intervals: int = 60,
                            low: float = 0.25, high: float = 2.0,
                            left: float = 0.1, right: float = 0.5) -> tuple[FluxModel, SolutionSeries]:
    """
    lambda = 1, h = rho/(1+rho). A plateau at `high` on [left, right) over `low`: the
    upward jump at `left` is an admissible shock, the downward jump at `right` is an
    expansion shock. Both travel at the Rankine-Hugoniot speed, so the translate is a
    weak solution that is not entropic.
    """
    closure = closure_from_rate(RateFunction("indicator"))
    model = FluxModel(SpeedField.constant(1.0), closure, name="crafted")
    s = float((closure.h(high) - closure.h(low)) / (high - low))
    grid = Grid1D(n_cells)

    def profile(t):
        y = np.mod(grid.centers - s * t, 1.0)
        return np.where((y >= left) & (y < right), high, low)

    dt = t_end / n_intervals
    series = SolutionSeries(GridSolution(grid, 0.0, profile(0.0), model.name), [], t_end)
    for k in range(n_intervals):
        t = (k + 0.5) * dt
        series.midpoints.append(GridSolution(grid, t, profile(t), model.name))
    return model, series


# ── Young measures ─────────────────────────────────────────────────────────────
def bin_to_grid(values: np.ndarray, n_cells: int) -> np.ndarray:
    """Average site values (last axis, N sites at u/N) into n_cells equal cells."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    cell = (np.arange(n) * n_cells) // n
    counts = np.bincount(cell, minlength=n_cells).astype(float)
    if np.any(counts == 0):
        raise DomainError(f"{n} sites cannot fill {n_cells} cells")
    flat = values.reshape(-1, n)
    out = np.stack([np.bincount(cell, weights=row, minlength=n_cells) for row in flat]) / counts
    return out.reshape(values.shape[:-1] + (n_cells,))


@dataclass(eq=False)
class YoungMeasureEstimate:
    """
    Per x-bin histogram of block averages pooled over sites in the bin and over the
    ensemble, plus per-bin mean and the across-ensemble variance averaged over sites.
    """

    bin_centers: np.ndarray
    edges: np.ndarray
    histograms: np.ndarray      # (n_bins, n_hist), rows sum to 1 (or 0 when empty)
    mean: np.ndarray
    variance: np.ndarray
    counts: np.ndarray
    ensemble_size: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_ensemble(cls, blocks: np.ndarray, n_bins: int, edges: Optional[np.ndarray] = None,
                      n_hist: int = 50) -> "YoungMeasureEstimate":
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 2:
            raise DomainError("ensemble must be an (M, N) array of block averages")
        m, n = blocks.shape
        if edges is None:
            top = float(blocks.max()) if blocks.size else 1.0
            edges = np.linspace(0.0, top * (1.0 + 1e-9) + 1e-12, n_hist + 1)
        edges = np.asarray(edges, dtype=float)
        which = (np.arange(n) * n_bins) // n
        hist = np.zeros((n_bins, edges.size - 1))
        mean = np.full(n_bins, np.nan)
        var = np.full(n_bins, np.nan)
        counts = np.zeros(n_bins, dtype=np.int64)
        site_var = blocks.var(axis=0, ddof=1) if m > 1 else np.zeros(n)
        for b in range(n_bins):
            cols = which == b
            vals = blocks[:, cols].ravel()
            counts[b] = vals.size
            if vals.size == 0:
                continue
            h, _ = np.histogram(np.clip(vals, edges[0], edges[-1]), bins=edges)
            hist[b] = h / h.sum()
            mean[b] = vals.mean()
            var[b] = site_var[cols].mean()
        centers = (np.arange(n_bins) + 0.5) / n_bins
        return cls(centers, edges, hist, mean, var, counts, m)


@dataclass(frozen=True)
class ConcentrationSummary:
    max_variance: float
    variances: np.ndarray
    excluded_bins: tuple[int, ...]


def young_concentration(estimate: YoungMeasureEstimate, min_ensemble: int = MIN_ENSEMBLE) -> ConcentrationSummary:
    if estimate.ensemble_size < min_ensemble:
        raise DomainError(f"ensemble of {estimate.ensemble_size} below the minimum {min_ensemble}")
    empty = tuple(int(b) for b in np.flatnonzero(estimate.counts == 0))
    if empty:
        logger.warning("⚠️  %d empty bins excluded: %s", len(empty), empty)
    live = estimate.counts > 0
    variances = np.where(live, estimate.variance, np.nan)
    top = float(np.nanmax(variances)) if live.any() else math.nan
    return ConcentrationSummary(top, variances, empty)


def measure_valued_residual(ensemble: Sequence[SolutionSeries], model: FluxModel, alpha: float, branch: str,
                            J: TestFunction) -> float:
    """The entropy pairing against the empirical Young measure of the ensemble (mean of member residuals)."""
    if not ensemble:
        raise DomainError("empty ensemble")
    return float(np.mean([entropy_residual(s, model, alpha, branch, J) for s in ensemble]))
