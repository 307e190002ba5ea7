#!/usr/bin/env python3
"""
Experiment orchestration: ZRP ensembles along an N ladder against a PDE
reference, eps-ladders of the mollified solver, entropy audits, coupled runs,
and the CSV reports they produce.

Config files are flat key=value text (dotenv syntax) validated by
ExperimentConfig; unknown keys are rejected.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Optional, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

import entropy_audit
from coupling import microscopic_entropy, run_coupled, sample_coupled_pair
from errors import ConfigError, DiscofluxError, DomainError, UnsupportedRegimeError
from flux_model import FluxModel, MollifierKernel, RateFunction, SpeedField, build_closure
from fv_solver import CFL, Grid1D, PeriodicRiemannReference, l1_distance, solve, solve_series
from rng import STREAM_DYNAMICS, STREAM_INITIAL, replica_rng
from settings import dry_run as env_dry_run
from settings import env_defaults
from steady_states import steady_table, steady_values
from zrp_core import (
    EVENT_BUDGET,
    JumpKernel,
    ZRPDynamics,
    block_averages,
    block_table,
    occupancy_table,
    sample_product_measure,
)

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ["run_id", "N", "epsilon", "l", "M", "t", "l1_mean", "l1_std", "events_total", "wall_seconds"]
ERROR_COLUMNS = ["N", "replica", "error"]
WHOLE_LADDER_POINT = -1   # replica value for errors that hit every replica at one N
PLOT_COLUMNS = ["series", "x", "y"]
EPSILON_COLUMNS = ["epsilon", "epsilon_half", "n_cells", "l1_diff"]
YOUNG_COLUMNS = ["N", "l", "M", "max_variance", "mean_variance", "excluded_bins"]
FLOAT_FORMAT = "%.17g"
REFERENCE_SUBSAMPLES = 16


# ── Configuration ──────────────────────────────────────────────────────────────
def _split(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # model
    lambda_values: tuple[float, ...] = (2.0, 1.0)
    lambda_breakpoints: tuple[float, ...] = (0.0, 0.5)
    lambda_mode: Literal["mollified", "raw"] = "mollified"
    rate: str = "indicator"
    closure: Literal["zrp", "linear", "well"] = "zrp"
    well_center: float = 1.0
    well_sign: int = 1
    rho_max: float = 50.0
    sigma: float = 0.5
    jump_kernel: str = "1:1"
    # initial profile
    profile: Literal["constant", "riemann", "steady", "table"] = "riemann"
    rho_const: float = 0.5
    rho_left: float = 1.0 / 3.0
    rho_right: float = 2.0
    profile_alpha: float = 0.5
    profile_table: tuple[float, ...] = ()
    # ladder and ensembles
    n_ladder: tuple[int, ...] = (250, 500, 1000, 2000)
    replicas: int = 50
    block_radius: int = 10
    block_schedule: Literal["fixed", "quarter_power", "proportional"] = "fixed"
    block_fraction: float = 0.01
    t_end: float = 0.4
    snapshot_times: tuple[float, ...] = ()
    n_bins: int = 10
    event_budget: int = EVENT_BUDGET
    # PDE side
    grid_cells: int = 4000
    cfl: float = CFL
    epsilon: Optional[float] = None
    epsilon0: float = 1.0 / 16.0
    epsilon_levels: int = 4
    snapshots_per_unit: int = 50
    alphas: tuple[float, ...] = ()
    # run
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1
    dry_run: bool = False
    record_wall_time: bool = False

    @field_validator("lambda_values", "lambda_breakpoints", "profile_table", "n_ladder", "alphas", "snapshot_times",
                     mode="before")
    @classmethod
    def _comma_list(cls, value):
        return _split(value)

    @field_validator("epsilon", mode="before")
    @classmethod
    def _optional(cls, value):
        return None if isinstance(value, str) and value.strip().lower() in ("", "none") else value

    @field_validator("rate")
    @classmethod
    def _rate(cls, value):
        RateFunction.parse(value)
        return value

    @field_validator("well_sign")
    @classmethod
    def _sign(cls, value):
        if value not in (1, -1):
            raise ValueError("well_sign must be 1 or -1")
        return value

    @field_validator("jump_kernel")
    @classmethod
    def _kernel(cls, value):
        JumpKernel.parse(value)
        return value

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.lambda_values) != len(self.lambda_breakpoints) or not self.lambda_values:
            raise ValueError("lambda_values and lambda_breakpoints need the same, non-zero length")
        if any(b <= a for a, b in zip(self.n_ladder, self.n_ladder[1:])) or not self.n_ladder:
            raise ValueError("n_ladder must be strictly increasing")
        if self.replicas < 2:
            raise ValueError("replicas must be at least 2")
        if self.t_end <= 0.0:
            raise ValueError("t_end must be positive")
        times = self.snapshot_times
        if any(t < 0.0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot_times must be non-negative and strictly increasing")
        if not (0.0 < self.cfl <= 1.0):
            raise ValueError("cfl must lie in (0, 1]")
        if self.n_bins <= 0 or self.grid_cells <= 0 or self.threads <= 0:
            raise ValueError("n_bins, grid_cells and threads must be positive")
        if self.profile == "table" and not self.profile_table:
            raise ValueError("profile=table needs profile_table")
        if self.epsilon_levels < 2:
            raise ValueError("epsilon_levels must be at least 2")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        return self


def make_config(**values) -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Environment defaults < config file < explicit overrides."""
    values: dict[str, Any] = env_defaults()
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        parsed = dotenv_values(path)
        missing = [k for k, v in parsed.items() if v is None]
        if missing:
            raise ConfigError(f"config keys without a value: {', '.join(missing)}")
        values.update(parsed)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(**values)


# ── Model and profile ──────────────────────────────────────────────────────────
def build_model(cfg: ExperimentConfig) -> FluxModel:
    """The unmollified model; mollify per N with model_for_n."""
    speed = SpeedField.step(cfg.lambda_values, cfg.lambda_breakpoints)
    rate = RateFunction.parse(cfg.rate) if cfg.closure == "zrp" else None
    closure = build_closure(cfg.closure, rate, cfg.rho_max, cfg.well_center, cfg.well_sign)
    return FluxModel(speed, closure, cfg.rho_max, name=f"{cfg.closure}:{cfg.rate}" if rate else cfg.closure)


def epsilon_for(cfg: ExperimentConfig, n: int) -> float:
    if cfg.lambda_mode == "raw":
        return 0.0
    return min(0.25, float(n) ** -cfg.sigma)


def model_for_n(cfg: ExperimentConfig, base: FluxModel, n: int) -> FluxModel:
    eps = epsilon_for(cfg, n)
    return base if eps == 0.0 else base.mollified(MollifierKernel(eps))


def block_radius(cfg: ExperimentConfig, n: int) -> int:
    if cfg.block_schedule == "fixed":
        l = cfg.block_radius
    elif cfg.block_schedule == "quarter_power":
        l = int(math.floor(n ** 0.25))
    else:
        l = max(1, int(cfg.block_fraction * n))
    if not (0 <= l < n / 2):
        raise DomainError(f"block radius {l} too large for N={n}")
    return l


def initial_profile(cfg: ExperimentConfig, model: FluxModel) -> Callable[[np.ndarray], np.ndarray]:
    if cfg.profile == "constant":
        return lambda x: np.full(np.shape(x), cfg.rho_const)
    if cfg.profile == "riemann":
        speed = model.unmollified().speed
        if len(speed.pieces) != 2:
            raise DomainError("a Riemann profile needs exactly two speed pieces")
        states = np.array([cfg.rho_left, cfg.rho_right])
        return lambda x: states[speed.piece_index(np.mod(x, 1.0))]
    if cfg.profile == "steady":
        return lambda x: steady_values(model, cfg.profile_alpha, np.asarray(x, dtype=float))
    table = np.asarray(cfg.profile_table, dtype=float)
    return lambda x: table[np.minimum((np.mod(np.asarray(x, dtype=float), 1.0) * table.size).astype(int), table.size - 1)]


def reference_epsilon(cfg: ExperimentConfig) -> float:
    if cfg.epsilon is not None:
        return cfg.epsilon
    return min(0.25, max(float(cfg.n_ladder[-1]) ** -cfg.sigma, 4.0 / cfg.grid_cells))


@dataclass(eq=False)
class Reference:
    label: str
    cell_averages: Callable[[int], np.ndarray]


def reference_solution(cfg: ExperimentConfig, base: FluxModel) -> Reference:
    """Exact Riemann composition when it covers t_end, the steady profile itself, else a fine mollified solve."""
    if cfg.profile == "riemann" and base.monotone:
        try:
            exact = PeriodicRiemannReference.build(base, (cfg.rho_left, cfg.rho_right))
            if cfg.t_end <= exact.horizon:
                return Reference("riemann_exact", lambda n: exact.cell_averages(cfg.t_end, Grid1D(n)))
            logger.info("exact reference valid to t=%.4g only; using the fine-grid solver", exact.horizon)
        except UnsupportedRegimeError as e:
            logger.info("no exact reference (%s); using the fine-grid solver", e)
    if cfg.profile == "steady":
        def steady(n: int) -> np.ndarray:
            offsets = (np.arange(REFERENCE_SUBSAMPLES) + 0.5) / REFERENCE_SUBSAMPLES
            x = (np.arange(n)[:, None] + offsets[None, :]) / n
            return steady_values(base, cfg.profile_alpha, x.ravel()).reshape(x.shape).mean(axis=1)
        return Reference("steady", steady)

    eps = reference_epsilon(cfg)
    kernel = MollifierKernel(eps) if len(base.speed.pieces) > 1 else None
    rho0 = initial_profile(cfg, base)
    fine = solve(base, kernel, rho0, cfg.t_end, Grid1D(cfg.grid_cells), cfg.cfl)
    half = cfg.grid_cells // 2
    if kernel is None or eps >= 4.0 / half:
        coarse = solve(base, kernel, rho0, cfg.t_end, Grid1D(half), cfg.cfl)
        gap = l1_distance(entropy_audit.bin_to_grid(fine.values, half), coarse.values, 1.0 / half)
        logger.info("fine-grid reference: L1 gap to half resolution %.3g", gap)
    return Reference(f"fv_eps={eps:g}", lambda n: entropy_audit.bin_to_grid(fine.values, n))


# ── Worker pool ────────────────────────────────────────────────────────────────
def _dispatch(fn: Callable, jobs: list[tuple], threads: int) -> tuple[dict, dict]:
    """Run fn(*job) on a thread pool; results and failures keyed by job, in sorted order."""
    results, failures = {}, {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        futs = {ex.submit(fn, *job): job for job in jobs}
        for fut in as_completed(futs):
            job = futs[fut]
            try:
                results[job] = fut.result()
            except DiscofluxError as e:
                logger.warning("⚠️  job %s failed: %s", job, e)
                failures[job] = e
    return dict(sorted(results.items())), dict(sorted(failures.items()))


# ── Reports ────────────────────────────────────────────────────────────────────
@dataclass(eq=False)
class ConvergenceReport:
    table: pd.DataFrame
    errors: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=ERROR_COLUMNS))
    plot: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=PLOT_COLUMNS))
    ensembles: dict = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict)


def _write_csv(df: pd.DataFrame, path: str) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def emit_report(report: Union[ConvergenceReport, pd.DataFrame], out_dir: str, name: str,
                dry_run: Optional[bool] = None) -> list[str]:
    """Writes <name>.csv and <name>_plot.csv (series, x, y); plus <name>_errors.csv when errors exist."""
    if isinstance(report, pd.DataFrame):
        report = ConvergenceReport(report)
    paths = [os.path.join(out_dir, f"{name}.csv"), os.path.join(out_dir, f"{name}_plot.csv")]
    has_errors = len(report.errors) > 0
    if has_errors:
        paths.append(os.path.join(out_dir, f"{name}_errors.csv"))
    if env_dry_run() if dry_run is None else dry_run:
        logger.info("dry run: would write %s", ", ".join(paths))
        return paths
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(report.table, paths[0])
    _write_csv(report.plot.reindex(columns=PLOT_COLUMNS), paths[1])
    if has_errors:
        _write_csv(report.errors, paths[2])
    return paths


# ── Hydrodynamic limit ─────────────────────────────────────────────────────────
def _simulate(cfg: ExperimentConfig, base: FluxModel, model: FluxModel, ladder_index: int, replica: int) -> dict:
    n = cfg.n_ladder[ladder_index]
    key = ladder_index * cfg.replicas + replica
    start = time.perf_counter()
    rho0 = initial_profile(cfg, model)
    eta = sample_product_measure(model, base.closure.tables, rho0, n, replica_rng(cfg.seed, key, STREAM_INITIAL))
    dyn = ZRPDynamics(model, JumpKernel.parse(cfg.jump_kernel), n, event_budget=cfg.event_budget)
    dyn.run_until(eta, cfg.t_end, replica_rng(cfg.seed, key, STREAM_DYNAMICS))
    dyn.verify(eta)
    blocks = block_averages(eta.eta, block_radius(cfg, n))
    return {"blocks": blocks, "events": eta.events, "wall": time.perf_counter() - start}


def _require_particles(base: FluxModel) -> None:
    if base.closure.rate is None:
        raise ConfigError(f"closure {base.closure.name} has no particle system; use closure=zrp")


def run_ensembles(cfg: ExperimentConfig, base: Optional[FluxModel] = None) -> tuple[dict, dict]:
    base = base or build_model(cfg)
    _require_particles(base)
    models = [model_for_n(cfg, base, n) for n in cfg.n_ladder]
    jobs = [(i, r) for i in range(len(cfg.n_ladder)) for r in range(cfg.replicas)]
    return _dispatch(lambda i, r: _simulate(cfg, base, models[i], i, r), jobs, cfg.threads)


def run_hydro(cfg: ExperimentConfig) -> ConvergenceReport:
    base = build_model(cfg)
    _require_particles(base)
    ref = reference_solution(cfg, base)
    target = ref.cell_averages(cfg.n_bins)
    logger.info("⏳ hydro: N ladder %s, M=%d, reference %s", cfg.n_ladder, cfg.replicas, ref.label)
    results, failures = run_ensembles(cfg, base)

    x = (np.arange(cfg.n_bins) + 0.5) / cfg.n_bins
    rows, plot, ensembles = [], [pd.DataFrame({"series": "reference", "x": x, "y": target})], {}
    errors = [(cfg.n_ladder[i], r, str(e)) for (i, r), e in failures.items()]
    for i, n in enumerate(cfg.n_ladder):
        done = [results[(i, r)] for r in range(cfg.replicas) if (i, r) in results]
        if not done:
            logger.warning("⚠️  no replica finished for N=%d", n)
            continue
        blocks = np.stack([d["blocks"] for d in done])
        try:
            binned = entropy_audit.bin_to_grid(blocks, cfg.n_bins)
        except DiscofluxError as e:
            logger.warning("⚠️  N=%d skipped: %s", n, e)
            errors.append((n, WHOLE_LADDER_POINT, str(e)))
            continue
        errs = np.array([l1_distance(b, target, 1.0 / cfg.n_bins) for b in binned])
        wall = sum(d["wall"] for d in done) if cfg.record_wall_time else 0.0
        rows.append((f"hydro-N{n}", n, epsilon_for(cfg, n), block_radius(cfg, n), len(done), cfg.t_end,
                     float(errs.mean()), float(errs.std(ddof=1)) if errs.size > 1 else 0.0,
                     int(sum(d["events"] for d in done)), wall))
        plot.append(pd.DataFrame({"series": f"N{n}", "x": x, "y": binned.mean(axis=0)}))
        ensembles[n] = blocks
    errors = pd.DataFrame(sorted(errors), columns=ERROR_COLUMNS)
    return ConvergenceReport(pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS), errors,
                             pd.concat(plot, ignore_index=True), ensembles, {"reference": ref.label})


def check_convergence(report: ConvergenceReport, overlap: float = 1.96, final_ratio: float = 0.5) -> tuple[bool, str]:
    t = report.table
    if len(t) < 2:
        return False, "need at least two ladder points"
    mean = t["l1_mean"].to_numpy()
    se = t["l1_std"].to_numpy() / np.sqrt(t["M"].to_numpy())
    for k in range(len(t) - 1):
        slack = overlap * math.hypot(se[k], se[k + 1])
        if mean[k + 1] >= mean[k] + slack:
            return False, f"L1 error grows from N={t['N'].iloc[k]} to N={t['N'].iloc[k + 1]}"
    if mean[-1] >= final_ratio * mean[0]:
        return False, f"final error {mean[-1]:.3g} not below {final_ratio:g} x first {mean[0]:.3g}"
    return True, "L1 error decreases along the ladder"


# ── Young measures ─────────────────────────────────────────────────────────────
def run_young_study(cfg: ExperimentConfig, report: Optional[ConvergenceReport] = None) -> pd.DataFrame:
    """Per-bin variance of block averages along the N ladder (reuses report ensembles when given)."""
    ensembles = report.ensembles if report is not None else None
    if ensembles is None:
        results, _ = run_ensembles(cfg)
        ensembles = {}
        for i, n in enumerate(cfg.n_ladder):
            done = [results[(i, r)]["blocks"] for r in range(cfg.replicas) if (i, r) in results]
            if done:
                ensembles[n] = np.stack(done)
    rows = []
    for n in sorted(ensembles):
        blocks = ensembles[n]
        minimum = entropy_audit.MIN_ENSEMBLE
        if blocks.shape[0] < minimum:
            logger.warning("⚠️  ensemble of %d below %d at N=%d; variances are indicative", blocks.shape[0], minimum, n)
            minimum = 2
        est = entropy_audit.YoungMeasureEstimate.from_ensemble(blocks, cfg.n_bins)
        summary = entropy_audit.young_concentration(est, minimum)
        rows.append((n, block_radius(cfg, n), blocks.shape[0], summary.max_variance,
                     float(np.nanmean(summary.variances)), len(summary.excluded_bins)))
    return pd.DataFrame(rows, columns=YOUNG_COLUMNS)


def _ladder_label(table: pd.DataFrame) -> str:
    if "l" not in table:
        return "block radius not recorded"
    l = table["l"].to_numpy()
    if np.all(l == l[0]):
        return f"fixed-l ladder, l={int(l[0])}"
    listed = ",".join(str(int(v)) for v in l)
    ratio = l / table["N"].to_numpy()
    if np.allclose(ratio, ratio[-1], rtol=0.5):
        return f"proportional-l ladder, l={listed}"
    return f"l={listed}"


def check_concentration(table: pd.DataFrame, slack: float = 0.3) -> tuple[bool, str]:
    v = table["max_variance"].to_numpy()
    ladder = _ladder_label(table)
    for k in range(len(v) - 1):
        if v[k + 1] > 0.5 * (1.0 + slack) * v[k]:
            return False, (f"variance {v[k + 1]:.3g} at N={table['N'].iloc[k + 1]} not near half of {v[k]:.3g}"
                           f" ({ladder})")
    return True, f"block-average variance halves as N doubles ({ladder})"


# ── eps ladder ─────────────────────────────────────────────────────────────────
def run_epsilon_study(cfg: ExperimentConfig) -> pd.DataFrame:
    """||rho^eps - rho^{eps/2}||_1 along eps_k = eps0 2^-k with dx = eps/8."""
    base = build_model(cfg)
    eps = [cfg.epsilon0 * 2.0 ** -k for k in range(cfg.epsilon_levels)]
    rho0 = initial_profile(cfg, base.mollified(MollifierKernel(cfg.epsilon0)))

    def level(k: int):
        grid = Grid1D(int(math.ceil(8.0 / eps[k])))
        return solve(base, MollifierKernel(eps[k]), rho0, cfg.t_end, grid, cfg.cfl)

    results, failures = _dispatch(level, [(k,) for k in range(len(eps))], cfg.threads)
    if failures:
        raise next(iter(failures.values()))
    sols = [results[(k,)] for k in range(len(eps))]
    rows = []
    for k in range(len(sols) - 1):
        coarse, fine = sols[k], sols[k + 1]
        n = coarse.grid.n_cells
        diff = l1_distance(coarse.values, entropy_audit.bin_to_grid(fine.values, n), 1.0 / n)
        rows.append((eps[k], eps[k + 1], n, diff))
    return pd.DataFrame(rows, columns=EPSILON_COLUMNS)


def check_cauchy(table: pd.DataFrame, ratio: float = 0.9, floor: float = 1e-12) -> tuple[bool, str]:
    d = table["l1_diff"].to_numpy()
    for k in range(len(d) - 1):
        if d[k] <= floor and d[k + 1] <= floor:
            continue
        if d[k + 1] > ratio * d[k]:
            return False, f"L1 difference ratio {d[k + 1] / d[k]:.3g} above {ratio:g}"
    return True, "eps ladder is Cauchy"


# ── Single-purpose runs for the CLI ────────────────────────────────────────────
def snapshot_times(cfg: ExperimentConfig) -> tuple[float, ...]:
    return cfg.snapshot_times or (cfg.t_end,)


def run_solve(cfg: ExperimentConfig) -> pd.DataFrame:
    """Solver profiles (t, x, rho) at each snapshot time, marching from one snapshot to the next."""
    base = build_model(cfg)
    kernel, grid = MollifierKernel(reference_epsilon(cfg)), Grid1D(cfg.grid_cells)
    values, t, frames = initial_profile(cfg, base), 0.0, []
    for s in snapshot_times(cfg):
        sol = solve(base, kernel, values, s - t, grid, cfg.cfl)
        values, t = sol.values, s
        frames.append(sol.table().assign(t=s))
    return pd.concat(frames, ignore_index=True)[["t", "x", "rho"]]


def run_steady(cfg: ExperimentConfig) -> pd.DataFrame:
    base = build_model(cfg)
    model = base if cfg.lambda_mode == "raw" else base.mollified(MollifierKernel(reference_epsilon(cfg)))
    return steady_table(model, cfg.alphas or (cfg.profile_alpha,), Grid1D(cfg.grid_cells))


@dataclass(eq=False)
class ZRPSnapshots:
    occupancy: pd.DataFrame     # t, u, eta
    blocks: pd.DataFrame        # t, x, eta_l


def run_zrp(cfg: ExperimentConfig) -> ZRPSnapshots:
    """
    One trajectory at the first ladder point, recorded at each snapshot time.
    Uses the seeds of hydro replica 0, so a single snapshot at t_end matches it.
    """
    base = build_model(cfg)
    _require_particles(base)
    n = cfg.n_ladder[0]
    model, l = model_for_n(cfg, base, n), block_radius(cfg, n)
    eta = sample_product_measure(model, base.closure.tables, initial_profile(cfg, model), n,
                                 replica_rng(cfg.seed, 0, STREAM_INITIAL))
    dyn = ZRPDynamics(model, JumpKernel.parse(cfg.jump_kernel), n, event_budget=cfg.event_budget)
    rng = replica_rng(cfg.seed, 0, STREAM_DYNAMICS)
    occupancy, blocks = [], []
    for s in snapshot_times(cfg):
        dyn.run_until(eta, s, rng)
        dyn.verify(eta)
        occupancy.append(occupancy_table(eta).assign(t=s)[["t", "u", "eta"]])
        blocks.append(block_table(eta, l).assign(t=s)[["t", "x", "eta_l"]])
    logger.info("zrp: N=%d, l=%d, %d events to t=%.4g", n, l, eta.events, eta.sim_time)
    return ZRPSnapshots(pd.concat(occupancy, ignore_index=True), pd.concat(blocks, ignore_index=True))


def _audit_at(cfg: ExperimentConfig, base: FluxModel, n_cells: int):
    eps = reference_epsilon(cfg)
    kernel = MollifierKernel(eps)
    grid = Grid1D(n_cells)
    n_intervals = max(1, int(round(cfg.snapshots_per_unit * cfg.t_end)))
    rho0 = initial_profile(cfg, base)
    series = solve_series(base, kernel, rho0, cfg.t_end, grid, n_intervals, cfg.cfl)
    model = base.mollified(kernel)
    report = entropy_audit.audit(series, model, cfg.alphas or None, threads=cfg.threads)
    return report, entropy_audit.fit_grid_constant(report, grid.dx, series.dt)


def run_audit(cfg: ExperimentConfig) -> ConvergenceReport:
    """Entropy residuals on the configured grid and its refinement; meta carries both fitted constants."""
    base = build_model(cfg)
    report, c1 = _audit_at(cfg, base, cfg.grid_cells)
    _, c2 = _audit_at(cfg, base, 2 * cfg.grid_cells)
    plot = report.assign(series=report["J_id"] + ":" + report["branch"]).rename(columns={"alpha": "x", "residual": "y"})
    return ConvergenceReport(report, plot=plot[PLOT_COLUMNS], meta={"C": c1, "C_refined": c2})


def check_audit(report: ConvergenceReport) -> tuple[bool, str]:
    c1, c2 = report.meta["C"], report.meta["C_refined"]
    if c1 == 0.0 and c2 == 0.0:
        return True, "all residuals non-negative"
    lo, hi = sorted((c1, c2))
    if lo == 0.0 or hi / lo >= 2.0:
        return False, f"grid constant unstable under refinement: {c1:.3g} vs {c2:.3g}"
    return True, f"grid constant C={c1:.3g} (refined {c2:.3g})"


@dataclass(eq=False)
class CoupleReport:
    table: pd.DataFrame           # (t, discrepancy, discrepancy_std, uncoupled_pairs)
    entropy: pd.DataFrame         # (replica, J_id, value)
    errors: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=ERROR_COLUMNS))

    @property
    def plot(self) -> pd.DataFrame:
        return pd.DataFrame({"series": "discrepancy", "x": self.table["t"], "y": self.table["discrepancy"]})


def run_couple(cfg: ExperimentConfig) -> CoupleReport:
    """eta from the configured profile, xi from the invariant measure at profile_alpha, first ladder point."""
    base = build_model(cfg)
    _require_particles(base)
    n = cfg.n_ladder[0]
    model = model_for_n(cfg, base, n)
    kernel = JumpKernel.parse(cfg.jump_kernel)
    tests = entropy_audit.default_test_functions(cfg.t_end)
    l = block_radius(cfg, n)

    def replica(r: int):
        pair = sample_coupled_pair(model, base.closure.tables, initial_profile(cfg, model), cfg.profile_alpha, n,
                                   replica_rng(cfg.seed, r, STREAM_INITIAL))
        run = run_coupled(pair, model, kernel, cfg.t_end, replica_rng(cfg.seed, r, STREAM_DYNAMICS),
                          cfg.snapshots_per_unit, event_budget=cfg.event_budget)
        return run.trace, [(r, J.id, microscopic_entropy(run, J, l, model)) for J in tests]

    results, failures = _dispatch(replica, [(r,) for r in range(cfg.replicas)], cfg.threads)
    traces = [res[0] for res in results.values()]
    if traces:
        d = np.stack([t["discrepancy"].to_numpy() for t in traces])
        u = np.stack([t["uncoupled_pairs"].to_numpy() for t in traces])
        table = pd.DataFrame({"t": traces[0]["t"], "discrepancy": d.mean(axis=0),
                              "discrepancy_std": d.std(axis=0, ddof=1) if len(traces) > 1 else 0.0,
                              "uncoupled_pairs": u.mean(axis=0)})
    else:
        table = pd.DataFrame(columns=["t", "discrepancy", "discrepancy_std", "uncoupled_pairs"])
    entropy = pd.DataFrame([row for res in results.values() for row in res[1]], columns=["replica", "J_id", "value"])
    errors = pd.DataFrame([(n, r, str(e)) for (r,), e in failures.items()], columns=ERROR_COLUMNS)
    return CoupleReport(table, entropy, errors)


def check_couple(report: CoupleReport, bands: float = 3.0, trend_bands: float = 2.0) -> tuple[bool, str]:
    for j_id, grp in report.entropy.groupby("J_id", sort=True):
        v = grp["value"].to_numpy()
        se = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
        if v.mean() < -bands * se:
            return False, f"microscopic entropy mean {v.mean():.3g} below -{bands:g} SE for {j_id}"
    t = report.table
    if len(t) > 1:
        m = len(report.entropy["replica"].unique()) or 1
        se = t["discrepancy_std"].to_numpy() / math.sqrt(m)
        d = t["discrepancy"].to_numpy()
        if np.any(np.diff(d) > trend_bands * np.hypot(se[:-1], se[1:]) + 1e-15):
            return False, "ensemble discrepancy increases beyond its noise band"
    return True, "coupling checks passed"
